/**
 * TDS1 dataset directory reader: metadata.json plus samples.tds1
 * (magic "TDS1" | u32 count | u16 C,H,W | per sample C*H*W f32 pixels,
 * u16 utility label, u8 privacy label; little-endian).
 */
import * as fs from "node:fs";
import * as path from "node:path";

import { Tensor } from "./tensor.js";

export interface DatasetSample {
  image: Tensor;
  utilityLabel: number;
  privacyLabel: number;
}

export interface Dataset {
  imageShape: { c: number; h: number; w: number };
  prior: number[];
  samples: DatasetSample[];
}

export function loadTds1Dir(dir: string): Dataset {
  const meta = JSON.parse(fs.readFileSync(path.join(dir, "metadata.json"), "utf-8"));
  const buf = fs.readFileSync(path.join(dir, "samples.tds1"));
  if (buf.length < 14 || buf.toString("latin1", 0, 4) !== "TDS1") {
    throw new Error(`bad TDS1 magic in ${dir}`);
  }
  const count = buf.readUInt32LE(4);
  const c = buf.readUInt16LE(8);
  const h = buf.readUInt16LE(10);
  const w = buf.readUInt16LE(12);
  const pixels = c * h * w;
  const record = pixels * 4 + 3;
  if (buf.length !== 14 + count * record) {
    throw new Error(`TDS1 payload length ${buf.length - 14} != count ${count} * record ${record}`);
  }
  const samples: DatasetSample[] = [];
  let off = 14;
  for (let i = 0; i < count; i++) {
    const data = new Float32Array(pixels);
    for (let j = 0; j < pixels; j++) data[j] = buf.readFloatLE(off + j * 4);
    off += pixels * 4;
    const utilityLabel = buf.readUInt16LE(off);
    const privacyLabel = buf.readUInt8(off + 2);
    off += 3;
    samples.push({ image: { data, c, h, w }, utilityLabel, privacyLabel });
  }
  return { imageShape: { c, h, w }, prior: meta.prior ?? [], samples };
}
