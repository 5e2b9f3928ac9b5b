/**
 * PSF1 sanitizer bundle parser.
 *
 * Layout (little-endian): magic "PSF1" | u32 version=1 | u16 C,H,W |
 * u32 op_count | ops | u32 crc32 over everything after the magic.
 * Op kinds: 0 conv2d (u16 in,out,kh,kw,stride,pad + f32 weights [out,in,kh,kw]
 * + f32 bias[out]), 1 leaky_relu (f32 slope), 2 maxpool2x, 3 upsample_nearest2x,
 * 4 concat_skip (u32 source_op_index), 5 sigmoid.
 */
import * as fs from "node:fs";

import { crc32 } from "./crc32.js";
import { Conv2dParams } from "./ops.js";

export const PSF1_MAGIC = "PSF1";
export const PSF1_VERSION = 1;

export class LoadError extends Error {}

export type Op =
  | { kind: "conv2d"; params: Conv2dParams }
  | { kind: "leaky_relu"; slope: number }
  | { kind: "maxpool2x" }
  | { kind: "upsample_nearest2x" }
  | { kind: "concat_skip"; sourceOpIndex: number }
  | { kind: "sigmoid" };

export interface LoadedSanitizer {
  inputShape: { c: number; h: number; w: number };
  ops: Op[];
  metadata: Record<string, unknown> | null;
}

const MAX_OPS = 4096;

class Reader {
  private off: number;

  constructor(private buf: Buffer, offset: number, private end: number) {
    this.off = offset;
  }

  private need(n: number, what: string) {
    if (this.off + n > this.end) {
      throw new LoadError(`truncated file while reading ${what}`);
    }
  }

  u8(what: string): number {
    this.need(1, what);
    return this.buf.readUInt8(this.off++);
  }

  u16(what: string): number {
    this.need(2, what);
    const v = this.buf.readUInt16LE(this.off);
    this.off += 2;
    return v;
  }

  u32(what: string): number {
    this.need(4, what);
    const v = this.buf.readUInt32LE(this.off);
    this.off += 4;
    return v;
  }

  f32(what: string): number {
    this.need(4, what);
    const v = this.buf.readFloatLE(this.off);
    this.off += 4;
    return v;
  }

  f32Array(count: number, what: string): Float32Array {
    this.need(count * 4, what);
    const out = new Float32Array(count);
    for (let i = 0; i < count; i++) out[i] = this.buf.readFloatLE(this.off + i * 4);
    this.off += count * 4;
    return out;
  }

  get offset(): number {
    return this.off;
  }
}

export function decodePsf1(buf: Buffer): Omit<LoadedSanitizer, "metadata"> {
  if (buf.length < 4 || buf.toString("latin1", 0, 4) !== PSF1_MAGIC) {
    throw new LoadError(`bad magic ${JSON.stringify(buf.toString("latin1", 0, 4))}, expected "PSF1"`);
  }
  if (buf.length < 4 + 14 + 4) {
    throw new LoadError("truncated file: too short for header and checksum");
  }
  const stored = buf.readUInt32LE(buf.length - 4);
  const actual = crc32(buf.subarray(4, buf.length - 4));
  if (stored !== actual) {
    throw new LoadError(`checksum mismatch: stored 0x${stored.toString(16)}, computed 0x${actual.toString(16)}`);
  }

  const r = new Reader(buf, 4, buf.length - 4);
  const version = r.u32("version");
  if (version !== PSF1_VERSION) {
    throw new LoadError(`unsupported version ${version}, expected ${PSF1_VERSION}`);
  }
  const c = r.u16("C");
  const h = r.u16("H");
  const w = r.u16("W");
  if (c < 1 || h < 1 || w < 1) {
    throw new LoadError(`bad input_shape (${c}, ${h}, ${w})`);
  }
  const opCount = r.u32("op_count");
  if (opCount > MAX_OPS) {
    throw new LoadError(`op_count ${opCount} exceeds limit ${MAX_OPS}`);
  }
  const ops: Op[] = [];
  for (let i = 0; i < opCount; i++) {
    const kind = r.u8(`op[${i}] kind`);
    switch (kind) {
      case 0: {
        const inCh = r.u16(`op[${i}] in_ch`);
        const outCh = r.u16(`op[${i}] out_ch`);
        const kh = r.u16(`op[${i}] kh`);
        const kw = r.u16(`op[${i}] kw`);
        const stride = r.u16(`op[${i}] stride`);
        const pad = r.u16(`op[${i}] pad`);
        if (inCh < 1 || outCh < 1 || kh < 1 || kw < 1 || stride < 1) {
          throw new LoadError(`op[${i}] conv2d header has non-positive field`);
        }
        const weight = r.f32Array(outCh * inCh * kh * kw, `op[${i}] weights`);
        const bias = r.f32Array(outCh, `op[${i}] bias`);
        ops.push({ kind: "conv2d", params: { inCh, outCh, kh, kw, stride, pad, weight, bias } });
        break;
      }
      case 1:
        ops.push({ kind: "leaky_relu", slope: r.f32(`op[${i}] slope`) });
        break;
      case 2:
        ops.push({ kind: "maxpool2x" });
        break;
      case 3:
        ops.push({ kind: "upsample_nearest2x" });
        break;
      case 4: {
        const src = r.u32(`op[${i}] source_op_index`);
        if (src >= i) {
          throw new LoadError(`op[${i}] concat source_op_index ${src} is not an earlier op`);
        }
        ops.push({ kind: "concat_skip", sourceOpIndex: src });
        break;
      }
      case 5:
        ops.push({ kind: "sigmoid" });
        break;
      default:
        throw new LoadError(`op[${i}] has unknown kind ${kind}`);
    }
  }
  if (r.offset !== buf.length - 4) {
    throw new LoadError(`trailing bytes after op list: ${buf.length - 4 - r.offset}`);
  }
  return { inputShape: { c, h, w }, ops };
}

/**
 * Load and checksum-verify a bundle. Refuses bundles whose metadata sidecar
 * flags a stochastic sanitizer: the attribute resampler cannot run here.
 */
export function loadPsf1(path: string): LoadedSanitizer {
  const decoded = decodePsf1(fs.readFileSync(path));
  let metadata: Record<string, unknown> | null = null;
  const metaPath = `${path}.meta.json`;
  if (fs.existsSync(metaPath)) {
    metadata = JSON.parse(fs.readFileSync(metaPath, "utf-8"));
    if (metadata && metadata["sanitizer_kind"] === "stochastic") {
      throw new LoadError(
        "bundle is flagged stochastic: its attribute resampler is not available on the edge, refusing to run the UNet stage alone",
      );
    }
  }
  return { ...decoded, metadata };
}
