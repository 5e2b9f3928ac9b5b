import { crc32 } from "../src/crc32.js";
import { Op } from "../src/psf1.js";

/** Test-side PSF1 encoder for handcrafted bundles. */
export function buildPsf1(shape: { c: number; h: number; w: number }, ops: Op[]): Buffer {
  const parts: Buffer[] = [];
  const header = Buffer.alloc(14);
  header.writeUInt32LE(1, 0);
  header.writeUInt16LE(shape.c, 4);
  header.writeUInt16LE(shape.h, 6);
  header.writeUInt16LE(shape.w, 8);
  header.writeUInt32LE(ops.length, 10);
  parts.push(header);
  for (const op of ops) {
    switch (op.kind) {
      case "conv2d": {
        const p = op.params;
        const head = Buffer.alloc(13);
        head.writeUInt8(0, 0);
        head.writeUInt16LE(p.inCh, 1);
        head.writeUInt16LE(p.outCh, 3);
        head.writeUInt16LE(p.kh, 5);
        head.writeUInt16LE(p.kw, 7);
        head.writeUInt16LE(p.stride, 9);
        head.writeUInt16LE(p.pad, 11);
        const blob = Buffer.alloc((p.weight.length + p.bias.length) * 4);
        p.weight.forEach((v, i) => blob.writeFloatLE(v, i * 4));
        p.bias.forEach((v, i) => blob.writeFloatLE(v, (p.weight.length + i) * 4));
        parts.push(head, blob);
        break;
      }
      case "leaky_relu": {
        const b = Buffer.alloc(5);
        b.writeUInt8(1, 0);
        b.writeFloatLE(op.slope, 1);
        parts.push(b);
        break;
      }
      case "maxpool2x":
        parts.push(Buffer.from([2]));
        break;
      case "upsample_nearest2x":
        parts.push(Buffer.from([3]));
        break;
      case "concat_skip": {
        const b = Buffer.alloc(5);
        b.writeUInt8(4, 0);
        b.writeUInt32LE(op.sourceOpIndex, 1);
        parts.push(b);
        break;
      }
      case "sigmoid":
        parts.push(Buffer.from([5]));
        break;
    }
  }
  const body = Buffer.concat(parts);
  const trailer = Buffer.alloc(4);
  trailer.writeUInt32LE(crc32(body), 0);
  return Buffer.concat([Buffer.from("PSF1", "latin1"), body, trailer]);
}

export function identityConv(channels: number): Op {
  const weight = new Float32Array(channels * channels);
  for (let i = 0; i < channels; i++) weight[i * channels + i] = 1;
  return {
    kind: "conv2d",
    params: { inCh: channels, outCh: channels, kh: 1, kw: 1, stride: 1, pad: 0, weight, bias: new Float32Array(channels) },
  };
}
