/** Channel-first float32 image tensor. Data is row-major within each channel. */
export interface Tensor {
  data: Float32Array;
  c: number;
  h: number;
  w: number;
}

export function tensor(c: number, h: number, w: number): Tensor {
  return { data: new Float32Array(c * h * w), c, h, w };
}

export function fromBuffer(buf: Buffer, c: number, h: number, w: number): Tensor {
  const n = c * h * w;
  if (buf.length !== n * 4) {
    throw new Error(`pixel buffer has ${buf.length} bytes, expected ${n * 4}`);
  }
  const data = new Float32Array(n);
  for (let i = 0; i < n; i++) data[i] = buf.readFloatLE(i * 4);
  return { data, c, h, w };
}

export function toBuffer(t: Tensor): Buffer {
  const buf = Buffer.alloc(t.data.length * 4);
  for (let i = 0; i < t.data.length; i++) buf.writeFloatLE(t.data[i], i * 4);
  return buf;
}
