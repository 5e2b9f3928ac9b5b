import { Tensor, tensor } from "./tensor.js";

export interface Conv2dParams {
  inCh: number;
  outCh: number;
  kh: number;
  kw: number;
  stride: number;
  pad: number;
  weight: Float32Array; // [out, in, kh, kw] row-major
  bias: Float32Array; // [out]
}

/** Direct convolution; accumulates in float64, stores float32. */
export function conv2d(x: Tensor, p: Conv2dParams): Tensor {
  if (x.c !== p.inCh) {
    throw new Error(`conv2d expects ${p.inCh} input channels, got ${x.c}`);
  }
  const oh = Math.floor((x.h + 2 * p.pad - p.kh) / p.stride) + 1;
  const ow = Math.floor((x.w + 2 * p.pad - p.kw) / p.stride) + 1;
  const out = tensor(p.outCh, oh, ow);
  const plane = x.h * x.w;
  for (let oc = 0; oc < p.outCh; oc++) {
    const wBase = oc * p.inCh * p.kh * p.kw;
    for (let oy = 0; oy < oh; oy++) {
      for (let ox = 0; ox < ow; ox++) {
        let acc = p.bias[oc];
        for (let ic = 0; ic < p.inCh; ic++) {
          const xBase = ic * plane;
          const wcBase = wBase + ic * p.kh * p.kw;
          for (let ky = 0; ky < p.kh; ky++) {
            const iy = oy * p.stride - p.pad + ky;
            if (iy < 0 || iy >= x.h) continue;
            const rowBase = xBase + iy * x.w;
            const wkBase = wcBase + ky * p.kw;
            for (let kx = 0; kx < p.kw; kx++) {
              const ix = ox * p.stride - p.pad + kx;
              if (ix < 0 || ix >= x.w) continue;
              acc += x.data[rowBase + ix] * p.weight[wkBase + kx];
            }
          }
        }
        out.data[(oc * oh + oy) * ow + ox] = acc;
      }
    }
  }
  return out;
}

export function leakyRelu(x: Tensor, slope: number): Tensor {
  const out = tensor(x.c, x.h, x.w);
  for (let i = 0; i < x.data.length; i++) {
    const v = x.data[i];
    out.data[i] = v >= 0 ? v : slope * v;
  }
  return out;
}

export function sigmoid(x: Tensor): Tensor {
  const out = tensor(x.c, x.h, x.w);
  for (let i = 0; i < x.data.length; i++) {
    out.data[i] = 1 / (1 + Math.exp(-x.data[i]));
  }
  return out;
}

export function maxPool2x(x: Tensor): Tensor {
  const oh = Math.floor(x.h / 2);
  const ow = Math.floor(x.w / 2);
  const out = tensor(x.c, oh, ow);
  for (let c = 0; c < x.c; c++) {
    for (let oy = 0; oy < oh; oy++) {
      for (let ox = 0; ox < ow; ox++) {
        const base = (c * x.h + oy * 2) * x.w + ox * 2;
        out.data[(c * oh + oy) * ow + ox] = Math.max(
          x.data[base],
          x.data[base + 1],
          x.data[base + x.w],
          x.data[base + x.w + 1],
        );
      }
    }
  }
  return out;
}

export function upsampleNearest2x(x: Tensor): Tensor {
  const out = tensor(x.c, x.h * 2, x.w * 2);
  for (let c = 0; c < x.c; c++) {
    for (let y = 0; y < x.h * 2; y++) {
      const srcRow = (c * x.h + (y >> 1)) * x.w;
      const dstRow = (c * x.h * 2 + y) * x.w * 2;
      for (let xPos = 0; xPos < x.w * 2; xPos++) {
        out.data[dstRow + xPos] = x.data[srcRow + (xPos >> 1)];
      }
    }
  }
  return out;
}

/** Channel concatenation: current tensor first, then the skip source. */
export function concatChannels(a: Tensor, b: Tensor): Tensor {
  if (a.h !== b.h || a.w !== b.w) {
    throw new Error(`concat shapes differ: ${a.h}x${a.w} vs ${b.h}x${b.w}`);
  }
  const out = tensor(a.c + b.c, a.h, a.w);
  out.data.set(a.data, 0);
  out.data.set(b.data, a.data.length);
  return out;
}
