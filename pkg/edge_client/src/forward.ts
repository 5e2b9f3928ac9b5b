import { concatChannels, conv2d, leakyRelu, maxPool2x, sigmoid, upsampleNearest2x } from "./ops.js";
import { LoadedSanitizer, Op } from "./psf1.js";
import { Tensor } from "./tensor.js";

/** Execute the op list; op outputs are retained so concat_skip can reference them. */
export function forward(model: LoadedSanitizer, input: Tensor): Tensor {
  const { c, h, w } = model.inputShape;
  if (input.c !== c || input.h !== h || input.w !== w) {
    throw new Error(`input shape (${input.c}, ${input.h}, ${input.w}) does not match model (${c}, ${h}, ${w})`);
  }
  const outputs: Tensor[] = [];
  let cur = input;
  for (const op of model.ops) {
    cur = applyOp(op, cur, outputs);
    outputs.push(cur);
  }
  return cur;
}

function applyOp(op: Op, cur: Tensor, outputs: Tensor[]): Tensor {
  switch (op.kind) {
    case "conv2d":
      return conv2d(cur, op.params);
    case "leaky_relu":
      return leakyRelu(cur, op.slope);
    case "maxpool2x":
      return maxPool2x(cur);
    case "upsample_nearest2x":
      return upsampleNearest2x(cur);
    case "concat_skip":
      return concatChannels(cur, outputs[op.sourceOpIndex]);
    case "sigmoid":
      return sigmoid(cur);
  }
}
