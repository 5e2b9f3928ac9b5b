"""PSF1 sanitizer bundle format: a self-describing op list with weights.

Layout (all little-endian):
  magic "PSF1" | u32 version=1 | u16 C, H, W | u32 op_count | ops... | u32 crc32

Per op: u8 kind, then a kind-specific body:
  0 conv2d           u16 in_ch,out_ch,kh,kw,stride,pad; f32 weights [out,in,kh,kw]
                     row-major; f32 bias[out]
  1 leaky_relu       f32 slope
  2 maxpool2x        (reserved, no body)
  3 upsample_nearest2x  (no body)
  4 concat_skip      u32 source_op_index; concatenates the current tensor
                     (first) with that op's recorded output (second) on the
                     channel axis
  5 sigmoid          (no body)

The trailing crc32 covers every byte after the magic. Training provenance
(alpha, mode, seed, timestamp, sanitizer kind) goes into a JSON sidecar at
"<path>.meta.json" so the binary stays exactly this layout.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import _atomic_write
from .errors import ConfigurationError, FormatError
from .models import DETERMINISTIC, LEAKY_SLOPE, SanitizerModel, UNetS

PSF1_MAGIC = b"PSF1"
PSF1_VERSION = 1

KIND_CONV2D = 0
KIND_LEAKY_RELU = 1
KIND_MAXPOOL = 2
KIND_UPSAMPLE = 3
KIND_CONCAT = 4
KIND_SIGMOID = 5

_MAX_OPS = 4096


@dataclass
class Conv2dOp:
    kind = KIND_CONV2D
    in_ch: int
    out_ch: int
    kh: int
    kw: int
    stride: int
    pad: int
    weight: np.ndarray  # float32 [out, in, kh, kw]
    bias: np.ndarray  # float32 [out]


@dataclass
class LeakyReluOp:
    kind = KIND_LEAKY_RELU
    slope: float = LEAKY_SLOPE


@dataclass
class MaxPoolOp:
    kind = KIND_MAXPOOL


@dataclass
class UpsampleOp:
    kind = KIND_UPSAMPLE


@dataclass
class ConcatSkipOp:
    kind = KIND_CONCAT
    source_op_index: int = 0


@dataclass
class SigmoidOp:
    kind = KIND_SIGMOID


@dataclass
class SanitizerBundle:
    format_version: int
    input_shape: tuple
    ops: list
    metadata: dict = field(default_factory=dict)


class OpGraphNet(nn.Module):
    """Executes a PSF1 op list; forward-equivalent to the network it was built from."""

    def __init__(self, ops, input_shape):
        super().__init__()
        self.ops = ops
        self.input_shape = tuple(input_shape)
        self._params = nn.ParameterList()
        for op in ops:
            if isinstance(op, Conv2dOp):
                self._params.append(nn.Parameter(torch.from_numpy(op.weight.copy())))
                self._params.append(nn.Parameter(torch.from_numpy(op.bias.copy())))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outputs = []
        cur = x
        pi = 0
        for op in self.ops:
            if isinstance(op, Conv2dOp):
                cur = F.conv2d(cur, self._params[pi], self._params[pi + 1], stride=op.stride, padding=op.pad)
                pi += 2
            elif isinstance(op, LeakyReluOp):
                cur = F.leaky_relu(cur, op.slope)
            elif isinstance(op, MaxPoolOp):
                cur = F.max_pool2d(cur, 2)
            elif isinstance(op, UpsampleOp):
                cur = F.interpolate(cur, scale_factor=2, mode="nearest")
            elif isinstance(op, ConcatSkipOp):
                cur = torch.cat([cur, outputs[op.source_op_index]], dim=1)
            elif isinstance(op, SigmoidOp):
                cur = torch.sigmoid(cur)
            else:
                raise ConfigurationError(f"unknown op {op!r}")
            outputs.append(cur)
        return cur


def _conv_op(conv: nn.Conv2d) -> Conv2dOp:
    return Conv2dOp(
        in_ch=conv.in_channels,
        out_ch=conv.out_channels,
        kh=conv.kernel_size[0],
        kw=conv.kernel_size[1],
        stride=conv.stride[0],
        pad=conv.padding[0],
        weight=conv.weight.detach().cpu().numpy().astype("<f4"),
        bias=conv.bias.detach().cpu().numpy().astype("<f4"),
    )


def unet_to_ops(unet: UNetS) -> list:
    c = unet.convs
    lrelu = lambda: LeakyReluOp(LEAKY_SLOPE)
    return [
        _conv_op(c["enc1"]), lrelu(),          # ops 0-1, skip source for up2
        _conv_op(c["down1"]), lrelu(),         # ops 2-3, skip source for up1
        _conv_op(c["down2"]), lrelu(),         # ops 4-5
        _conv_op(c["mid"]), lrelu(),           # ops 6-7
        UpsampleOp(), ConcatSkipOp(3),         # ops 8-9
        _conv_op(c["up1"]), lrelu(),           # ops 10-11
        UpsampleOp(), ConcatSkipOp(1),         # ops 12-13
        _conv_op(c["up2"]), lrelu(),           # ops 14-15
        _conv_op(c["out"]), SigmoidOp(),       # ops 16-17
    ]


def model_ops(model: SanitizerModel) -> list:
    if isinstance(model.unet, UNetS):
        return unet_to_ops(model.unet)
    if isinstance(model.unet, OpGraphNet):
        ops = []
        pi = 0
        for op in model.unet.ops:
            if isinstance(op, Conv2dOp):
                w = model.unet._params[pi].detach().cpu().numpy().astype("<f4")
                b = model.unet._params[pi + 1].detach().cpu().numpy().astype("<f4")
                ops.append(Conv2dOp(op.in_ch, op.out_ch, op.kh, op.kw, op.stride, op.pad, w, b))
                pi += 2
            else:
                ops.append(op)
        return ops
    raise ConfigurationError(f"cannot export sanitizer backed by {type(model.unet).__name__}")


def encode_ops(input_shape, ops) -> bytes:
    c, h, w = input_shape
    body = bytearray()
    body += struct.pack("<IHHH", PSF1_VERSION, c, h, w)
    body += struct.pack("<I", len(ops))
    for op in ops:
        body += struct.pack("<B", op.kind)
        if isinstance(op, Conv2dOp):
            body += struct.pack("<HHHHHH", op.in_ch, op.out_ch, op.kh, op.kw, op.stride, op.pad)
            if op.weight.shape != (op.out_ch, op.in_ch, op.kh, op.kw) or op.bias.shape != (op.out_ch,):
                raise ConfigurationError(f"conv blob shape mismatch: {op.weight.shape}, {op.bias.shape}")
            body += op.weight.astype("<f4").tobytes()
            body += op.bias.astype("<f4").tobytes()
        elif isinstance(op, LeakyReluOp):
            body += struct.pack("<f", op.slope)
        elif isinstance(op, ConcatSkipOp):
            body += struct.pack("<I", op.source_op_index)
    return PSF1_MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))


class _Reader:
    def __init__(self, blob: bytes, offset: int):
        self.blob = blob
        self.off = offset

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.blob):
            raise FormatError(f"truncated file while reading {what}")
        vals = struct.unpack_from(fmt, self.blob, self.off)
        self.off += size
        return vals

    def take_f32(self, count: int, what: str) -> np.ndarray:
        size = count * 4
        if self.off + size > len(self.blob):
            raise FormatError(f"truncated file while reading {what}")
        arr = np.frombuffer(self.blob, dtype="<f4", count=count, offset=self.off).copy()
        self.off += size
        return arr


def decode_bundle(blob: bytes) -> SanitizerBundle:
    if len(blob) < 4 or blob[:4] != PSF1_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {PSF1_MAGIC!r}")
    if len(blob) < 4 + 14 + 4:
        raise FormatError("truncated file: too short for header and checksum")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[4:-4])
    if stored_crc != actual_crc:
        raise FormatError(f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")

    r = _Reader(blob[:-4], 4)
    version, c, h, w = r.take("<IHHH", "version/input_shape")
    if version != PSF1_VERSION:
        raise FormatError(f"unsupported version {version}, expected {PSF1_VERSION}")
    if c < 1 or h < 1 or w < 1:
        raise FormatError(f"bad input_shape {(c, h, w)}")
    (op_count,) = r.take("<I", "op_count")
    if op_count > _MAX_OPS:
        raise FormatError(f"op_count {op_count} exceeds limit {_MAX_OPS}")
    ops = []
    for i in range(op_count):
        (kind,) = r.take("<B", f"op[{i}] kind")
        if kind == KIND_CONV2D:
            in_ch, out_ch, kh, kw, stride, pad = r.take("<HHHHHH", f"op[{i}] conv2d header")
            if min(in_ch, out_ch, kh, kw, stride) < 1:
                raise FormatError(f"op[{i}] conv2d header has non-positive field")
            weight = r.take_f32(out_ch * in_ch * kh * kw, f"op[{i}] conv2d weights").reshape(out_ch, in_ch, kh, kw)
            bias = r.take_f32(out_ch, f"op[{i}] conv2d bias")
            ops.append(Conv2dOp(in_ch, out_ch, kh, kw, stride, pad, weight, bias))
        elif kind == KIND_LEAKY_RELU:
            (slope,) = r.take("<f", f"op[{i}] leaky_relu slope")
            ops.append(LeakyReluOp(slope))
        elif kind == KIND_MAXPOOL:
            ops.append(MaxPoolOp())
        elif kind == KIND_UPSAMPLE:
            ops.append(UpsampleOp())
        elif kind == KIND_CONCAT:
            (src,) = r.take("<I", f"op[{i}] concat source_op_index")
            if src >= i:
                raise FormatError(f"op[{i}] concat source_op_index {src} is not an earlier op")
            ops.append(ConcatSkipOp(src))
        elif kind == KIND_SIGMOID:
            ops.append(SigmoidOp())
        else:
            raise FormatError(f"op[{i}] has unknown kind {kind}")
    if r.off != len(blob) - 4:
        raise FormatError(f"trailing bytes after op list: {len(blob) - 4 - r.off}")
    return SanitizerBundle(format_version=version, input_shape=(c, h, w), ops=ops)


def export_sanitizer(model: SanitizerModel, path: str, metadata: dict | None = None) -> SanitizerBundle:
    """Write the model's UNet stage as a PSF1 file plus a metadata sidecar.

    Stochastic sanitizers export only their UNet; the attribute resampler
    cannot leave this package. The sidecar's sanitizer_kind records that.
    """
    ops = model_ops(model)
    blob = encode_ops(model.input_shape, ops)
    meta = {
        "format": "PSF1",
        "version": PSF1_VERSION,
        "sanitizer_kind": model.kind,
        "alpha": None,
        "mode": None,
        "training_seed": None,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    meta.update(metadata or {})
    _atomic_write(path, blob)
    _atomic_write(path + ".meta.json", json.dumps(meta, indent=2).encode())
    return SanitizerBundle(PSF1_VERSION, model.input_shape, ops, meta)


def import_sanitizer(path: str, expect_shape=None) -> SanitizerModel:
    """Load a PSF1 file into a runnable deterministic sanitizer.

    expect_shape, when given, is checked against the bundle's input_shape here
    rather than failing at the first forward pass.
    """
    with open(path, "rb") as f:
        blob = f.read()
    bundle = decode_bundle(blob)
    if expect_shape is not None and tuple(expect_shape) != bundle.input_shape:
        raise FormatError(f"input_shape {bundle.input_shape} does not match expected {tuple(expect_shape)}")
    model = SanitizerModel(DETERMINISTIC, OpGraphNet(bundle.ops, bundle.input_shape), bundle.input_shape)
    meta_path = path + ".meta.json"
    if os.path.exists(meta_path):
        with open(meta_path, "rb") as f:
            model.metadata = json.loads(f.read())
    return model
