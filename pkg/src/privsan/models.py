"""Networks: utility/privacy classifiers and the deterministic/stochastic sanitizers.

Architectures are fixed (no normalization layers) so that exported sanitizer
bundles can be executed by a runtime with no framework support. The classifier
splits into a convolutional backbone and a final dense head; only the head is
retrainable in the adversarial game and in attack retraining.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetSpec, Sample, render_with_attribute, _rng
from .errors import ConfigurationError, DomainError

LEAKY_SLOPE = 0.2

DETERMINISTIC = "deterministic"
STOCHASTIC = "stochastic"


def _seeded_build(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed & 0x7FFFFFFF)
        return build()


def to_tensor(x) -> torch.Tensor:
    """Float tensor view; preserves an existing floating dtype (float64 stays
    float64 so closed-form checks keep full precision)."""
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.float()
    arr = np.asarray(x)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32, copy=False)
    if not arr.flags.c_contiguous:  # negative strides / transposed views
        arr = np.ascontiguousarray(arr)
    if not arr.flags.writeable:  # e.g. np.broadcast_to views
        arr = arr.copy()
    return torch.from_numpy(arr)


def hash_parameters(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class Classifier(nn.Module):
    """conv(C->16)+pool, conv(16->32)+pool, dense->64 (backbone), dense->classes."""

    def __init__(self, in_channels: int, image_hw, num_classes: int, seed: int = 0):
        super().__init__()
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.image_hw = tuple(image_hw)
        self.frozen_backbone = False
        h, w = self.image_hw
        flat = 32 * (h // 4) * (w // 4)

        def build():
            features = nn.Sequential(
                nn.Conv2d(in_channels, 16, 3, padding=1),
                nn.ReLU(),
                nn.MaxPool2d(2),
                nn.Conv2d(16, 32, 3, padding=1),
                nn.ReLU(),
                nn.MaxPool2d(2),
                nn.Flatten(),
                nn.Linear(flat, 64),
                nn.ReLU(),
            )
            head = nn.Linear(64, num_classes)
            return features, head

        self.features, self.head = _seeded_build(seed, build)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=-1)


class UNetS(nn.Module):
    """Small image-to-image UNet; maps (C,H,W) in [0,1] to the same space.

    Topology (no normalization layers):
      enc1 3x3 C->16; down1 3x3 /2 16->32; down2 3x3 /2 32->64; mid 3x3 64->64;
      up1: nearest x2, concat(down1) -> 3x3 96->32; up2: nearest x2,
      concat(enc1) -> 3x3 48->16; out 1x1 16->C + sigmoid. Leaky-ReLU 0.2
      after every conv except the output. Concatenation puts the upsampled
      tensor first, then the skip source.
    """

    def __init__(self, in_channels: int, seed: int = 0):
        super().__init__()
        self.in_channels = in_channels

        def build():
            return nn.ModuleDict(
                {
                    "enc1": nn.Conv2d(in_channels, 16, 3, padding=1),
                    "down1": nn.Conv2d(16, 32, 3, stride=2, padding=1),
                    "down2": nn.Conv2d(32, 64, 3, stride=2, padding=1),
                    "mid": nn.Conv2d(64, 64, 3, padding=1),
                    "up1": nn.Conv2d(96, 32, 3, padding=1),
                    "up2": nn.Conv2d(48, 16, 3, padding=1),
                    "out": nn.Conv2d(16, in_channels, 1),
                }
            )

        self.convs = _seeded_build(seed, build)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = self.convs
        e1 = F.leaky_relu(c["enc1"](x), LEAKY_SLOPE)
        d1 = F.leaky_relu(c["down1"](e1), LEAKY_SLOPE)
        d2 = F.leaky_relu(c["down2"](d1), LEAKY_SLOPE)
        m = F.leaky_relu(c["mid"](d2), LEAKY_SLOPE)
        u1 = F.leaky_relu(c["up1"](torch.cat([F.interpolate(m, scale_factor=2, mode="nearest"), d1], dim=1)), LEAKY_SLOPE)
        u2 = F.leaky_relu(c["up2"](torch.cat([F.interpolate(u1, scale_factor=2, mode="nearest"), e1], dim=1)), LEAKY_SLOPE)
        return torch.sigmoid(c["out"](u2))


class SanitizerModel:
    """A sanitizer: a UNet, plus (stochastic kind only) the attribute resampler.

    The stochastic kind first re-renders the input with its attribute drawn
    from the dataset prior (which requires the generator spec and the sample's
    noise_seed), then applies the UNet.
    """

    def __init__(
        self,
        kind: str,
        unet: nn.Module,
        input_shape,
        generator_spec: DatasetSpec | None = None,
        resample_seed_policy: str = "independent",
        resample_seed: int = 0,
    ):
        if kind not in (DETERMINISTIC, STOCHASTIC):
            raise ConfigurationError(f"unknown sanitizer kind {kind!r}")
        if resample_seed_policy not in ("independent", "per_sample"):
            raise ConfigurationError(f"unknown resample_seed_policy {resample_seed_policy!r}")
        c, h, w = input_shape
        self.kind = kind
        self.unet = unet
        self.input_shape = (c, h, w)
        self.generator_spec = generator_spec
        self.resample_seed_policy = resample_seed_policy
        self.resample_seed = resample_seed

    def _check_shape(self, x: torch.Tensor):
        if tuple(x.shape[-3:]) != self.input_shape:
            raise DomainError(f"input shape {tuple(x.shape)} does not match {self.input_shape}")

    def forward_images(self, images) -> torch.Tensor:
        x = to_tensor(images)
        self._check_shape(x)
        batched = x.dim() == 4
        out = self.unet(x if batched else x.unsqueeze(0))
        return out if batched else out.squeeze(0)

    def draw_attribute(self, prior, rng: np.random.Generator, sample: Sample | None = None) -> int:
        if self.resample_seed_policy == "per_sample":
            if sample is None or sample.noise_seed is None:
                raise ConfigurationError("per_sample resampling needs a generated sample with noise_seed")
            rng = _rng(self.resample_seed, sample.noise_seed)
        return int(rng.random() < float(prior[1]))

    def resample(self, sample: Sample, prior, rng: np.random.Generator) -> np.ndarray:
        if self.generator_spec is None:
            raise ConfigurationError("stochastic sanitizer has no generator spec")
        if sample.noise_seed is None:
            raise ConfigurationError("sample has no noise_seed; cannot re-render its attribute")
        a = self.draw_attribute(prior, rng, sample)
        return render_with_attribute(sample.utility_label, a, self.generator_spec, sample.noise_seed).image


def make_sanitizer(kind: str, spec: DatasetSpec, seed: int = 0, resample_seed_policy: str = "independent") -> SanitizerModel:
    _, h, w = spec.image_shape
    if h % 4 or w % 4:
        raise ConfigurationError(f"UNet needs H,W divisible by 4, got {(h, w)}")
    unet = UNetS(spec.image_shape[0], seed=seed)
    return SanitizerModel(
        kind,
        unet,
        spec.image_shape,
        generator_spec=spec if kind == STOCHASTIC else None,
        resample_seed_policy=resample_seed_policy,
        resample_seed=seed,
    )


def classifier_forward(model: Classifier, image) -> torch.Tensor:
    """Posterior probabilities for one (C,H,W) image or an (N,C,H,W) batch."""
    x = to_tensor(image)
    expect = (model.in_channels,) + model.image_hw
    if tuple(x.shape[-3:]) != expect or x.dim() not in (3, 4):
        raise DomainError(f"image shape {tuple(x.shape)} does not match {expect}")
    batched = x.dim() == 4
    probs = model(x if batched else x.unsqueeze(0))
    return probs if batched else probs.squeeze(0)


def sanitize_deterministic(model: SanitizerModel, image) -> torch.Tensor:
    if model.kind != DETERMINISTIC:
        raise ConfigurationError(f"sanitize_deterministic on a {model.kind} model")
    return model.forward_images(image)


def sanitize_stochastic(model: SanitizerModel, sample: Sample, prior, rng: np.random.Generator) -> torch.Tensor:
    if model.kind != STOCHASTIC:
        raise ConfigurationError(f"sanitize_stochastic on a {model.kind} model")
    return model.forward_images(model.resample(sample, prior, rng))


def clone_final_layer(model: Classifier, seed: int = 1) -> Classifier:
    """Fresh-head copy sharing the (frozen) backbone parameters with `model`."""
    clone = Classifier(model.in_channels, model.image_hw, model.num_classes, seed=seed)
    clone.features = model.features
    clone.frozen_backbone = True
    return clone
