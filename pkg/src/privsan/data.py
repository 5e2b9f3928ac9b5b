"""Synthetic identity/attribute image dataset.

Utility task: many-class subject identification (hard). Privacy task: a binary
attribute that is a deterministic function of the subject (easy). The attribute
is rendered through two cues: a global channel tint and a striped patch whose
orientation encodes the attribute. Because the generator owns the rendering
process, any sample can be re-rendered with its attribute overwritten, which
stands in for a pretrained attribute-editing network.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, FormatError

TDS1_MAGIC = b"TDS1"

# Seed-stream tags keep template / per-sample / assignment draws independent.
_TAG_TEMPLATE = 0
_TAG_NOISE = 1
_TAG_ASSIGN = 2
_TAG_COMMON = 3

# Rendering constants, calibrated so a small CNN finds the attribute easier to
# classify than the subject identity: subjects differ only by a low-amplitude
# deviation from a shared base pattern. The attribute cues are kept just
# strong enough to dominate that deviation; an attribute classifier then still
# picks up some identity information, which is what a retrained attacker
# exploits on weakly sanitized data.
_TINT = 0.10
_STRIPE_AMP = 0.12
_STRIPE_PERIOD = 4
_SUBJECT_AMP = 0.10
_NOISE_SIGMA = 0.12
_BRIGHTNESS_RANGE = (0.85, 1.15)


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key])))


@dataclass(frozen=True)
class Sample:
    """One image with its subject id (utility) and binary attribute (privacy).

    noise_seed is the per-sample jitter/noise seed; it is kept so the sample
    can be re-rendered with a different attribute. Samples loaded from disk
    have noise_seed None and cannot be re-rendered.
    """

    image: np.ndarray  # float32 (C, H, W), values in [0, 1]
    utility_label: int
    privacy_label: int
    noise_seed: int | None = None


@dataclass(frozen=True)
class DatasetSpec:
    num_subjects: int = 16
    attribute_map: tuple = ()  # subject -> {0, 1}; default: first 10 of 16 -> 0
    image_shape: tuple = (3, 32, 32)
    train_size: int = 4096
    test_size: int = 1024
    seed: int = 7
    prior: tuple = ()  # attribute prior implied by uniform subject frequency

    def __post_init__(self):
        k = self.num_subjects
        if k < 2:
            raise ConfigurationError(f"num_subjects must be >= 2, got {k}")
        if self.train_size < k or self.test_size < k:
            raise ConfigurationError("train_size and test_size must each be >= num_subjects")
        if len(self.image_shape) != 3 or any(s < 8 for s in self.image_shape[1:]) or self.image_shape[0] < 1:
            raise ConfigurationError(f"bad image_shape {self.image_shape}")

        amap = self.attribute_map
        if callable(amap):
            amap = tuple(int(amap(u)) for u in range(k))
        elif not amap:
            amap = tuple(0 if u < (k * 10 + 8) // 16 else 1 for u in range(k))
        else:
            amap = tuple(int(a) for a in amap)
        if len(amap) != k or any(a not in (0, 1) for a in amap):
            raise ConfigurationError("attribute_map must assign {0,1} to every subject")
        object.__setattr__(self, "attribute_map", amap)

        n1 = sum(amap)
        implied = (1.0 - n1 / k, n1 / k)
        if self.prior:
            if abs(sum(self.prior) - 1.0) > 1e-9:
                raise ConfigurationError(f"prior {self.prior} does not sum to 1")
            if max(abs(p - q) for p, q in zip(self.prior, implied)) > 1e-9:
                raise ConfigurationError(
                    f"prior {tuple(self.prior)} does not match subject frequencies {implied}"
                )
        object.__setattr__(self, "prior", implied)
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))


def _stripe_patch_bounds(spec: DatasetSpec):
    _, h, w = spec.image_shape
    r0, c0 = h // 8, w // 8
    return r0, r0 + max(4, h // 4), c0, c0 + max(4, w // 4)


def _tint_channel(spec: DatasetSpec, attribute: int) -> int:
    c = spec.image_shape[0]
    return 0 if attribute == 0 else c - 1


def cue_mask(spec: DatasetSpec) -> np.ndarray:
    """Boolean (C,H,W) mask of pixels that may change when the attribute flips.

    Covers the two tint channels entirely plus the stripe patch on all
    channels; everything outside is attribute-independent by construction.
    """
    c, h, w = spec.image_shape
    mask = np.zeros((c, h, w), dtype=bool)
    mask[_tint_channel(spec, 0)] = True
    mask[_tint_channel(spec, 1)] = True
    r0, r1, c0, c1 = _stripe_patch_bounds(spec)
    mask[:, r0:r1, c0:c1] = True
    return mask


def _block_up(a: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    return np.kron(a, np.ones((1, k, k)))[:, :h, :w]


def subject_template(spec: DatasetSpec, subject: int) -> np.ndarray:
    """Deterministic per-subject pattern: a base texture shared by all
    subjects plus a low-amplitude subject-specific deviation."""
    c, h, w = spec.image_shape
    gc = _rng(spec.seed, _TAG_COMMON, 0)
    base = 0.5 * _block_up(gc.uniform(0.0, 1.0, (c, -(-h // 8), -(-w // 8))), 8, h, w) \
        + 0.5 * _block_up(gc.uniform(0.0, 1.0, (c, -(-h // 4), -(-w // 4))), 4, h, w)
    gs = _rng(spec.seed, _TAG_TEMPLATE, subject)
    deviation = _block_up(gs.uniform(-1.0, 1.0, (c, -(-h // 4), -(-w // 4))), 4, h, w)
    return 0.20 + 0.45 * base + _SUBJECT_AMP * deviation


def _apply_attribute_cues(img: np.ndarray, attribute: int, spec: DatasetSpec) -> np.ndarray:
    out = img.copy()
    c = spec.image_shape[0]
    if c == 1:
        out[0] += _TINT if attribute == 0 else -_TINT
    else:
        out[_tint_channel(spec, attribute)] += _TINT
    r0, r1, c0, c1 = _stripe_patch_bounds(spec)
    half = _STRIPE_PERIOD // 2
    if attribute == 0:
        bands = (np.arange(r1 - r0) % _STRIPE_PERIOD < half)[None, :, None]
    else:
        bands = (np.arange(c1 - c0) % _STRIPE_PERIOD < half)[None, None, :]
    out[:, r0:r1, c0:c1] += np.where(bands, _STRIPE_AMP, -_STRIPE_AMP)
    return out


def render_with_attribute(subject: int, forced_attribute: int, spec: DatasetSpec, noise_seed: int) -> Sample:
    """Render `subject`'s template with the attribute cues forced to `forced_attribute`.

    With forced_attribute == attribute_map[subject] this is exactly the
    standard generator output for the same noise_seed; with the opposite value
    only the pixels under cue_mask(spec) change.
    """
    if not 0 <= subject < spec.num_subjects:
        raise DomainError(f"subject {subject} out of range [0, {spec.num_subjects})")
    if forced_attribute not in (0, 1):
        raise DomainError(f"forced_attribute must be 0 or 1, got {forced_attribute}")

    _, h, w = spec.image_shape
    g = _rng(spec.seed, _TAG_NOISE, noise_seed)
    max_shift = max(1, min(h, w) // 10)
    dy, dx = g.integers(-max_shift, max_shift + 1, size=2)
    brightness = g.uniform(*_BRIGHTNESS_RANGE)
    noise = g.normal(0.0, _NOISE_SIGMA, size=spec.image_shape)

    img = np.roll(subject_template(spec, subject), (int(dy), int(dx)), axis=(1, 2)) * brightness
    img = _apply_attribute_cues(img, forced_attribute, spec)
    img = np.clip(img + noise, 0.0, 1.0).astype(np.float32)
    return Sample(image=img, utility_label=int(subject), privacy_label=int(forced_attribute), noise_seed=int(noise_seed))


def _make_split(spec: DatasetSpec, split_id: int, size: int, seed_base: int) -> list:
    g = _rng(spec.seed, _TAG_ASSIGN, split_id)
    subjects = g.integers(0, spec.num_subjects, size)
    subjects[: spec.num_subjects] = g.permutation(spec.num_subjects)  # every subject appears
    return [
        render_with_attribute(int(u), spec.attribute_map[int(u)], spec, seed_base + i)
        for i, u in enumerate(subjects)
    ]


def generate_dataset(spec: DatasetSpec):
    """Generate (train, test) sample lists; deterministic given the spec."""
    train = _make_split(spec, 0, spec.train_size, 0)
    test = _make_split(spec, 1, spec.test_size, spec.train_size)
    return train, test


def empirical_prior(samples) -> np.ndarray:
    if len(samples) == 0:
        raise DomainError("empirical_prior of an empty sample list")
    labels = np.array([s.privacy_label for s in samples])
    return np.array([np.mean(labels == 0), np.mean(labels == 1)])


def stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def utility_labels(samples) -> np.ndarray:
    return np.array([s.utility_label for s in samples], dtype=np.int64)


def privacy_labels(samples) -> np.ndarray:
    return np.array([s.privacy_label for s in samples], dtype=np.int64)


# ---------------------------------------------------------------------------
# TDS1 on-disk format: metadata.json + samples.tds1 in one directory.
# Binary layout (little-endian): magic "TDS1", u32 count, u16 C, u16 H, u16 W;
# per sample: C*H*W f32 pixels row-major, u16 utility label, u8 privacy label.
# ---------------------------------------------------------------------------

def _atomic_write(path: str, payload: bytes):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(samples, out_dir: str, spec: DatasetSpec, split: str = "samples"):
    """Write a sample list as <out_dir>/metadata.json + <out_dir>/samples.tds1."""
    os.makedirs(out_dir, exist_ok=True)
    c, h, w = spec.image_shape
    buf = bytearray()
    buf += TDS1_MAGIC
    buf += struct.pack("<IHHH", len(samples), c, h, w)
    for s in samples:
        if s.image.shape != (c, h, w):
            raise DomainError(f"sample shape {s.image.shape} does not match spec {spec.image_shape}")
        buf += s.image.astype("<f4").tobytes()
        buf += struct.pack("<HB", s.utility_label, s.privacy_label)
    _atomic_write(os.path.join(out_dir, "samples.tds1"), bytes(buf))

    meta = {
        "format": "TDS1",
        "split": split,
        "count": len(samples),
        "num_subjects": spec.num_subjects,
        "attribute_map": list(spec.attribute_map),
        "prior": list(spec.prior),
        "image_shape": list(spec.image_shape),
        "train_size": spec.train_size,
        "test_size": spec.test_size,
        "seed": spec.seed,
    }
    _atomic_write(os.path.join(out_dir, "metadata.json"), json.dumps(meta, indent=2).encode())


def load_dataset(in_dir: str):
    """Read a TDS1 directory; returns (samples, spec). Loaded samples lose noise_seed."""
    with open(os.path.join(in_dir, "metadata.json"), "rb") as f:
        meta = json.loads(f.read())
    spec = DatasetSpec(
        num_subjects=meta["num_subjects"],
        attribute_map=tuple(meta["attribute_map"]),
        image_shape=tuple(meta["image_shape"]),
        train_size=meta["train_size"],
        test_size=meta["test_size"],
        seed=meta["seed"],
    )
    with open(os.path.join(in_dir, "samples.tds1"), "rb") as f:
        blob = f.read()
    if blob[:4] != TDS1_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {TDS1_MAGIC!r}")
    if len(blob) < 14:
        raise FormatError("truncated header")
    count, c, h, w = struct.unpack_from("<IHHH", blob, 4)
    if (c, h, w) != spec.image_shape:
        raise FormatError(f"image_shape {(c, h, w)} does not match metadata {spec.image_shape}")
    rec = c * h * w * 4 + 3
    if len(blob) != 14 + count * rec:
        raise FormatError(f"payload length {len(blob) - 14} != count {count} * record {rec}")
    samples = []
    off = 14
    npix = c * h * w
    for _ in range(count):
        img = np.frombuffer(blob, dtype="<f4", count=npix, offset=off).reshape(c, h, w).copy()
        u, p = struct.unpack_from("<HB", blob, off + npix * 4)
        samples.append(Sample(image=img, utility_label=u, privacy_label=p))
        off += rec
    return samples, spec
