"""Training loops: classifier pretraining and the three sanitizer modalities.

plug_and_play   only the UNet trains, against frozen pretrained classifiers.
adversarial     the UNet and the privacy classifier's final layer alternate,
                one phase each per alternation_period epochs; the privacy head
                trains to stay accurate on both raw and sanitized data.
collaborative   the UNet trains while the utility classifier's final layer
                co-adapts to sanitized data with plain cross-entropy.

Every trainer logs per-iteration losses and never mutates the classifiers it
is handed: adversarial/collaborative return head-retrained clones that share
the frozen backbone.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .data import stack_images, utility_labels, privacy_labels
from .errors import ConfigurationError, TrainingError
from .losses import LossConfig, privacy_loss, sanitization_loss
from .models import Classifier, SanitizerModel, clone_final_layer, STOCHASTIC

MODES = ("plug_and_play", "adversarial", "collaborative")


def derive_seed(*parts) -> int:
    h = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:4], "little")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "plug_and_play"
    alpha: float = 0.5
    epochs: int = 15
    batch_size: int = 64
    lr_sanitizer: float = 1e-3
    lr_privacy_head: float = 1e-3
    lr_utility_head: float = 1e-3  # 0 reduces collaborative to plug-and-play
    lr_pretrain: float = 1e-3
    privacy_head_weight_decay: float = 0.0
    alternation_period: int = 1
    seed: int = 0
    epsilon_clamp: float = 1e-7

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alternation_period < 1:
            raise ConfigurationError("alternation_period must be >= 1")
        if min(self.lr_sanitizer, self.lr_privacy_head, self.lr_pretrain) <= 0 or self.lr_utility_head < 0:
            raise ConfigurationError("learning rates must be positive (lr_utility_head may be 0)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, epsilon_clamp=self.epsilon_clamp)


@dataclass(frozen=True)
class LogRecord:
    iteration: int
    loss_s: float | None
    loss_p: float | None
    component: str


class TrainLog:
    """Append-only per-iteration loss log; iterations strictly increase."""

    def __init__(self):
        self.records: list[LogRecord] = []

    def append(self, iteration: int, loss_s=None, loss_p=None, component: str = "sanitizer"):
        if self.records and iteration <= self.records[-1].iteration:
            raise ConfigurationError("log iterations must strictly increase")
        for v in (loss_s, loss_p):
            if v is not None and not math.isfinite(v):
                raise TrainingError(f"non-finite loss {v} at iteration {iteration}", log=self)
        self.records.append(LogRecord(iteration, loss_s, loss_p, component))

    def values(self, which: str) -> np.ndarray:
        vals = [getattr(r, which) for r in self.records if getattr(r, which) is not None]
        return np.array(vals, dtype=np.float64)

    def components(self):
        return [r.component for r in self.records]

    def to_csv(self, path: str):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "loss_s", "loss_p", "active_component"])
            for r in self.records:
                w.writerow([r.iteration, "" if r.loss_s is None else repr(r.loss_s),
                            "" if r.loss_p is None else repr(r.loss_p), r.component])

    @classmethod
    def from_csv(cls, path: str) -> "TrainLog":
        log = cls()
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        for it, ls, lp, comp in rows[1:]:
            log.append(int(it), float(ls) if ls else None, float(lp) if lp else None, comp)
        return log


@contextmanager
def frozen(*modules: nn.Module):
    saved = []
    for m in modules:
        for p in m.parameters():
            saved.append((p, p.requires_grad))
            p.requires_grad_(False)
    try:
        yield
    finally:
        # Reverse order: shared parameters may be saved twice (cloned heads
        # share their backbone) and must restore the oldest flag last.
        for p, rg in reversed(saved):
            p.requires_grad_(rg)


def _batches(n: int, batch_size: int, g: torch.Generator):
    perm = torch.randperm(n, generator=g)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _check_finite(loss: torch.Tensor, log: TrainLog):
    if not torch.isfinite(loss):
        raise TrainingError(f"training diverged: loss {loss.item()}", log=log)


def _forward_chunks(model: nn.Module, images: torch.Tensor, chunk: int = 512) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), chunk):
            outs.append(model(images[i : i + chunk]))
    return torch.cat(outs)


def accuracy(model: Classifier, images, labels) -> float:
    probs = _forward_chunks(model, torch.as_tensor(np.asarray(images, dtype=np.float32)))
    pred = probs.argmax(-1).numpy()
    return float(np.mean(pred == np.asarray(labels)))


def _sanitizer_inputs(sanitizer: SanitizerModel, images: torch.Tensor, samples, idx, prior, rng) -> torch.Tensor:
    """Raw batch for a deterministic sanitizer; attribute-resampled renders for a stochastic one."""
    if sanitizer.kind != STOCHASTIC:
        return images[idx]
    arr = np.stack([sanitizer.resample(samples[int(i)], prior, rng) for i in idx])
    return torch.from_numpy(arr)


def pretrain_classifiers(train_samples, spec, cfg: TrainConfig):
    """Train fresh utility and privacy classifiers on raw data with cross-entropy."""
    c, h, w = spec.image_shape
    utility = Classifier(c, (h, w), spec.num_subjects, seed=derive_seed(cfg.seed, "utility-init"))
    privacy = Classifier(c, (h, w), 2, seed=derive_seed(cfg.seed, "privacy-init"))
    images = torch.from_numpy(stack_images(train_samples))
    for model, labels, tag in (
        (utility, utility_labels(train_samples), "utility"),
        (privacy, privacy_labels(train_samples), "privacy"),
    ):
        log = TrainLog()
        train_classifier_ce(model, images, torch.from_numpy(labels), cfg.epochs, cfg.lr_pretrain,
                            cfg.batch_size, derive_seed(cfg.seed, tag, "shuffle"), log=log)
        model.pretrain_accuracy = accuracy(model, images, labels)
    return utility, privacy


def train_classifier_ce(model: Classifier, images: torch.Tensor, labels: torch.Tensor, epochs: int,
                        lr: float, batch_size: int, shuffle_seed: int, head_only: bool = False,
                        log: TrainLog | None = None):
    """Cross-entropy training; with head_only the backbone stays frozen."""
    log = log if log is not None else TrainLog()
    params = model.head.parameters() if head_only else model.parameters()
    opt = torch.optim.Adam(params, lr=lr)
    g = torch.Generator().manual_seed(shuffle_seed & 0x7FFFFFFF)
    it = 0
    ctx = frozen(model.features) if head_only else _null_ctx()
    with ctx:
        for _ in range(epochs):
            for idx in _batches(len(images), batch_size, g):
                loss = torch.nn.functional.cross_entropy(model.logits(images[idx]), labels[idx])
                _check_finite(loss, log)
                opt.zero_grad()
                loss.backward()
                opt.step()
                log.append(it, loss_s=None, loss_p=float(loss.item()), component="classifier")
                it += 1
    return log


@contextmanager
def _null_ctx():
    yield


def train_plug_and_play(sanitizer: SanitizerModel, utility: Classifier, privacy: Classifier,
                        prior, train_samples, cfg: TrainConfig):
    """Gradient-descend the UNet on the sanitization loss; classifiers frozen."""
    images = torch.from_numpy(stack_images(train_samples))
    lcfg = cfg.loss_config()
    log = TrainLog()
    opt = torch.optim.Adam(sanitizer.unet.parameters(), lr=cfg.lr_sanitizer)
    g = torch.Generator().manual_seed(derive_seed(cfg.seed, "shuffle") & 0x7FFFFFFF)
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "resample")))
    u_raw_all = _forward_chunks(utility, images)
    it = 0
    with frozen(utility, privacy):
        for _ in range(cfg.epochs):
            for idx in _batches(len(images), cfg.batch_size, g):
                x_in = _sanitizer_inputs(sanitizer, images, train_samples, idx, prior, rng)
                x_s = sanitizer.unet(x_in)
                loss = sanitization_loss(u_raw_all[idx], utility(x_s), prior, privacy(x_s), lcfg)
                _check_finite(loss, log)
                opt.zero_grad()
                loss.backward()
                opt.step()
                log.append(it, loss_s=float(loss.item()), component="sanitizer")
                it += 1
    return sanitizer, log


def _phase(epoch: int, period: int) -> str:
    return "sanitizer" if (epoch // period) % 2 == 0 else "privacy"


def train_adversarial(sanitizer: SanitizerModel, utility: Classifier, privacy: Classifier,
                      prior, train_samples, cfg: TrainConfig):
    """Alternate UNet epochs (sanitization loss) with privacy-head epochs
    (raw + sanitized cross-entropy). Returns (sanitizer, retrained privacy
    classifier, log); the passed-in privacy classifier is left untouched."""
    images = torch.from_numpy(stack_images(train_samples))
    y = torch.from_numpy(np.eye(2, dtype=np.float32)[privacy_labels(train_samples)])
    lcfg = cfg.loss_config()
    log = TrainLog()

    adv_privacy = clone_final_layer(privacy, seed=derive_seed(cfg.seed, "adv-head"))
    adv_privacy.head.load_state_dict(copy.deepcopy(privacy.head.state_dict()))

    opt_s = torch.optim.Adam(sanitizer.unet.parameters(), lr=cfg.lr_sanitizer)
    opt_p = torch.optim.AdamW(adv_privacy.head.parameters(), lr=cfg.lr_privacy_head,
                              weight_decay=cfg.privacy_head_weight_decay)
    g = torch.Generator().manual_seed(derive_seed(cfg.seed, "shuffle") & 0x7FFFFFFF)
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "resample")))
    u_raw_all = _forward_chunks(utility, images)

    it = 0
    with frozen(utility, privacy, adv_privacy.features):
        for epoch in range(cfg.epochs):
            phase = _phase(epoch, cfg.alternation_period)
            for idx in _batches(len(images), cfg.batch_size, g):
                x_in = _sanitizer_inputs(sanitizer, images, train_samples, idx, prior, rng)
                if phase == "sanitizer":
                    with frozen(adv_privacy):
                        x_s = sanitizer.unet(x_in)
                        loss = sanitization_loss(u_raw_all[idx], utility(x_s), prior, adv_privacy(x_s), lcfg)
                        _check_finite(loss, log)
                        opt_s.zero_grad()
                        loss.backward()
                        opt_s.step()
                    log.append(it, loss_s=float(loss.item()), component="sanitizer")
                else:
                    with torch.no_grad():
                        x_s = sanitizer.unet(x_in)
                    loss = privacy_loss(y[idx], adv_privacy(images[idx]), adv_privacy(x_s), cfg.epsilon_clamp)
                    _check_finite(loss, log)
                    opt_p.zero_grad()
                    loss.backward()
                    opt_p.step()
                    log.append(it, loss_p=float(loss.item()), component="privacy")
                it += 1
    return sanitizer, adv_privacy, log


def train_collaborative(sanitizer: SanitizerModel, utility: Classifier, privacy: Classifier,
                        prior, train_samples, cfg: TrainConfig):
    """UNet trains on the sanitization loss while a warm-started copy of the
    utility head learns the sanitized data with cross-entropy. Returns
    (sanitizer, co-adapted utility classifier, log)."""
    images = torch.from_numpy(stack_images(train_samples))
    labels = torch.from_numpy(utility_labels(train_samples))
    lcfg = cfg.loss_config()
    log = TrainLog()

    co_utility = clone_final_layer(utility, seed=derive_seed(cfg.seed, "co-head"))
    co_utility.head.load_state_dict(copy.deepcopy(utility.head.state_dict()))

    opt_s = torch.optim.Adam(sanitizer.unet.parameters(), lr=cfg.lr_sanitizer)
    opt_u = torch.optim.Adam(co_utility.head.parameters(), lr=cfg.lr_utility_head) if cfg.lr_utility_head > 0 else None
    g = torch.Generator().manual_seed(derive_seed(cfg.seed, "shuffle") & 0x7FFFFFFF)
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "resample")))

    it = 0
    with frozen(utility, privacy, co_utility.features):
        for _ in range(cfg.epochs):
            for idx in _batches(len(images), cfg.batch_size, g):
                x_in = _sanitizer_inputs(sanitizer, images, train_samples, idx, prior, rng)
                # UNet step: co-adapting head is a frozen observer here.
                with frozen(co_utility):
                    with torch.no_grad():
                        u_raw = co_utility(images[idx])
                    x_s = sanitizer.unet(x_in)
                    loss_s = sanitization_loss(u_raw, co_utility(x_s), prior, privacy(x_s), lcfg)
                    _check_finite(loss_s, log)
                    opt_s.zero_grad()
                    loss_s.backward()
                    opt_s.step()
                # Head step on the same sanitized batch, gradients blocked from the UNet.
                if opt_u is not None:
                    ce = torch.nn.functional.cross_entropy(co_utility.logits(x_s.detach()), labels[idx])
                    _check_finite(ce, log)
                    opt_u.zero_grad()
                    ce.backward()
                    opt_u.step()
                log.append(it, loss_s=float(loss_s.item()), component="sanitizer+utility")
                it += 1
    return sanitizer, co_utility, log
