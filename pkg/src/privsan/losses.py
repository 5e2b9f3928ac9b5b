"""Divergence objectives for sanitizer and privacy-head training.

All quantities operate on probability vectors along the last axis and are in
nats. Logs are epsilon-clamped so confident (saturated) posteriors stay
finite and differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, DomainError
from .models import to_tensor


@dataclass(frozen=True)
class LossConfig:
    alpha: float
    epsilon_clamp: float = 1e-7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must be in [0,1], got {self.alpha}")
        if self.epsilon_clamp <= 0:
            raise ConfigurationError(f"epsilon_clamp must be > 0, got {self.epsilon_clamp}")


def _pair(p, q):
    p, q = to_tensor(p), to_tensor(q)
    if p.shape[-1] != q.shape[-1]:
        raise DomainError(f"length mismatch {p.shape[-1]} vs {q.shape[-1]}")
    # Same dtype on both sides, otherwise equal values clamp differently and
    # identical distributions stop giving an exact zero.
    dt = torch.promote_types(p.dtype, q.dtype)
    return p.to(dt), q.to(dt)


def kl_divergence(p, q, epsilon: float = 1e-7) -> torch.Tensor:
    """sum_i p_i * log((p_i + eps) / (q_i + eps)), per vector along the last axis."""
    p, q = _pair(p, q)
    return (p * (torch.log(p + epsilon) - torch.log(q + epsilon))).sum(-1)


def binary_cross_entropy(one_hot, pred, epsilon: float = 1e-7) -> torch.Tensor:
    """-sum_i one_hot_i * log(pred_i + eps), per vector along the last axis."""
    y, pred = _pair(one_hot, pred)
    return -(y * torch.log(pred + epsilon)).sum(-1)


def sanitization_loss(u_raw, u_san, prior, p_san, cfg: LossConfig) -> torch.Tensor:
    """(1-alpha) * KL(raw utility posterior || sanitized utility posterior)
    + alpha * KL(attribute prior || sanitized privacy posterior), batch-meaned.

    Gradients flow only through u_san and p_san: the raw posterior and the
    prior are targets, not trainable paths.
    """
    u_raw = to_tensor(u_raw).detach()
    p_san = to_tensor(p_san)
    prior = to_tensor(prior).detach().broadcast_to(p_san.shape)
    kl_u = kl_divergence(u_raw, u_san, cfg.epsilon_clamp)
    kl_p = kl_divergence(prior, p_san, cfg.epsilon_clamp)
    return ((1.0 - cfg.alpha) * kl_u + cfg.alpha * kl_p).mean()


def privacy_loss(y_one_hot, p_raw, p_san, epsilon: float = 1e-7) -> torch.Tensor:
    """BCE of the true attribute against the posterior on raw data plus the
    posterior on sanitized data, equally weighted, batch-meaned."""
    y = to_tensor(y_one_hot).detach()
    return (binary_cross_entropy(y, p_raw, epsilon) + binary_cross_entropy(y, p_san, epsilon)).mean()
