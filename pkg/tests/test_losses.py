"""Closed-form oracles and properties for the divergence objectives.

Every expected value here is recomputed with plain math.log scalar arithmetic
inside the test, independent of the library implementation.
"""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from privsan.errors import ConfigurationError, DomainError
from privsan.losses import LossConfig, binary_cross_entropy, kl_divergence, privacy_loss, sanitization_loss

TINY = 1e-12  # stand-in for the epsilon -> 0 limit in closed-form checks


def scalar_kl(p, q, eps=TINY):
    return sum(pi * math.log((pi + eps) / (qi + eps)) for pi, qi in zip(p, q))


def scalar_bce(y, pred, eps=TINY):
    return -sum(yi * math.log(pi + eps) for yi, pi in zip(y, pred))


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


class TestKLDivergence:
    def test_identical_distributions(self):
        assert float(kl_divergence(t64([0.5, 0.5]), t64([0.5, 0.5]), TINY)) == pytest.approx(0.0, abs=1e-12)

    def test_log2_case(self):
        got = float(kl_divergence(t64([1.0, 0.0]), t64([0.5, 0.5]), TINY))
        assert got == pytest.approx(math.log(2), abs=1e-6)
        assert got == pytest.approx(0.6931, abs=1e-4)

    def test_prior_case(self):
        expected = scalar_kl([0.625, 0.375], [0.5, 0.5])
        got = float(kl_divergence(t64([0.625, 0.375]), t64([0.5, 0.5]), TINY))
        assert got == pytest.approx(expected, abs=1e-6)
        assert got == pytest.approx(0.0316, abs=5e-4)

    def test_length_mismatch(self):
        with pytest.raises(DomainError):
            kl_divergence(t64([0.5, 0.5]), t64([0.3, 0.3, 0.4]))

    def test_batched_shape(self):
        p = torch.rand(7, 4, dtype=torch.float64)
        p /= p.sum(-1, keepdim=True)
        out = kl_divergence(p, p)
        assert out.shape == (7,)
        assert torch.allclose(out, torch.zeros(7, dtype=torch.float64))

    def test_self_kl_within_ten_epsilon(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 12))
            p = rng.dirichlet(np.ones(n))
            eps = 1e-7
            assert abs(float(kl_divergence(t64(p), t64(p), eps))) < 10 * eps

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 16))
    def test_gibbs_nonnegativity(self, seed, n):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(n) * rng.uniform(0.1, 3.0))
        q = rng.dirichlet(np.ones(n) * rng.uniform(0.1, 3.0))
        assert float(kl_divergence(t64(p), t64(q), 1e-7)) >= -1e-4


class TestBinaryCrossEntropy:
    def test_perfect_prediction(self):
        assert float(binary_cross_entropy(t64([1.0, 0.0]), t64([1.0, 0.0]), TINY)) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_prediction(self):
        got = float(binary_cross_entropy(t64([1.0, 0.0]), t64([0.5, 0.5]), TINY))
        assert got == pytest.approx(math.log(2), abs=1e-6)

    def test_wrong_confident_prediction(self):
        got = float(binary_cross_entropy(t64([0.0, 1.0]), t64([0.9, 0.1]), TINY))
        assert got == pytest.approx(-math.log(0.1), abs=1e-6)
        assert got == pytest.approx(2.3026, abs=1e-4)


class TestSanitizationLoss:
    def test_alpha_zero_ignores_privacy(self):
        u = t64([0.2, 0.8])
        loss = sanitization_loss(u, u, t64([0.625, 0.375]), t64([0.99, 0.01]), LossConfig(0.0, TINY))
        assert float(loss) == pytest.approx(0.0, abs=1e-9)

    def test_alpha_one_ignores_utility(self):
        prior = t64([0.625, 0.375])
        loss = sanitization_loss(t64([1.0, 0.0]), t64([0.0, 1.0]), prior, prior, LossConfig(1.0, TINY))
        assert float(loss) == pytest.approx(0.0, abs=1e-9)

    def test_half_alpha_closed_form(self):
        k = 16
        u_raw = [1.0] + [0.0] * (k - 1)
        u_san = [1.0 / k] * k
        expected = 0.5 * scalar_kl(u_raw, u_san) + 0.5 * scalar_kl([0.625, 0.375], [0.5, 0.5])
        got = float(
            sanitization_loss(t64(u_raw), t64(u_san), t64([0.625, 0.375]), t64([0.5, 0.5]), LossConfig(0.5, TINY))
        )
        assert got == pytest.approx(expected, abs=1e-6)
        assert got == pytest.approx(1.4021, abs=1e-3)

    def test_affine_in_alpha(self):
        rng = np.random.default_rng(11)
        u_raw, u_san = rng.dirichlet(np.ones(16)), rng.dirichlet(np.ones(16))
        p_san = rng.dirichlet(np.ones(2))
        prior = t64([0.625, 0.375])
        vals = [
            float(sanitization_loss(t64(u_raw), t64(u_san), prior, t64(p_san), LossConfig(a)))
            for a in (0.0, 0.5, 1.0)
        ]
        assert vals[1] == pytest.approx(0.5 * (vals[0] + vals[2]), abs=1e-9)

    def test_batch_mean_reduction(self):
        u_raw = t64([[1.0, 0.0], [0.0, 1.0]])
        u_san = t64([[0.5, 0.5], [0.5, 0.5]])
        prior = t64([0.5, 0.5])
        p_san = t64([[0.5, 0.5], [0.5, 0.5]])
        got = float(sanitization_loss(u_raw, u_san, prior, p_san, LossConfig(0.5, TINY)))
        assert got == pytest.approx(0.5 * math.log(2), abs=1e-6)

    def test_gradient_does_not_reach_u_raw(self):
        u_raw = t64([0.7, 0.3]).requires_grad_(True)
        u_san = t64([0.6, 0.4]).requires_grad_(True)
        p_san = t64([0.5, 0.5]).requires_grad_(True)
        loss = sanitization_loss(u_raw, u_san, t64([0.625, 0.375]), p_san, LossConfig(0.5))
        loss.backward()
        assert u_raw.grad is None
        assert u_san.grad is not None and p_san.grad is not None

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            LossConfig(alpha=1.5)
        with pytest.raises(ConfigurationError):
            LossConfig(alpha=0.5, epsilon_clamp=0.0)


class TestPrivacyLoss:
    def test_perfect(self):
        y = t64([1.0, 0.0])
        assert float(privacy_loss(y, y, y, TINY)) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_sanitized(self):
        y = t64([1.0, 0.0])
        got = float(privacy_loss(y, t64([1.0, 0.0]), t64([0.5, 0.5]), TINY))
        assert got == pytest.approx(math.log(2), abs=1e-6)

    def test_both_uniform(self):
        y = t64([0.0, 1.0])
        got = float(privacy_loss(y, t64([0.5, 0.5]), t64([0.5, 0.5]), TINY))
        assert got == pytest.approx(2 * math.log(2), abs=1e-6)


def _central_diff(fn, z, h=1e-6):
    grad = torch.zeros_like(z)
    for i in range(z.numel()):
        zp, zm = z.clone(), z.clone()
        zp.view(-1)[i] += h
        zm.view(-1)[i] -= h
        grad.view(-1)[i] = (fn(zp) - fn(zm)) / (2 * h)
    return grad


def _rel_err(a, b):
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


class TestGradientsMatchFiniteDifferences:
    """Autograd vs central differences, logits-parameterized, float64."""

    def test_fifty_random_instances(self):
        rng = np.random.default_rng(1234)
        failures = []
        for case in range(50):
            k = int(rng.integers(2, 17))
            p = torch.tensor(rng.dirichlet(np.ones(k)), dtype=torch.float64)
            prior = torch.tensor(rng.dirichlet(np.ones(2)), dtype=torch.float64)
            zu = torch.tensor(rng.normal(size=k), dtype=torch.float64)
            zp = torch.tensor(rng.normal(size=2), dtype=torch.float64)
            alpha = float(rng.uniform(0, 1))
            cfg = LossConfig(alpha)

            def loss_kl(z):
                return kl_divergence(p, torch.softmax(z, -1), 1e-7)

            def loss_san(z):
                return sanitization_loss(p, torch.softmax(z, -1), prior, torch.softmax(zp, -1), cfg)

            def loss_priv(z):
                y = torch.tensor([1.0, 0.0], dtype=torch.float64)
                return privacy_loss(y, torch.softmax(z, -1), torch.softmax(z * 0.5, -1), 1e-7)

            for name, fn, z in (("kl", loss_kl, zu), ("sanitization", loss_san, zu), ("privacy", loss_priv, zp)):
                zg = z.clone().requires_grad_(True)
                fn(zg).backward()
                err = _rel_err(zg.grad, _central_diff(fn, z))
                if err >= 1e-3:
                    failures.append((case, name, err))
        assert not failures, f"gradient mismatches: {failures}"
