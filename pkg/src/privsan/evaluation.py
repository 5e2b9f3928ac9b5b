"""Evaluation harness: KL trade-off tables, conditional attribute-probability
breakdowns, top-k utility accuracy, retrained-attacker robustness, and
report/plot emission. All KL values are reported in nats."""

from __future__ import annotations

import dataclasses
import json
import os
import warnings
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .data import privacy_labels, stack_images, utility_labels
from .errors import ConfigurationError, DomainError
from .losses import kl_divergence
from .models import Classifier, SanitizerModel, STOCHASTIC, clone_final_layer
from .training import TrainLog, derive_seed, train_classifier_ce, _forward_chunks

KL_UNITS = "nats"


@dataclass(frozen=True)
class TradeoffRow:
    pathway: str  # "raw" or "sanitized"
    alpha: float | None
    utility_kl: float
    privacy_kl: float
    top1: float
    top3: float
    n: int


@dataclass(frozen=True)
class TradeoffReport:
    label: str
    prior: tuple
    epsilon: float
    rows: tuple
    kl_units: str = KL_UNITS

    def row_for(self, alpha) -> TradeoffRow:
        for r in self.rows:
            if r.pathway == "sanitized" and r.alpha == alpha:
                return r
        raise KeyError(f"no sanitized row for alpha={alpha}")

    @property
    def raw_row(self) -> TradeoffRow:
        return next(r for r in self.rows if r.pathway == "raw")

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "kl_units": self.kl_units,
            "prior": list(self.prior),
            "epsilon": self.epsilon,
            "rows": [dataclasses.asdict(r) for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TradeoffReport":
        rows = tuple(TradeoffRow(**r) for r in d["rows"])
        return cls(label=d["label"], prior=tuple(d["prior"]), epsilon=d["epsilon"], rows=rows, kl_units=d["kl_units"])


@dataclass(frozen=True)
class GroupStats:
    median: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    outliers: tuple
    n: int


@dataclass(frozen=True)
class ConditionalBreakdown:
    label: str
    alpha: float
    prior_class1: float
    groups: dict  # true privacy label -> GroupStats


def sanitize_samples(sanitizer: SanitizerModel, samples, prior=None, rng_seed: int = 0) -> np.ndarray:
    """Sanitized test images; stochastic resampling is seeded for reproducibility."""
    images = torch.from_numpy(stack_images(samples))
    if sanitizer.kind == STOCHASTIC:
        if prior is None:
            raise ConfigurationError("stochastic sanitizer evaluation needs the attribute prior")
        rng = np.random.Generator(np.random.PCG64(rng_seed))
        images = torch.from_numpy(np.stack([sanitizer.resample(s, prior, rng) for s in samples]))
    return _forward_chunks(sanitizer.unet, images).numpy()


def _probs(model: Classifier, images: np.ndarray) -> np.ndarray:
    return _forward_chunks(model, torch.from_numpy(np.asarray(images, dtype=np.float32))).numpy()


def _mean_kl(p: np.ndarray, q: np.ndarray, epsilon: float) -> float:
    return float(kl_divergence(p, q, epsilon).mean().item())


def _topk_hits(probs: np.ndarray, labels: np.ndarray, k: int, rng: np.random.Generator) -> float:
    tie = rng.random(probs.shape)
    order = np.lexsort((tie, -probs), axis=-1)  # descending prob, random ties
    return float(np.mean([labels[i] in order[i, :k] for i in range(len(labels))]))


def topk_accuracy(utility: Classifier, sanitizer: SanitizerModel | None, test_samples, k: int,
                  prior=None, rng_seed: int = 0, epsilon: float = 1e-7) -> float:
    """Fraction of samples whose true subject is in the k largest utility
    posteriors on the (sanitized) image. Ties break at random."""
    if not 1 <= k <= utility.num_classes:
        raise DomainError(f"k={k} out of range [1, {utility.num_classes}]")
    if sanitizer is None:
        images = stack_images(test_samples)
    else:
        images = sanitize_samples(sanitizer, test_samples, prior, rng_seed=rng_seed)
    probs = _probs(utility, images)
    rng = np.random.Generator(np.random.PCG64(derive_seed(rng_seed, "tiebreak")))
    return _topk_hits(probs, utility_labels(test_samples), k, rng)


def _per_alpha(model_or_map, alpha):
    if isinstance(model_or_map, torch.nn.Module):
        return model_or_map
    try:
        return model_or_map[alpha]
    except KeyError:
        raise ConfigurationError(f"no classifier supplied for alpha={alpha}")


def evaluate_tradeoff(sanitizers, utility, privacy, prior, test_samples, alphas,
                      epsilon: float = 1e-7, rng_seed: int = 0,
                      raw_utility: Classifier | None = None, raw_privacy: Classifier | None = None,
                      label: str = "tradeoff") -> TradeoffReport:
    """Mean per-sample KL terms and top-k accuracy per alpha, plus a raw-data row.

    sanitizers maps alpha -> trained SanitizerModel (the sweep trains one per
    alpha). utility/privacy may be a single classifier or an alpha-keyed map
    (adversarial and collaborative cells carry retrained heads); raw_* name
    the raw-pathway baselines and default to the single classifiers.
    """
    raw_u = raw_utility if raw_utility is not None else (utility if isinstance(utility, torch.nn.Module) else None)
    raw_p = raw_privacy if raw_privacy is not None else (privacy if isinstance(privacy, torch.nn.Module) else None)
    if raw_u is None or raw_p is None:
        raise ConfigurationError("raw_utility/raw_privacy required when per-alpha classifiers are supplied")
    for a in alphas:
        if a not in sanitizers:
            raise ConfigurationError(f"missing sanitizer for alpha={a}")

    prior_arr = np.asarray(prior, dtype=np.float64)
    raw_images = stack_images(test_samples)
    u_labels = utility_labels(test_samples)
    n = len(test_samples)
    tie_rng = lambda a, k: np.random.Generator(np.random.PCG64(derive_seed(rng_seed, "tie", a, k)))

    u_raw_base = _probs(raw_u, raw_images)
    p_raw_base = _probs(raw_p, raw_images)
    rows = [
        TradeoffRow(
            pathway="raw",
            alpha=None,
            utility_kl=_mean_kl(u_raw_base, u_raw_base, epsilon),
            privacy_kl=_mean_kl(np.broadcast_to(prior_arr, p_raw_base.shape), p_raw_base, epsilon),
            top1=_topk_hits(u_raw_base, u_labels, 1, tie_rng("raw", 1)),
            top3=_topk_hits(u_raw_base, u_labels, 3, tie_rng("raw", 3)),
            n=n,
        )
    ]
    for a in alphas:
        u_model = _per_alpha(utility, a)
        p_model = _per_alpha(privacy, a)
        sanitized = sanitize_samples(sanitizers[a], test_samples, prior, rng_seed=derive_seed(rng_seed, "sanitize", a))
        u_raw = _probs(u_model, raw_images)
        u_san = _probs(u_model, sanitized)
        p_san = _probs(p_model, sanitized)
        rows.append(
            TradeoffRow(
                pathway="sanitized",
                alpha=float(a),
                utility_kl=_mean_kl(u_raw, u_san, epsilon),
                privacy_kl=_mean_kl(np.broadcast_to(prior_arr, p_san.shape), p_san, epsilon),
                top1=_topk_hits(u_san, u_labels, 1, tie_rng(a, 1)),
                top3=_topk_hits(u_san, u_labels, 3, tie_rng(a, 3)),
                n=n,
            )
        )
    return TradeoffReport(label=label, prior=tuple(float(p) for p in prior_arr), epsilon=epsilon, rows=tuple(rows))


def quartiles(values: np.ndarray):
    q1, med, q3 = (float(v) for v in np.quantile(np.asarray(values, dtype=np.float64), [0.25, 0.5, 0.75]))
    return q1, med, q3


def group_stats(values) -> GroupStats:
    """Median/IQR box with 1.5*IQR whiskers; points beyond are outliers."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise DomainError("empty group")
    q1, med, q3 = quartiles(x)
    iqr = q3 - q1
    lo_lim, hi_lim = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo_lim) & (x <= hi_lim)]
    return GroupStats(
        median=med,
        q1=q1,
        q3=q3,
        whisker_lo=float(inside.min()),
        whisker_hi=float(inside.max()),
        outliers=tuple(float(v) for v in np.sort(x[(x < lo_lim) | (x > hi_lim)])),
        n=int(x.size),
    )


def conditional_breakdown(sanitizer: SanitizerModel, privacy: Classifier, test_samples, alpha: float,
                          prior, rng_seed: int = 0, label: str = "") -> ConditionalBreakdown:
    """Distribution of the class-1 posterior on sanitized images, grouped by
    the true attribute."""
    sanitized = sanitize_samples(sanitizer, test_samples, prior, rng_seed=derive_seed(rng_seed, "sanitize", alpha))
    p1 = _probs(privacy, sanitized)[:, 1]
    labels = privacy_labels(test_samples)
    groups = {}
    for g in (0, 1):
        vals = p1[labels == g]
        if 0 < len(vals) < 5:
            warnings.warn(f"attribute group {g} has only {len(vals)} samples; quartiles are unstable")
        groups[g] = group_stats(vals)
    return ConditionalBreakdown(label=label, alpha=float(alpha), prior_class1=float(prior[1]), groups=groups)


def attack_retrain(sanitizer: SanitizerModel, privacy: Classifier, train_samples, test_samples, prior,
                   epochs: int, lr: float = 1e-3, batch_size: int = 64, seed: int = 0,
                   epsilon: float = 1e-7):
    """Retrain a fresh privacy head on sanitized training data with true labels.

    Returns (attacker, privacy_kl_after, accuracy_after), both measured on
    sanitized test data. A stochastic sanitizer re-resamples the training set
    every epoch; the sanitized test set uses one seeded draw.
    """
    attacker = clone_final_layer(privacy, seed=derive_seed(seed, "attacker-head"))
    labels_t = torch.from_numpy(privacy_labels(train_samples))
    if sanitizer.kind == STOCHASTIC:
        for epoch in range(epochs):
            images = torch.from_numpy(sanitize_samples(sanitizer, train_samples, prior,
                                                       rng_seed=derive_seed(seed, "attack-train", epoch)))
            train_classifier_ce(attacker, images, labels_t, 1, lr, batch_size,
                                derive_seed(seed, "attack-shuffle", epoch), head_only=True)
    else:
        images = torch.from_numpy(sanitize_samples(sanitizer, train_samples, prior))
        train_classifier_ce(attacker, images, labels_t, epochs, lr, batch_size,
                            derive_seed(seed, "attack-shuffle"), head_only=True)

    test_sanitized = sanitize_samples(sanitizer, test_samples, prior, rng_seed=derive_seed(seed, "attack-test"))
    probs = _probs(attacker, test_sanitized)
    prior_b = np.broadcast_to(np.asarray(prior, dtype=np.float64), probs.shape)
    privacy_kl_after = _mean_kl(prior_b, probs, epsilon)
    accuracy_after = float(np.mean(probs.argmax(-1) == privacy_labels(test_samples)))
    return attacker, privacy_kl_after, accuracy_after


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def _breakdown_dict(b: ConditionalBreakdown) -> dict:
    return {
        "label": b.label,
        "alpha": b.alpha,
        "prior_class1": b.prior_class1,
        "groups": {str(g): dataclasses.asdict(s) for g, s in b.groups.items()},
    }


def emit_report(reports, breakdowns, logs, out_dir: str):
    """Write reports/breakdowns as JSON + CSV, train logs as CSV, and static
    plots. reports: list of TradeoffReport; breakdowns: list of
    ConditionalBreakdown; logs: dict name -> TrainLog. Returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    plots_dir = os.path.join(out_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)
    written = []

    def save_json(name, payload):
        path = os.path.join(out_dir, name)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)
        written.append(path)

    reports = list(reports)
    save_json("report.json", {"kl_units": KL_UNITS, "reports": [r.to_dict() for r in reports]})

    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w") as f:
        f.write("label,pathway,alpha,utility_kl,privacy_kl,top1,top3,n\n")
        for r in reports:
            for row in r.rows:
                a = "" if row.alpha is None else repr(row.alpha)
                f.write(f"{r.label},{row.pathway},{a},{row.utility_kl!r},{row.privacy_kl!r},"
                        f"{row.top1!r},{row.top3!r},{row.n}\n")
    written.append(csv_path)

    save_json("breakdowns.json", [_breakdown_dict(b) for b in breakdowns])

    log_dir = os.path.join(out_dir, "logs")
    os.makedirs(log_dir, exist_ok=True)
    for name, log in logs.items():
        path = os.path.join(log_dir, f"{name}.csv")
        log.to_csv(path)
        written.append(path)

    written += _plot_tradeoff(reports, plots_dir)
    written += _plot_breakdowns(breakdowns, plots_dir)
    written += _plot_topk(reports, plots_dir)
    written += _plot_losses(logs, plots_dir)
    return written


def _plot_tradeoff(reports, plots_dir):
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for r in reports:
        rows = [row for row in r.rows if row.pathway == "sanitized"]
        rows.sort(key=lambda row: row.alpha)
        ax.plot([row.utility_kl for row in rows], [row.privacy_kl for row in rows], "o-", label=r.label)
        for row in rows:
            ax.annotate(f"a={row.alpha:g}", (row.utility_kl, row.privacy_kl), fontsize=7)
    ax.set_xlabel(f"utility KL ({KL_UNITS})")
    ax.set_ylabel(f"privacy KL from prior ({KL_UNITS})")
    ax.legend(fontsize=8)
    ax.set_title("utility/privacy trade-off")
    path = os.path.join(plots_dir, "tradeoff_curve.png")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return [path]


def _plot_breakdowns(breakdowns, plots_dir):
    if not breakdowns:
        return []
    labels = sorted({b.label for b in breakdowns})
    paths = []
    for label in labels:
        series = sorted([b for b in breakdowns if b.label == label], key=lambda b: b.alpha)
        fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharey=True)
        for g in (0, 1):
            ax = axes[g]
            boxes = [
                {
                    "med": b.groups[g].median,
                    "q1": b.groups[g].q1,
                    "q3": b.groups[g].q3,
                    "whislo": b.groups[g].whisker_lo,
                    "whishi": b.groups[g].whisker_hi,
                    "fliers": list(b.groups[g].outliers),
                    "label": f"{b.alpha:g}",
                }
                for b in series
            ]
            ax.bxp(boxes, showfliers=True)
            ax.axhline(series[0].prior_class1, color="tab:blue", linestyle=":", label="prior")
            ax.set_title(f"true attribute = {g}")
            ax.set_xlabel("alpha")
            ax.set_ylim(-0.05, 1.05)
        axes[0].set_ylabel("P(class 1 | sanitized image)")
        fig.suptitle(label)
        path = os.path.join(plots_dir, f"whiskers_{label}.png")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths


def _plot_topk(reports, plots_dir):
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(1, len(reports))
    for i, r in enumerate(reports):
        rows = sorted([row for row in r.rows if row.pathway == "sanitized"], key=lambda row: row.alpha)
        xs = np.arange(len(rows)) + i * width
        ax.bar(xs, [row.top3 for row in rows], width=width, label=r.label)
        ax.set_xticks(np.arange(len(rows)) + 0.4 - width / 2, [f"{row.alpha:g}" for row in rows])
    raw = reports[0].raw_row.top3 if reports else 0
    ax.axhline(raw, color="k", linestyle="--", linewidth=1, label="raw top-3")
    ax.set_xlabel("alpha")
    ax.set_ylabel("top-3 subject accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    path = os.path.join(plots_dir, "topk_accuracy.png")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return [path]


def _plot_losses(logs, plots_dir):
    paths = []
    for name, log in logs.items():
        fig, ax = plt.subplots(figsize=(6, 4))
        s_pts = [(r.iteration, r.loss_s) for r in log.records if r.loss_s is not None]
        p_pts = [(r.iteration, r.loss_p) for r in log.records if r.loss_p is not None]
        if s_pts:
            ax.plot(*zip(*s_pts), label="sanitization loss", linewidth=0.8)
        if p_pts:
            ax.plot(*zip(*p_pts), label="privacy loss", linewidth=0.8)
        ax.set_xlabel("batch iteration")
        ax.set_ylabel("loss (nats)")
        ax.legend(fontsize=8)
        ax.set_title(name)
        path = os.path.join(plots_dir, f"loss_curves_{name}.png")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths
