"""Experiment playbook CLI.

Subcommands: gen-data, pretrain, sweep, attack, export, serve, capture,
report. A JSON config file drives everything; flags override file values and
the file overrides registered defaults. Each run lives in a directory named
by the hash of its effective config, so repeated invocations reuse finished
work. Exit codes: 0 success, 1 usage/config error, 2 runtime failure (with a
failure manifest in the run directory).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
import traceback

import numpy as np
import torch

from . import data as data_mod
from .data import DatasetSpec, generate_dataset, load_dataset, save_dataset
from .errors import ConfigurationError, FormatError, TransportError
from .evaluation import (
    ConditionalBreakdown,
    TradeoffReport,
    attack_retrain,
    conditional_breakdown,
    emit_report,
    evaluate_tradeoff,
)
from .export import export_sanitizer, import_sanitizer
from .models import Classifier, DETERMINISTIC, STOCHASTIC, SanitizerModel, make_sanitizer
from .service import ClientConfig, EntityServer, simulate_capture
from .training import (
    TrainConfig,
    TrainLog,
    derive_seed,
    pretrain_classifiers,
    train_adversarial,
    train_collaborative,
    train_plug_and_play,
)

DEFAULT_CONFIG = {
    "seed": 7,
    "dataset": {
        "num_subjects": 16,
        "attr0_subjects": 10,
        "attribute_map": None,
        "image_shape": [3, 32, 32],
        "train_size": 4096,
        "test_size": 1024,
        "seed": 7,
    },
    "pretrain": {"epochs": 12, "batch_size": 64, "lr": 1e-3},
    "train": {
        "epochs": {"plug_and_play": 16, "adversarial": 25, "collaborative": 16},
        "batch_size": 64,
        "lr_sanitizer": 1e-3,
        "lr_privacy_head": 1e-3,
        "lr_utility_head": 1e-3,
        "alternation_period": 1,
    },
    "alphas": [0.0, 0.05, 0.2, 0.5, 0.8],
    "architectures": [DETERMINISTIC, STOCHASTIC],
    "modes": ["plug_and_play", "adversarial"],
    "eval": {"epsilon": 1e-7, "rng_seed": 0},
    "attack": {"epochs": None, "lr": 1e-3},
    "out_root": "runs",
    "workers": 1,
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path) as f:
            cfg = _deep_merge(cfg, json.load(f))
    if os.environ.get("PRIVSAN_OUT_ROOT"):
        cfg["out_root"] = os.environ["PRIVSAN_OUT_ROOT"]
    if os.environ.get("PRIVSAN_WORKERS"):
        cfg["workers"] = int(os.environ["PRIVSAN_WORKERS"])
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    alphas = cfg["alphas"]
    if (
        sorted(alphas) != list(alphas)
        or len(set(alphas)) != len(alphas)
        or any(not 0.0 <= a <= 1.0 for a in alphas)
    ):
        raise ConfigurationError(f"alphas must be sorted, unique, within [0,1]: {alphas}")
    return cfg


def config_hash(cfg: dict) -> str:
    hashable = {k: v for k, v in cfg.items() if k not in ("out_root", "workers")}
    return hashlib.sha256(json.dumps(hashable, sort_keys=True).encode()).hexdigest()[:12]


def run_dir_for(cfg: dict) -> str:
    path = os.path.join(cfg["out_root"], config_hash(cfg))
    os.makedirs(path, exist_ok=True)
    cfg_path = os.path.join(path, "config.json")
    if not os.path.exists(cfg_path):
        with open(cfg_path, "w") as f:
            json.dump(cfg, f, indent=2)
    return path


def dataset_spec(cfg: dict) -> DatasetSpec:
    d = cfg["dataset"]
    amap = d.get("attribute_map")
    if amap is None:
        n0 = d.get("attr0_subjects")
        k = d["num_subjects"]
        amap = tuple(0 if u < n0 else 1 for u in range(k)) if n0 is not None else ()
    return DatasetSpec(
        num_subjects=d["num_subjects"],
        attribute_map=tuple(amap) if amap else (),
        image_shape=tuple(d["image_shape"]),
        train_size=d["train_size"],
        test_size=d["test_size"],
        seed=d["seed"],
    )


# ---------------------------------------------------------------------------
# Checkpoint helpers (torch-native; classifiers never leave the entity).
# ---------------------------------------------------------------------------

def save_classifier(model: Classifier, path: str):
    torch.save(
        {
            "state_dict": model.state_dict(),
            "in_channels": model.in_channels,
            "image_hw": list(model.image_hw),
            "num_classes": model.num_classes,
        },
        path,
    )

def load_classifier(path: str) -> Classifier:
    blob = torch.load(path, weights_only=True)
    model = Classifier(blob["in_channels"], tuple(blob["image_hw"]), blob["num_classes"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def _pretrain_cached(cfg: dict, run_dir: str, train_samples, test_samples, spec):
    cls_dir = os.path.join(run_dir, "classifiers")
    u_path, p_path = os.path.join(cls_dir, "utility.pt"), os.path.join(cls_dir, "privacy.pt")
    if os.path.exists(u_path) and os.path.exists(p_path):
        return load_classifier(u_path), load_classifier(p_path)
    os.makedirs(cls_dir, exist_ok=True)
    tc = TrainConfig(
        epochs=cfg["pretrain"]["epochs"],
        batch_size=cfg["pretrain"]["batch_size"],
        lr_pretrain=cfg["pretrain"]["lr"],
        seed=derive_seed(cfg["seed"], "pretrain"),
    )
    utility, privacy = pretrain_classifiers(train_samples, spec, tc)
    from .training import accuracy
    from .data import stack_images, utility_labels, privacy_labels

    acc = {
        "utility_top1_test": accuracy(utility, stack_images(test_samples), utility_labels(test_samples)),
        "privacy_test": accuracy(privacy, stack_images(test_samples), privacy_labels(test_samples)),
    }
    save_classifier(utility, u_path)
    save_classifier(privacy, p_path)
    with open(os.path.join(cls_dir, "accuracies.json"), "w") as f:
        json.dump(acc, f, indent=2)
    print(f"pretrained classifiers: {acc}")
    return utility, privacy


def _cell_name(arch: str, mode: str, alpha: float) -> str:
    return f"{arch}__{mode}__a{alpha:g}"


def train_cell(arch, mode, alpha, cfg, spec, train_samples, utility, privacy):
    """Train one sweep cell; returns (sanitizer, aux classifier or None, log)."""
    tcfg = TrainConfig(
        mode=mode,
        alpha=alpha,
        epochs=cfg["train"]["epochs"][mode],
        batch_size=cfg["train"]["batch_size"],
        lr_sanitizer=cfg["train"]["lr_sanitizer"],
        lr_privacy_head=cfg["train"]["lr_privacy_head"],
        lr_utility_head=cfg["train"]["lr_utility_head"],
        alternation_period=cfg["train"]["alternation_period"],
        seed=derive_seed(cfg["seed"], arch, mode, alpha),
    )
    sanitizer = make_sanitizer(arch, spec, seed=derive_seed(tcfg.seed, "unet"))
    prior = np.asarray(spec.prior)
    if mode == "plug_and_play":
        sanitizer, log = train_plug_and_play(sanitizer, utility, privacy, prior, train_samples, tcfg)
        return sanitizer, None, log
    if mode == "adversarial":
        sanitizer, adv_privacy, log = train_adversarial(sanitizer, utility, privacy, prior, train_samples, tcfg)
        return sanitizer, adv_privacy, log
    sanitizer, co_utility, log = train_collaborative(sanitizer, utility, privacy, prior, train_samples, tcfg)
    return sanitizer, co_utility, log


def _run_cell_job(cfg: dict, run_dir: str, arch: str, mode: str, alpha: float):
    spec = dataset_spec(cfg)
    train_samples, test_samples = generate_dataset(spec)
    utility, privacy = _pretrain_cached(cfg, run_dir, train_samples, test_samples, spec)
    cell = _cell_name(arch, mode, alpha)
    cell_dir = os.path.join(run_dir, "cells", cell)
    marker = os.path.join(cell_dir, "done.json")
    if os.path.exists(marker):
        return cell
    os.makedirs(cell_dir, exist_ok=True)
    t0 = time.time()
    sanitizer, aux, log = train_cell(arch, mode, alpha, cfg, spec, train_samples, utility, privacy)
    export_sanitizer(
        sanitizer,
        os.path.join(cell_dir, "sanitizer.psf1"),
        metadata={"alpha": alpha, "mode": mode, "training_seed": derive_seed(cfg["seed"], arch, mode, alpha)},
    )
    log.to_csv(os.path.join(cell_dir, "trainlog.csv"))
    if aux is not None:
        save_classifier(aux, os.path.join(cell_dir, "aux_head.pt"))
    with open(marker, "w") as f:
        json.dump({"cell": cell, "seconds": time.time() - t0}, f)
    print(f"cell {cell} done in {time.time() - t0:.1f}s")
    return cell


def _load_cell_sanitizer(cfg: dict, run_dir: str, arch: str, mode: str, alpha: float, spec) -> SanitizerModel:
    cell_dir = os.path.join(run_dir, "cells", _cell_name(arch, mode, alpha))
    model = import_sanitizer(os.path.join(cell_dir, "sanitizer.psf1"), expect_shape=spec.image_shape)
    if arch == STOCHASTIC:
        model = SanitizerModel(
            STOCHASTIC,
            model.unet,
            model.input_shape,
            generator_spec=spec,
            resample_seed=derive_seed(cfg["seed"], arch, mode, alpha),
        )
    return model


def _load_cell_aux(run_dir: str, arch: str, mode: str, alpha: float):
    path = os.path.join(run_dir, "cells", _cell_name(arch, mode, alpha), "aux_head.pt")
    return load_classifier(path) if os.path.exists(path) else None


def cmd_sweep(cfg: dict) -> int:
    run_dir = run_dir_for(cfg)
    spec = dataset_spec(cfg)
    train_samples, test_samples = generate_dataset(spec)
    _pretrain_cached(cfg, run_dir, train_samples, test_samples, spec)

    cells = [(a, m, al) for a in cfg["architectures"] for m in cfg["modes"] for al in cfg["alphas"]]
    failures = []
    workers = max(1, int(cfg.get("workers", 1)))
    if workers > 1:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=workers, mp_context=__import__("multiprocessing").get_context("spawn")) as ex:
            futs = {ex.submit(_run_cell_job, cfg, run_dir, *c): c for c in cells}
            for fut in cf.as_completed(futs):
                c = futs[fut]
                try:
                    fut.result()
                except Exception as e:  # noqa: BLE001 - cell isolation
                    failures.append({"cell": _cell_name(*c), "error": str(e), "traceback": traceback.format_exc()})
    else:
        for c in cells:
            try:
                _run_cell_job(cfg, run_dir, *c)
            except Exception as e:  # noqa: BLE001 - cell isolation
                failures.append({"cell": _cell_name(*c), "error": str(e), "traceback": traceback.format_exc()})

    if failures:
        with open(os.path.join(run_dir, "failure_manifest.json"), "w") as f:
            json.dump({"failures": failures}, f, indent=2)
        print(f"{len(failures)} cell(s) failed; manifest written", file=sys.stderr)
        return 2

    _assemble_reports(cfg, run_dir, spec, test_samples)
    print(f"sweep complete: {run_dir}")
    return 0


def _assemble_reports(cfg: dict, run_dir: str, spec, test_samples):
    utility, privacy = load_classifier(os.path.join(run_dir, "classifiers", "utility.pt")), load_classifier(
        os.path.join(run_dir, "classifiers", "privacy.pt")
    )
    prior = np.asarray(spec.prior)
    reports, breakdowns, logs = [], [], {}
    for arch in cfg["architectures"]:
        for mode in cfg["modes"]:
            sanitizers, privacy_map, utility_map = {}, {}, {}
            for alpha in cfg["alphas"]:
                sanitizers[alpha] = _load_cell_sanitizer(cfg, run_dir, arch, mode, alpha, spec)
                aux = _load_cell_aux(run_dir, arch, mode, alpha)
                privacy_map[alpha] = aux if (mode == "adversarial" and aux is not None) else privacy
                utility_map[alpha] = aux if (mode == "collaborative" and aux is not None) else utility
                logs[_cell_name(arch, mode, alpha)] = TrainLog.from_csv(
                    os.path.join(run_dir, "cells", _cell_name(arch, mode, alpha), "trainlog.csv")
                )
            label = f"{arch}_{mode}"
            reports.append(
                evaluate_tradeoff(
                    sanitizers,
                    utility_map,
                    privacy_map,
                    prior,
                    test_samples,
                    cfg["alphas"],
                    epsilon=cfg["eval"]["epsilon"],
                    rng_seed=cfg["eval"]["rng_seed"],
                    raw_utility=utility,
                    raw_privacy=privacy,
                    label=label,
                )
            )
            for alpha in cfg["alphas"]:
                breakdowns.append(
                    conditional_breakdown(
                        sanitizers[alpha], privacy_map[alpha], test_samples, alpha, prior,
                        rng_seed=cfg["eval"]["rng_seed"], label=label,
                    )
                )
    emit_report(reports, breakdowns, logs, os.path.join(run_dir, "eval"))


def cmd_attack(cfg: dict, run_dir: str | None) -> int:
    run_dir = run_dir or run_dir_for(cfg)
    if not os.path.isdir(os.path.join(run_dir, "cells")):
        raise ConfigurationError(f"no sweep cells found under {run_dir}")
    spec = dataset_spec(cfg)
    train_samples, test_samples = generate_dataset(spec)
    privacy = load_classifier(os.path.join(run_dir, "classifiers", "privacy.pt"))
    prior = np.asarray(spec.prior)
    budget = cfg["attack"]["epochs"] or cfg["pretrain"]["epochs"]
    rows = []
    for arch in cfg["architectures"]:
        for mode in cfg["modes"]:
            for alpha in cfg["alphas"]:
                sanitizer = _load_cell_sanitizer(cfg, run_dir, arch, mode, alpha, spec)
                _, kl_after, acc_after = attack_retrain(
                    sanitizer, privacy, train_samples, test_samples, prior,
                    epochs=budget, lr=cfg["attack"]["lr"], batch_size=cfg["pretrain"]["batch_size"],
                    seed=derive_seed(cfg["seed"], "attack", arch, mode, alpha),
                )
                rows.append(
                    {"architecture": arch, "mode": mode, "alpha": alpha,
                     "attack_accuracy": acc_after, "attack_privacy_kl": kl_after}
                )
                print(f"attack {arch}/{mode}/a={alpha:g}: accuracy={acc_after:.3f} privacy_kl={kl_after:.4f}")
    with open(os.path.join(run_dir, "attack_report.json"), "w") as f:
        json.dump({"budget_epochs": budget, "rows": rows}, f, indent=2)
    with open(os.path.join(run_dir, "attack_report.csv"), "w") as f:
        f.write("architecture,mode,alpha,attack_accuracy,attack_privacy_kl\n")
        for r in rows:
            f.write(f"{r['architecture']},{r['mode']},{r['alpha']!r},{r['attack_accuracy']!r},{r['attack_privacy_kl']!r}\n")
    return 0


def cmd_gen_data(cfg: dict, out: str | None) -> int:
    spec = dataset_spec(cfg)
    train_samples, test_samples = generate_dataset(spec)
    out = out or os.path.join(run_dir_for(cfg), "data")
    save_dataset(train_samples, os.path.join(out, "train"), spec, split="train")
    save_dataset(test_samples, os.path.join(out, "test"), spec, split="test")
    print(f"wrote {len(train_samples)} train / {len(test_samples)} test samples to {out}; prior={spec.prior}")
    return 0


def cmd_pretrain(cfg: dict) -> int:
    run_dir = run_dir_for(cfg)
    spec = dataset_spec(cfg)
    train_samples, test_samples = generate_dataset(spec)
    _pretrain_cached(cfg, run_dir, train_samples, test_samples, spec)
    return 0


def cmd_export(cfg: dict, run_dir: str | None, arch: str, mode: str, alpha: float, out: str) -> int:
    run_dir = run_dir or run_dir_for(cfg)
    spec = dataset_spec(cfg)
    model = _load_cell_sanitizer(cfg, run_dir, arch, mode, alpha, spec)
    export_sanitizer(model, out, metadata={"alpha": alpha, "mode": mode})
    print(f"exported {out}")
    return 0


def cmd_serve(cfg: dict, run_dir: str | None, host: str, port: int, topk: int, max_frame_bytes: int) -> int:
    run_dir = run_dir or run_dir_for(cfg)
    utility = load_classifier(os.path.join(run_dir, "classifiers", "utility.pt"))
    privacy = load_classifier(os.path.join(run_dir, "classifiers", "privacy.pt"))
    server = EntityServer(utility, privacy, host=host, port=port, topk=topk, max_frame_bytes=max_frame_bytes)
    print(f"entity service listening on {host}:{server.port} (topk={topk})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_capture(cfg: dict, host: str, port: int, data_dir: str, sanitizer_path: str | None,
                limit: int | None, out: str | None) -> int:
    samples, spec = load_dataset(data_dir)
    sanitizer = import_sanitizer(sanitizer_path, expect_shape=spec.image_shape) if sanitizer_path else None
    client_cfg = ClientConfig(host=host, port=port)
    report = simulate_capture(samples, sanitizer, client_cfg, prior=np.asarray(spec.prior), limit=limit)
    if out:
        with open(out, "w") as f:
            for r in report.results:
                f.write(json.dumps(None if r is None else {
                    "utility_topk": [[i, p] for i, p in r.utility_topk],
                    "privacy_probs": list(r.privacy_probs),
                    "sanitized": r.sanitized,
                }) + "\n")
    print(json.dumps(report.metrics))
    return 0


def cmd_report(cfg: dict, run_dir: str | None) -> int:
    run_dir = run_dir or run_dir_for(cfg)
    eval_dir = os.path.join(run_dir, "eval")
    with open(os.path.join(eval_dir, "report.json")) as f:
        payload = json.load(f)
    reports = [TradeoffReport.from_dict(d) for d in payload["reports"]]
    logs_dir = os.path.join(eval_dir, "logs")
    logs = {}
    if os.path.isdir(logs_dir):
        for name in sorted(os.listdir(logs_dir)):
            logs[name[:-4]] = TrainLog.from_csv(os.path.join(logs_dir, name))
    with open(os.path.join(eval_dir, "breakdowns.json")) as f:
        raw = json.load(f)
    from .evaluation import GroupStats

    breakdowns = [
        ConditionalBreakdown(
            label=b["label"], alpha=b["alpha"], prior_class1=b["prior_class1"],
            groups={int(g): GroupStats(**s) for g, s in b["groups"].items()},
        )
        for b in raw
    ]
    emit_report(reports, breakdowns, logs, eval_dir)
    print(f"report refreshed under {eval_dir}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="privsan", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override global seed")
        sp.add_argument("--out-root", help="override output root directory")
        sp.add_argument("--workers", type=int, help="parallel sweep workers")

    sp = sub.add_parser("gen-data", help="generate and export the synthetic dataset")
    common(sp)
    sp.add_argument("--out", help="output directory (default: <run>/data)")

    common(sub.add_parser("pretrain", help="train the raw-data utility/privacy classifiers"))
    common(sub.add_parser("sweep", help="train + evaluate every (architecture, mode, alpha) cell"))

    sp = sub.add_parser("attack", help="retrain fresh attacker heads against every trained sanitizer")
    common(sp)
    sp.add_argument("--run", help="existing run directory (default: config-derived)")

    sp = sub.add_parser("export", help="export a trained cell sanitizer to a PSF1 bundle")
    common(sp)
    sp.add_argument("--run")
    sp.add_argument("--arch", required=True, choices=[DETERMINISTIC, STOCHASTIC])
    sp.add_argument("--mode", required=True)
    sp.add_argument("--alpha", type=float, required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("serve", help="run the entity inference service")
    common(sp)
    sp.add_argument("--run")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=7787)
    sp.add_argument("--topk", type=int, default=3)
    sp.add_argument("--max-frame-bytes", type=int, default=1 << 22)

    sp = sub.add_parser("capture", help="stream a TDS1 dataset to a running entity service")
    common(sp)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=7787)
    sp.add_argument("--data", required=True, help="TDS1 dataset directory")
    sp.add_argument("--sanitizer", help="PSF1 bundle; absent means raw transmission")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--out", help="write per-frame JSON lines here")

    sp = sub.add_parser("report", help="re-emit reports/plots for a finished run")
    common(sp)
    sp.add_argument("--run")

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": getattr(args, "seed", None),
                                        "out_root": getattr(args, "out_root", None),
                                        "workers": getattr(args, "workers", None)})
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "attack":
            return cmd_attack(cfg, args.run)
        if args.command == "export":
            return cmd_export(cfg, args.run, args.arch, args.mode, args.alpha, args.out)
        if args.command == "serve":
            return cmd_serve(cfg, args.run, args.host, args.port, args.topk, args.max_frame_bytes)
        if args.command == "capture":
            return cmd_capture(cfg, args.host, args.port, args.data, args.sanitizer, args.limit, args.out)
        if args.command == "report":
            return cmd_report(cfg, args.run)
        raise ConfigurationError(f"unknown command {args.command}")
    except (ConfigurationError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TransportError as e:
        print(f"transport error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - single CLI boundary
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
