"""Regenerate the edge client's golden test fixtures from the primary package.

Writes into edge_client/testdata/:
  golden.psf1(.meta.json)   briefly trained deterministic sanitizer bundle
  stochastic.psf1(...)      stochastic-flagged bundle (refusal test)
  inputs/                   TDS1 directory with 100 default-spec test frames
  golden_outputs.bin        primary forward outputs on those frames (f32 LE)
  entity/classifiers/*.pt   classifiers for the end-to-end serve test
  expected_posteriors.json  offline posteriors on the sanitized e2e frames

Deterministic given the fixed seeds below; rerun after changing the sanitizer
architecture, the PSF1 format, or the dataset generator.
"""

import json
import os
import sys

import numpy as np
import torch

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(ROOT, "src"))

from privsan.cli import save_classifier
from privsan.data import DatasetSpec, generate_dataset, save_dataset
from privsan.evaluation import sanitize_samples
from privsan.export import export_sanitizer
from privsan.models import DETERMINISTIC, STOCHASTIC, make_sanitizer
from privsan.training import TrainConfig, pretrain_classifiers, train_plug_and_play

OUT = os.path.join(ROOT, "edge_client", "testdata")
N_GOLDEN = 100
N_E2E = 20
SEED = 2024


def main():
    os.makedirs(OUT, exist_ok=True)
    spec = DatasetSpec()
    train, test = generate_dataset(spec)
    prior = np.asarray(spec.prior)

    cfg = TrainConfig(epochs=3, batch_size=64, seed=SEED)
    utility, privacy = pretrain_classifiers(train, spec, cfg)
    entity_dir = os.path.join(OUT, "entity", "classifiers")
    os.makedirs(entity_dir, exist_ok=True)
    save_classifier(utility, os.path.join(entity_dir, "utility.pt"))
    save_classifier(privacy, os.path.join(entity_dir, "privacy.pt"))

    tcfg = TrainConfig(mode="plug_and_play", alpha=0.2, epochs=4, batch_size=64, seed=SEED + 1)
    sanitizer = make_sanitizer(DETERMINISTIC, spec, seed=SEED + 2)
    sanitizer, _ = train_plug_and_play(sanitizer, utility, privacy, prior, train, tcfg)
    export_sanitizer(sanitizer, os.path.join(OUT, "golden.psf1"),
                     metadata={"alpha": 0.2, "mode": "plug_and_play", "training_seed": SEED + 1,
                               "created": "fixture"})

    stoch = make_sanitizer(STOCHASTIC, spec, seed=SEED + 3)
    export_sanitizer(stoch, os.path.join(OUT, "stochastic.psf1"),
                     metadata={"alpha": 0.5, "mode": "plug_and_play", "training_seed": SEED + 3,
                               "created": "fixture"})

    frames = test[:N_GOLDEN]
    save_dataset(frames, os.path.join(OUT, "inputs"), spec, split="edge-golden")

    images = torch.from_numpy(np.stack([s.image for s in frames]))
    with torch.no_grad():
        outputs = sanitizer.unet(images).numpy().astype("<f4")
    with open(os.path.join(OUT, "golden_outputs.bin"), "wb") as f:
        f.write(outputs.tobytes())

    e2e = frames[:N_E2E]
    sanitized = sanitize_samples(sanitizer, e2e, prior)
    with torch.no_grad():
        u = utility(torch.from_numpy(sanitized)).numpy()
        p = privacy(torch.from_numpy(sanitized)).numpy()
    payload = {
        "count": N_E2E,
        "num_subjects": spec.num_subjects,
        "utility_posteriors": [[float(v) for v in row] for row in u],
        "privacy_probs": [[float(v) for v in row] for row in p],
    }
    with open(os.path.join(OUT, "expected_posteriors.json"), "w") as f:
        json.dump(payload, f)
    print(f"fixtures written to {OUT}: {N_GOLDEN} golden frames, {N_E2E} e2e frames")


if __name__ == "__main__":
    main()
