"""Session fixtures: the default dataset, pretrained baselines, and the
trained sanitizers shared between unit tests and the acceptance suite.
Training happens at most once per pytest session."""

from dataclasses import dataclass

import numpy as np
import pytest

from privsan.data import DatasetSpec, generate_dataset
from privsan.models import Classifier, DETERMINISTIC, STOCHASTIC, hash_parameters, make_sanitizer
from privsan.training import (
    TrainConfig,
    derive_seed,
    pretrain_classifiers,
    train_adversarial,
    train_plug_and_play,
)

GLOBAL_SEED = 7
PRETRAIN_EPOCHS = 12
PLUG_EPOCHS = 16
ADV_EPOCHS = 31
ADV_HEAD_LR = 5e-3
ALPHAS = (0.0, 0.05, 0.2, 0.5, 0.8)


@pytest.fixture(scope="session")
def default_spec():
    return DatasetSpec()


@pytest.fixture(scope="session")
def dataset(default_spec):
    return generate_dataset(default_spec)


@pytest.fixture(scope="session")
def prior(default_spec):
    return np.asarray(default_spec.prior)


@dataclass
class Baselines:
    """Pretrained raw-data classifiers plus their post-pretraining hashes,
    kept so later criteria can assert the trainers never touched them."""

    utility: Classifier
    privacy: Classifier
    utility_hash: str
    privacy_hash: str

    def __iter__(self):
        return iter((self.utility, self.privacy))


@pytest.fixture(scope="session")
def baselines(dataset, default_spec):
    train, _ = dataset
    cfg = TrainConfig(epochs=PRETRAIN_EPOCHS, batch_size=64, seed=derive_seed(GLOBAL_SEED, "pretrain"))
    utility, privacy = pretrain_classifiers(train, default_spec, cfg)
    return Baselines(utility, privacy, hash_parameters(utility), hash_parameters(privacy))


def _plug_cfg(alpha):
    return TrainConfig(mode="plug_and_play", alpha=alpha, epochs=PLUG_EPOCHS, batch_size=64,
                       seed=derive_seed(GLOBAL_SEED, "plug", alpha))


@pytest.fixture(scope="session")
def plug_det_sweep(dataset, default_spec, baselines, prior):
    """Plug-and-play deterministic sanitizer per alpha: {alpha: (sanitizer, log)}."""
    train, _ = dataset
    utility, privacy = baselines
    out = {}
    for alpha in ALPHAS:
        sanitizer = make_sanitizer(DETERMINISTIC, default_spec, seed=derive_seed(GLOBAL_SEED, "plug-unet", alpha))
        sanitizer, log = train_plug_and_play(sanitizer, utility, privacy, prior, train, _plug_cfg(alpha))
        out[alpha] = (sanitizer, log)
    return out


def _adv_cfg(arch, alpha):
    return TrainConfig(mode="adversarial", alpha=alpha, epochs=ADV_EPOCHS, batch_size=64,
                       lr_privacy_head=ADV_HEAD_LR, seed=derive_seed(GLOBAL_SEED, "adv", arch, alpha))


def _train_adv(arch, alpha, dataset, spec, baselines, prior):
    train, _ = dataset
    utility, privacy = baselines
    sanitizer = make_sanitizer(arch, spec, seed=derive_seed(GLOBAL_SEED, "adv-unet", arch, alpha))
    return train_adversarial(sanitizer, utility, privacy, prior, train, _adv_cfg(arch, alpha))


@pytest.fixture(scope="session")
def adv_det_08(dataset, default_spec, baselines, prior):
    """(sanitizer, adversarial privacy classifier, log) at alpha 0.8, deterministic."""
    return _train_adv(DETERMINISTIC, 0.8, dataset, default_spec, baselines, prior)


@pytest.fixture(scope="session")
def adv_stoch_08(dataset, default_spec, baselines, prior):
    return _train_adv(STOCHASTIC, 0.8, dataset, default_spec, baselines, prior)


@pytest.fixture(scope="session")
def plug_stoch_08(dataset, default_spec, baselines, prior):
    """Stochastic plug-and-play counterpart for the attack comparison."""
    train, _ = dataset
    utility, privacy = baselines
    sanitizer = make_sanitizer(STOCHASTIC, default_spec, seed=derive_seed(GLOBAL_SEED, "plug-stoch-unet", 0.8))
    cfg = TrainConfig(mode="plug_and_play", alpha=0.8, epochs=PLUG_EPOCHS, batch_size=64,
                      seed=derive_seed(GLOBAL_SEED, "plug-stoch", 0.8))
    return train_plug_and_play(sanitizer, utility, privacy, prior, train, cfg)
