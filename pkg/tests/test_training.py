"""Mechanics of the three trainers on a small fast dataset: freeze contracts,
alternation schedule, degenerate limits, divergence handling."""

import math

import numpy as np
import pytest
import torch

from privsan.data import DatasetSpec, generate_dataset
from privsan.errors import ConfigurationError, TrainingError
from privsan.models import (
    Classifier,
    DETERMINISTIC,
    STOCHASTIC,
    hash_parameters,
    make_sanitizer,
)
from privsan.training import (
    TrainConfig,
    TrainLog,
    derive_seed,
    pretrain_classifiers,
    train_adversarial,
    train_collaborative,
    train_plug_and_play,
)

SPEC = DatasetSpec(num_subjects=4, attribute_map=(0, 0, 1, 1), image_shape=(3, 16, 16),
                   train_size=128, test_size=64, seed=13)


@pytest.fixture(scope="module")
def small_world():
    train, test = generate_dataset(SPEC)
    cfg = TrainConfig(epochs=3, batch_size=32, seed=5)
    utility, privacy = pretrain_classifiers(train, SPEC, cfg)
    return train, test, utility, privacy, np.asarray(SPEC.prior)


class TestTrainConfig:
    def test_bad_mode(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(mode="finetune")

    def test_bad_alternation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(alternation_period=0)

    def test_bad_lr(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(lr_sanitizer=0.0)

    def test_zero_utility_lr_allowed(self):
        TrainConfig(lr_utility_head=0.0)


class TestTrainLog:
    def test_iterations_strictly_increasing(self):
        log = TrainLog()
        log.append(0, loss_s=1.0)
        log.append(1, loss_s=0.5)
        with pytest.raises(ConfigurationError):
            log.append(1, loss_s=0.4)

    def test_nonfinite_rejected(self):
        log = TrainLog()
        with pytest.raises(TrainingError):
            log.append(0, loss_s=float("nan"))

    def test_csv_round_trip(self, tmp_path):
        log = TrainLog()
        log.append(0, loss_s=0.25, component="sanitizer")
        log.append(1, loss_p=0.5, component="privacy")
        path = str(tmp_path / "log.csv")
        log.to_csv(path)
        back = TrainLog.from_csv(path)
        assert [(r.iteration, r.loss_s, r.loss_p, r.component) for r in back.records] == [
            (0, 0.25, None, "sanitizer"),
            (1, None, 0.5, "privacy"),
        ]


class TestPretrain:
    def test_zero_epochs_returns_fresh_models(self, small_world):
        train = small_world[0]
        cfg = TrainConfig(epochs=0, seed=5)
        utility, privacy = pretrain_classifiers(train, SPEC, cfg)
        ref_u = Classifier(3, (16, 16), 4, seed=derive_seed(cfg.seed, "utility-init"))
        ref_p = Classifier(3, (16, 16), 2, seed=derive_seed(cfg.seed, "privacy-init"))
        assert hash_parameters(utility) == hash_parameters(ref_u)
        assert hash_parameters(privacy) == hash_parameters(ref_p)

    def test_divergence_raises_training_error(self, small_world, monkeypatch):
        train = small_world[0]

        def bad_ce(*a, **k):
            return torch.tensor(float("nan"), requires_grad=True)

        monkeypatch.setattr(torch.nn.functional, "cross_entropy", bad_ce)
        with pytest.raises(TrainingError) as err:
            pretrain_classifiers(train, SPEC, TrainConfig(epochs=1, seed=5))
        assert err.value.log is not None


class TestPlugAndPlay:
    def test_classifiers_frozen_sanitizer_updated(self, small_world):
        train, _, utility, privacy, prior = small_world
        hu, hp = hash_parameters(utility), hash_parameters(privacy)
        sanitizer = make_sanitizer(DETERMINISTIC, SPEC, seed=1)
        hs = hash_parameters(sanitizer.unet)
        cfg = TrainConfig(mode="plug_and_play", alpha=0.5, epochs=2, batch_size=32, seed=2)
        sanitizer, log = train_plug_and_play(sanitizer, utility, privacy, prior, train, cfg)
        assert hash_parameters(utility) == hu
        assert hash_parameters(privacy) == hp
        assert hash_parameters(sanitizer.unet) != hs
        assert set(log.components()) == {"sanitizer"}
        assert np.isfinite(log.values("loss_s")).all()

    def test_stochastic_pipeline_runs(self, small_world):
        train, _, utility, privacy, prior = small_world
        sanitizer = make_sanitizer(STOCHASTIC, SPEC, seed=1)
        cfg = TrainConfig(mode="plug_and_play", alpha=0.5, epochs=1, batch_size=32, seed=2)
        _, log = train_plug_and_play(sanitizer, utility, privacy, prior, train, cfg)
        assert len(log.records) == math.ceil(len(train) / 32)

    def test_nan_loss_raises(self, small_world, monkeypatch):
        import privsan.training as T

        train, _, utility, privacy, prior = small_world

        def bad_loss(*a, **k):
            return torch.tensor(float("nan"), requires_grad=True)

        monkeypatch.setattr(T, "sanitization_loss", bad_loss)
        sanitizer = make_sanitizer(DETERMINISTIC, SPEC, seed=1)
        cfg = TrainConfig(mode="plug_and_play", alpha=0.5, epochs=1, batch_size=32, seed=2)
        with pytest.raises(TrainingError) as err:
            train_plug_and_play(sanitizer, utility, privacy, prior, train, cfg)
        assert isinstance(err.value.log, TrainLog)


class TestAdversarial:
    def test_alternation_schedule_and_freeze(self, small_world):
        train, _, utility, privacy, prior = small_world
        hu, hp = hash_parameters(utility), hash_parameters(privacy)
        sanitizer = make_sanitizer(DETERMINISTIC, SPEC, seed=3)
        cfg = TrainConfig(mode="adversarial", alpha=0.8, epochs=4, batch_size=32, seed=4)
        sanitizer, adv_privacy, log = train_adversarial(sanitizer, utility, privacy, prior, train, cfg)

        per_epoch = math.ceil(len(train) / 32)
        comps = log.components()
        expected = (["sanitizer"] * per_epoch + ["privacy"] * per_epoch) * 2
        assert comps == expected
        # inputs untouched; returned attacker-side head is a fresh object on a shared backbone
        assert hash_parameters(utility) == hu
        assert hash_parameters(privacy) == hp
        assert adv_privacy is not privacy
        assert adv_privacy.features is privacy.features
        assert not torch.equal(adv_privacy.head.weight, privacy.head.weight)
        # sanitizer records carry loss_s, privacy records loss_p
        for r in log.records:
            assert (r.loss_s is None) == (r.component == "privacy")
            assert (r.loss_p is None) == (r.component == "sanitizer")

    def test_alternation_period_two(self, small_world):
        train, _, utility, privacy, prior = small_world
        sanitizer = make_sanitizer(DETERMINISTIC, SPEC, seed=3)
        cfg = TrainConfig(mode="adversarial", alpha=0.8, epochs=4, batch_size=64, seed=4,
                          alternation_period=2)
        _, _, log = train_adversarial(sanitizer, utility, privacy, prior, train, cfg)
        per_epoch = math.ceil(len(train) / 64)
        comps = log.components()
        assert comps == ["sanitizer"] * (2 * per_epoch) + ["privacy"] * (2 * per_epoch)


class TestCollaborative:
    def test_zero_utility_lr_degenerates_to_plug_and_play(self, small_world):
        train, _, utility, privacy, prior = small_world
        cfg_c = TrainConfig(mode="collaborative", alpha=0.5, epochs=2, batch_size=32, seed=6,
                            lr_utility_head=0.0)
        cfg_p = TrainConfig(mode="plug_and_play", alpha=0.5, epochs=2, batch_size=32, seed=6)
        san_c = make_sanitizer(DETERMINISTIC, SPEC, seed=7)
        san_p = make_sanitizer(DETERMINISTIC, SPEC, seed=7)
        _, co_utility, log_c = train_collaborative(san_c, utility, privacy, prior, train, cfg_c)
        _, log_p = train_plug_and_play(san_p, utility, privacy, prior, train, cfg_p)
        a, b = log_c.values("loss_s"), log_p.values("loss_s")
        assert np.allclose(a, b, rtol=1e-4, atol=1e-6)
        assert torch.equal(co_utility.head.weight, utility.head.weight)  # head never moved

    def test_backbone_untouched_and_shared(self, small_world):
        train, _, utility, privacy, prior = small_world
        hu = hash_parameters(utility)
        cfg = TrainConfig(mode="collaborative", alpha=0.2, epochs=2, batch_size=32, seed=8)
        san = make_sanitizer(DETERMINISTIC, SPEC, seed=9)
        _, co_utility, _ = train_collaborative(san, utility, privacy, prior, train, cfg)
        assert co_utility.features is utility.features
        assert hash_parameters(utility) == hu
        assert not torch.equal(co_utility.head.weight, utility.head.weight)
