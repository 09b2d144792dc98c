import json
import math

import numpy as np
import pytest

from audiocl import trainer
from audiocl.augment import Augmenter, RirBank
from audiocl.autograd import Tensor
from audiocl.data import synth_dataset
from audiocl.nn import AdamW, build_model
from audiocl.trainer import (
    ConfigError,
    CVResult,
    EpochMetrics,
    Experiment,
    NonFiniteLossError,
    RunConfig,
    assemble_triplet_batch,
    evaluate,
    lr_at,
    metrics_csv,
    model_config_for,
    paper_config,
    read_metrics_csv,
    standard_error,
    track_jsd,
    train_fold,
    train_steps,
    write_run,
)

SMALL = dict(per_class=10, duration=0.5, sample_rate=8000, n_fft=512, hop=256, n_mels=16,
             channels=(4, 8), rir_bank_size=8, batch_size=4, epochs=2)


@pytest.fixture(scope="module")
def small_cfg():
    return RunConfig(**SMALL)


@pytest.fixture(scope="module")
def exp(small_cfg):
    return Experiment.from_config(small_cfg)


class TestConfig:
    def test_defaults_validate(self):
        cfg = RunConfig()
        assert cfg.regime == "cl" and cfg.policy == "combination"

    @pytest.mark.parametrize("key,value", [("regime", "mixup"), ("lr", 0.0), ("epochs", 0),
                                           ("policy", "noise"), ("lr_decay", 1.5)])
    def test_error_names_key(self, key, value):
        with pytest.raises(ConfigError) as info:
            RunConfig(**{key: value})
        assert info.value.key == key and key in str(info.value)

    def test_dict_round_trip(self):
        cfg = RunConfig(name="x", channels=(2, 3), lr=1e-3)
        assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            RunConfig.from_dict({"learning_rate": 1.0})
        assert info.value.key == "learning_rate"

    def test_triplet_batches_are_three_times_n(self):
        cfg = paper_config()
        assert cfg.batch_elements() == 120
        assert lr_at(cfg.lr, 2) == pytest.approx(4.5e-4, rel=1e-12)
        assert RunConfig(regime="none", batch_size=16).batch_elements() == 16


class TestLrSchedule:
    def test_known_values(self):
        assert lr_at(5e-4, 0) == 5e-4
        assert lr_at(5e-4, 1) == 5e-4
        assert lr_at(5e-4, 3) == pytest.approx(4.5e-4, rel=1e-12)
        assert lr_at(5e-4, 10) == pytest.approx(0.000295245, rel=1e-12)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at(1e-3, -1)


class TestDataset:
    def test_default_counts_and_balanced_folds(self):
        ds = synth_dataset()
        assert len(ds) == 160 and ds.fold_ids == [0, 1, 2, 3, 4]
        for f in ds.fold_ids:
            train, held = ds.split(f)
            assert held.size == 32 and train.size == 128
            assert np.bincount(ds.labels[held], minlength=4).tolist() == [8, 8, 8, 8]
            assert not set(train) & set(held)

    def test_empty_fold(self):
        with pytest.raises(ValueError, match="no instances"):
            synth_dataset(per_class=5, n_classes=2).split(7)

    def test_deterministic(self):
        a = synth_dataset(per_class=2, rng=np.random.default_rng(3))
        b = synth_dataset(per_class=2, rng=np.random.default_rng(3))
        for wa, wb in zip(a.waveforms, b.waveforms):
            np.testing.assert_array_equal(wa.samples, wb.samples)


class TestTripletBatch:
    def test_sizes_and_originals(self, exp):
        idx = np.array([0, 3, 7, 11])
        tb = assemble_triplet_batch(exp, idx, np.random.default_rng(0))
        assert len(tb) == 4 and tb.stacked().shape == (12,) + exp.base.shape[1:]
        np.testing.assert_array_equal(tb.originals, exp.base[idx])
        np.testing.assert_array_equal(tb.labels, exp.labels[idx])

    def test_deterministic_given_rng(self, exp):
        idx = np.arange(6)
        for policy in ("pitch", "reverb", "tfmask", "combination"):
            a = assemble_triplet_batch(exp, idx, np.random.default_rng(5), policy)
            b = assemble_triplet_batch(exp, idx, np.random.default_rng(5), policy)
            np.testing.assert_array_equal(a.stacked(), b.stacked())

    def test_variants_differ_from_originals(self, exp):
        tb = assemble_triplet_batch(exp, np.arange(4), np.random.default_rng(1), "tfmask")
        assert not np.array_equal(tb.variants1, tb.originals) or not np.array_equal(tb.variants2, tb.originals)

    def test_empty(self, exp):
        with pytest.raises(ValueError):
            assemble_triplet_batch(exp, [], np.random.default_rng(0))


def _params(model):
    return [p.data.copy() for p in model.parameters()]


class TestTrainSteps:
    def test_cl_at_epoch_zero_equals_bda(self, exp, small_cfg):
        out = {}
        for regime in ("bda", "cl"):
            cfg = RunConfig(**{**SMALL, "regime": regime})
            model = build_model(model_config_for(cfg, 0))
            opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
            train_steps(model, opt, exp, exp.dataset.split(0)[0], cfg, epoch=0)
            out[regime] = _params(model)
        for a, b in zip(out["bda"], out["cl"]):
            np.testing.assert_array_equal(a, b)

    def test_every_regime_runs_and_is_deterministic(self, exp):
        train_idx = exp.dataset.split(1)[0]
        for regime in ("none", "standard", "bda", "cl"):
            runs = []
            for _ in range(2):
                cfg = RunConfig(**{**SMALL, "regime": regime})
                model = build_model(model_config_for(cfg, 1))
                opt = AdamW(model.parameters())
                loss = train_steps(model, opt, exp, train_idx, cfg, epoch=3, fold=1)
                runs.append((loss, _params(model)))
            assert math.isfinite(runs[0][0]) and runs[0][0] == runs[1][0]
            for a, b in zip(runs[0][1], runs[1][1]):
                np.testing.assert_array_equal(a, b)

    def test_batch_inputs_per_step(self, exp, monkeypatch):
        seen = []
        real = trainer.Model.forward

        def spy(self, x):
            seen.append(np.asarray(x).shape[0])
            return real(self, x)

        monkeypatch.setattr(trainer.Model, "forward", spy)
        monkeypatch.setattr(trainer.Model, "__call__", spy)
        train_idx = exp.dataset.split(0)[0]  # 32 instances, 8 full batches of 4
        for regime, per_step in (("cl", 12), ("bda", 12), ("none", 4)):
            seen.clear()
            cfg = RunConfig(**{**SMALL, "regime": regime})
            model = build_model(model_config_for(cfg, 0))
            train_steps(model, AdamW(model.parameters()), exp, train_idx, cfg, 0)
            assert seen == [per_step] * 8

    def test_batch_larger_than_split(self, exp):
        cfg = RunConfig(**{**SMALL, "batch_size": 1000})
        model = build_model(model_config_for(cfg, 0))
        with pytest.raises(ValueError, match="batch_size"):
            train_steps(model, AdamW(model.parameters()), exp, exp.dataset.split(0)[0], cfg, 0)

    def test_non_finite_loss_is_reported(self, exp, monkeypatch):
        monkeypatch.setattr(trainer.losses, "cross_entropy", lambda p, y: p.sum() * Tensor(math.nan))
        cfg = RunConfig(**{**SMALL, "regime": "none"})
        model = build_model(model_config_for(cfg, 0))
        with pytest.raises(NonFiniteLossError, match="epoch 0"):
            train_steps(model, AdamW(model.parameters()), exp, exp.dataset.split(0)[0], cfg, 0)

    def test_two_class_loss_decreases(self):
        cfg = RunConfig(**{**SMALL, "regime": "none", "n_classes": 2, "per_class": 20, "lr": 3e-3,
                           "batch_size": 8})
        e = Experiment.from_config(cfg)
        model = build_model(model_config_for(cfg, 0))
        opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
        train_idx = e.dataset.split(0)[0]
        epoch_losses = [train_steps(model, opt, e, train_idx, cfg, ep) for ep in range(5)]
        assert all(b < a for a, b in zip(epoch_losses, epoch_losses[1:])), epoch_losses


class TestEvaluation:
    def test_random_model_near_chance(self, exp, small_cfg):
        accs = []
        for seed in range(20):
            model = build_model(model_config_for(RunConfig(**{**SMALL, "seed": seed}), 0))
            accs.append(evaluate(model, exp.base, exp.labels))
        assert abs(np.mean(accs) - 25.0) <= 5.0

    def test_accuracy_ties_and_empty(self):
        probs = np.array([[0.5, 0.5], [0.2, 0.8]])
        assert trainer.accuracy(probs, [0, 1]) == 100.0
        with pytest.raises(ValueError):
            trainer.accuracy(np.zeros((0, 2)), [])

    def test_standard_error(self):
        assert standard_error([80, 90]) == pytest.approx(5.0)
        assert math.isnan(standard_error([80]))

    def test_track_jsd_bounds_and_mode(self, exp, small_cfg):
        model = build_model(model_config_for(small_cfg, 0))
        v = track_jsd(model, exp, np.arange(10), np.random.default_rng(0))
        assert 0 <= v <= math.log(3)
        assert model.training
        assert v == track_jsd(model, exp, np.arange(10), np.random.default_rng(0))


class TestTrainFold:
    def test_history_and_artifacts(self, exp, small_cfg, tmp_path):
        res = train_fold(exp, small_cfg, 2)
        assert [m.epoch for m in res.metrics] == [0, 1]
        assert res.metrics[1].lam == pytest.approx(0.5)
        assert res.metrics[0].lr == small_cfg.lr
        assert 0 <= res.accuracy <= 100
        manifest = json.loads(write_run(tmp_path, small_cfg, CVResult([res])).read_text())
        assert manifest["folds"][0]["fold"] == 2
        assert manifest["summary"]["standard_error"] is None
        assert RunConfig.from_dict(manifest["config"]) == small_cfg
        back = read_metrics_csv(tmp_path / "fold2" / "metrics.csv")
        assert [m.row() for m in back] == [m.row() for m in res.metrics]

    def test_metrics_csv_header(self):
        text = metrics_csv([EpochMetrics(0, 1.0, 0.1, 0.2, 50.0, 0.0, 1e-3)])
        assert text.splitlines()[0] == "epoch,train_loss,train_jsd,val_jsd,val_acc,lambda,lr"

    def test_malformed_csv(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_metrics_csv(tmp_path / "m.csv")


def test_experiment_accepts_custom_augmenter():
    ds = synth_dataset(n_classes=2, per_class=5, duration=0.3, sample_rate=8000)
    cfg = RunConfig(**{**SMALL, "n_classes": 2})
    e = Experiment(ds, cfg.features, Augmenter(cfg.features, RirBank(3, 8000)), "reverb")
    assert e.base.shape[0] == 10
