"""Training orchestration: determinism, schedules, rewiring, evaluation."""

from __future__ import annotations

import io
import math

import numpy as np
import pytest

from fanin.clustering import balanced_kmeans, build_label_features
from fanin.data import compute_propensities, generate_synthetic
from fanin.errors import ConfigError
from fanin.model import ModelConfig, model_forward
from fanin.rewire import RewireConfig
from fanin.train import (Telemetry, TrainConfig, evaluate, evaluate_meta,
                         train)


def small_config(**overrides) -> TrainConfig:
    base = dict(
        epochs=3, batch_size=16, lr_encoder=1e-3, lr_classifier=5e-3,
        warmup_steps=5, dropout=0.0, seed=7, precision="float64",
        rewire=RewireConfig(mode="fraction", rewire_fraction=0.3, interval=10),
        model=ModelConfig(encoder_dims=(16,), fan_in=4, loss="squared_hinge"),
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_sets():
    train_set = generate_synthetic(120, 30, 40, 1.1, 2, seed=50)
    test_set = generate_synthetic(40, 30, 40, 1.1, 2, seed=51)
    return train_set, test_set


class TestTrainBasics:
    def test_zero_epochs(self, tiny_sets):
        train_set, _ = tiny_sets
        model, telemetry = train(train_set, None, None, small_config(epochs=0))
        assert telemetry.records == []
        assert model.head.rows == 30

    def test_zero_rewire_fraction_keeps_topology(self, tiny_sets):
        train_set, _ = tiny_sets
        cfg0 = small_config(epochs=0)
        init_model, _ = train(train_set, None, None, cfg0)
        cfg = small_config(
            rewire=RewireConfig(mode="fraction", rewire_fraction=0.0,
                                interval=5))
        final_model, telemetry = train(train_set, None, None, cfg)
        np.testing.assert_array_equal(init_model.head.indices,
                                      final_model.head.indices)
        assert all(st.pruned == 0 for st in telemetry.rewires)

    def test_rewiring_changes_topology_and_keeps_invariants(self, tiny_sets):
        train_set, _ = tiny_sets
        cfg0 = small_config(epochs=0)
        init_model, _ = train(train_set, None, None, cfg0)
        cfg = small_config()
        model, telemetry = train(train_set, None, None, cfg)
        assert telemetry.rewires, "rewire events expected"
        assert any(st.pruned > 0 for st in telemetry.rewires)
        assert not np.array_equal(init_model.head.indices, model.head.indices)
        model.head.validate()

    def test_telemetry_monotone_and_complete(self, tiny_sets):
        train_set, _ = tiny_sets
        cfg = small_config()
        _, telemetry = train(train_set, None, None, cfg)
        steps = [r.step for r in telemetry.records]
        assert steps == sorted(steps)
        spe = math.ceil(120 / cfg.batch_size)
        assert len(steps) == cfg.epochs * spe
        assert all(np.isfinite(r.grad_norm_encoder) for r in telemetry.records)

    def test_warmup_longer_than_run_rejected(self, tiny_sets):
        train_set, _ = tiny_sets
        with pytest.raises(ConfigError):
            train(train_set, None, None, small_config(warmup_steps=10_000))

    def test_aux_requires_clustering(self, tiny_sets):
        train_set, _ = tiny_sets
        cfg = small_config(model=ModelConfig(encoder_dims=(16,), fan_in=4,
                                             aux_enabled=True))
        with pytest.raises(ConfigError):
            train(train_set, None, None, cfg)


class TestDeterminism:
    def run_once(self, train_set, clustering=None, **overrides) -> str:
        cfg = small_config(**overrides)
        _, telemetry = train(train_set, None, clustering, cfg)
        buf = io.StringIO()
        telemetry.write_csv(buf)
        return buf.getvalue()

    def test_bitwise_identical_telemetry_float64(self, tiny_sets):
        train_set, _ = tiny_sets
        assert self.run_once(train_set) == self.run_once(train_set)

    def test_seed_changes_trajectory(self, tiny_sets):
        train_set, _ = tiny_sets
        assert self.run_once(train_set) != self.run_once(train_set, seed=8)

    def test_dropout_still_deterministic(self, tiny_sets):
        train_set, _ = tiny_sets
        a = self.run_once(train_set, dropout=0.3)
        assert a == self.run_once(train_set, dropout=0.3)


@pytest.fixture(scope="module")
def aux_run(tiny_sets):
    train_set, test_set = tiny_sets
    feats = build_label_features(train_set)
    clustering = balanced_kmeans(feats, 4, seed=1)
    cfg = small_config(
        epochs=4,
        model=ModelConfig(encoder_dims=(16,), fan_in=4,
                          aux_enabled=True, aux_cutoff_epoch=2,
                          loss="squared_hinge"))
    model, telemetry = train(train_set, test_set, clustering, cfg)
    return model, telemetry, clustering, cfg


class TestAuxLoop:

    def test_meta_backward_stops_at_cutoff(self, aux_run, tiny_sets):
        _, telemetry, _, cfg = aux_run
        spe = math.ceil(120 / cfg.batch_size)
        # epochs 0 and 1 have scale > 0 (cutoff 2), epochs 2,3 have scale 0
        assert telemetry.aux_backward_steps == 2 * spe
        for rec in telemetry.records:
            if rec.epoch >= 2:
                assert rec.aux_scale == 0.0
                assert rec.loss_meta == 0.0
            else:
                assert rec.aux_scale > 0.0
                assert rec.loss_meta > 0.0

    def test_eval_history_per_epoch(self, aux_run):
        _, telemetry, _, cfg = aux_run
        assert len(telemetry.evals) == cfg.epochs
        assert all("P@1" in e for e in telemetry.evals)

    def test_meta_head_evaluation(self, aux_run, tiny_sets):
        model, _, clustering, _ = aux_run
        _, test_set = tiny_sets
        rep = evaluate_meta(model, test_set, clustering, ks=(1,))
        assert 0.0 <= rep["metaP@1"] <= 1.0


class TestEvaluate:
    def test_perfect_predictor(self, rng):
        # features are one-hot of the true label; identity encoder plus
        # identity head score the truth exactly
        from conftest import make_dataset
        from fanin.layer import from_dense
        n_labels = 8
        rows = [{int(l): 1.0} for l in rng.integers(0, n_labels, size=20)]
        labels = [[next(iter(r))] for r in rows]
        ds = make_dataset(rows, labels, d_in=n_labels, L=n_labels)
        cfg = small_config(epochs=0,
                           model=ModelConfig(encoder_dims=(n_labels,), fan_in=2))
        model, _ = train(ds, None, None, cfg)
        model.encoder.weights[0][:] = np.eye(n_labels)
        model.encoder.biases[0][:] = 0
        model.head = from_dense(np.eye(n_labels), 2)
        rep = evaluate(model, ds, ks=(1,))
        assert rep["P@1"] == 1.0

    def test_random_scores_match_combinatorics(self, rng):
        # random model ranks uniformly; P@1 expectation = Lbar / L
        ds = generate_synthetic(2000, 100, 16, 0.5, 5, seed=9)
        cfg = small_config(epochs=0,
                           model=ModelConfig(encoder_dims=(8,), fan_in=4))
        model, _ = train(ds, None, None, cfg)
        rep = evaluate(model, ds, ks=(1,))
        expect = 5 / 100
        sigma = math.sqrt(expect * (1 - expect) / 2000)
        assert abs(rep["P@1"] - expect) < 3 * sigma + 1e-9

    def test_unit_propensities_collapse_psp(self, tiny_sets):
        train_set, test_set = tiny_sets
        cfg = small_config(epochs=1)
        model, _ = train(train_set, None, None, cfg)
        rep = evaluate(model, test_set, ks=(1, 3),
                       propensities=np.ones(test_set.num_labels))
        assert rep["PSP@1"] == pytest.approx(rep["P@1"])
        assert rep["PSP@3"] == pytest.approx(rep["P@3"])

    def test_real_propensities_dominate(self, tiny_sets):
        train_set, test_set = tiny_sets
        cfg = small_config(epochs=1)
        model, _ = train(train_set, None, None, cfg)
        props = compute_propensities(train_set.label_counts(),
                                     train_set.num_instances)
        rep = evaluate(model, test_set, ks=(1, 3), propensities=props)
        assert rep["PSP@1"] >= rep["P@1"] - 1e-12


class TestLearnability:
    def test_training_beats_untrained_model(self):
        train_set = generate_synthetic(600, 60, 48, 1.1, 2, seed=21,
                                       noise=0.1)
        cfg = small_config(
            epochs=10, batch_size=32, lr_encoder=2e-3, lr_classifier=2e-2,
            warmup_steps=20,
            model=ModelConfig(encoder_dims=(24,), fan_in=6,
                              loss="squared_hinge"))
        untrained, _ = train(train_set, None, None,
                             small_config(epochs=0, model=cfg.model))
        base = evaluate(untrained, train_set, ks=(1,))["P@1"]
        model, _ = train(train_set, None, None, cfg)
        final = evaluate(model, train_set, ks=(1,))["P@1"]
        assert final > 10 * max(base, 1 / 60)


def test_moments_stay_congruent_after_training(tiny_sets):
    train_set, _ = tiny_sets
    cfg = small_config()
    model, telemetry = train(train_set, None, None, cfg)
    assert telemetry.rewires
    model.head.validate()


def test_telemetry_csv_format(tiny_sets):
    train_set, _ = tiny_sets
    _, telemetry = train(train_set, None, None, small_config(epochs=1))
    buf = io.StringIO()
    telemetry.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ("step,epoch,loss_extreme,loss_meta,aux_scale,"
                        "grad_norm_encoder,lr_enc,lr_clf")
    assert len(lines) == 1 + len(telemetry.records)
    assert lines[1].startswith("0,0,")
