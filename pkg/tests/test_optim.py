import math

import numpy as np
import pytest

from rifcn.model import ForwardStreamSpec, build_model, model_to_bytes
from rifcn.optim import (
    NadamState,
    NonFiniteLossError,
    SgdMomentumState,
    TrainConfig,
    nadam_step,
    sgd_momentum_step,
    split_train_val,
    train,
)


def scalar_params(value=1.0):
    return {"w": np.array([value])}


class TestSgdMomentum:
    def test_two_step_transcript(self):
        eta, gamma, g = 0.1, 0.9, 0.5
        p = scalar_params()
        state = SgdMomentumState(eta, gamma)
        sgd_momentum_step(p, {"w": np.array([g])}, state)
        assert p["w"][0] == pytest.approx(1 - eta * g)
        sgd_momentum_step(p, {"w": np.array([g])}, state)
        assert p["w"][0] == pytest.approx(1 - eta * g * (2 + gamma), abs=1e-15)

    def test_zero_momentum_is_plain_sgd(self, rng):
        p = {"w": rng.standard_normal((3, 4))}
        ref = p["w"].copy()
        state = SgdMomentumState(0.05, 0.0)
        for _ in range(4):
            g = rng.standard_normal((3, 4))
            sgd_momentum_step(p, {"w": g}, state)
            ref -= 0.05 * g
        np.testing.assert_allclose(p["w"], ref, rtol=0, atol=1e-15)

    def test_velocity_decays_geometrically(self):
        p = scalar_params()
        state = SgdMomentumState(0.1, 0.8)
        sgd_momentum_step(p, {"w": np.array([1.0])}, state)
        for k in range(1, 6):
            sgd_momentum_step(p, {"w": np.array([0.0])}, state)
            assert state.velocity["w"][0] == pytest.approx(0.1 * 0.8 ** k, rel=1e-12)

    def test_zero_gradient_from_rest_is_fixed_point(self, rng):
        p = {"a": rng.standard_normal(5), "b": rng.standard_normal((2, 2))}
        before = {k: v.copy() for k, v in p.items()}
        state = SgdMomentumState()
        for _ in range(3):
            sgd_momentum_step(p, {k: np.zeros_like(v) for k, v in p.items()}, state)
        for k in p:
            assert np.array_equal(p[k], before[k])

    def test_bad_momentum(self):
        with pytest.raises(ValueError):
            SgdMomentumState(0.1, 1.0)

    def test_mismatched_gradient(self):
        with pytest.raises(ValueError):
            sgd_momentum_step(scalar_params(), {"w": np.zeros(2)}, SgdMomentumState())
        with pytest.raises(ValueError):
            sgd_momentum_step(scalar_params(), {}, SgdMomentumState())


class TestNadam:
    def test_first_step_frozen_value(self):
        p = scalar_params()
        state = NadamState()
        nadam_step(p, {"w": np.array([1.0])}, state)
        assert state.t == 1
        assert state.mu_product == pytest.approx(0.45007347359129607, rel=1e-14)
        assert p["w"][0] == pytest.approx(0.9997887096464418, abs=1e-15)

    def test_first_step_hand_derivation(self):
        # independent of the implementation: with m = (1-b1) g, v = (1-b2) g^2
        b1, b2, d, eta, g = 0.9, 0.999, 0.004, 2e-4, 1.0
        mu1 = b1 * (1 - 0.5 * 0.96 ** (1 * d))
        mu2 = b1 * (1 - 0.5 * 0.96 ** (2 * d))
        m_bar = (1 - mu1) * g / (1 - mu1) + mu2 * (1 - b1) * g / (1 - mu1 * mu2)
        v_hat = (1 - b2) * g * g / (1 - b2)
        expected = 1.0 - eta * m_bar / (math.sqrt(v_hat) + 1e-8)
        p = scalar_params()
        nadam_step(p, {"w": np.array([g])}, NadamState())
        assert p["w"][0] == pytest.approx(expected, abs=1e-15)

    def test_zero_gradient_from_rest_is_fixed_point(self, rng):
        p = {"w": rng.standard_normal((4, 3))}
        before = p["w"].copy()
        state = NadamState()
        for _ in range(5):
            nadam_step(p, {"w": np.zeros((4, 3))}, state)
        assert np.array_equal(p["w"], before)

    @pytest.mark.parametrize("seed", range(5))
    def test_step_is_bounded(self, seed):
        rng = np.random.default_rng(seed)
        p = {"w": np.zeros(50)}
        state = NadamState(eta=1e-3)
        for _ in range(50):
            prev = p["w"].copy()
            g = rng.standard_normal(50) * 10.0 ** rng.uniform(-6, 6)
            nadam_step(p, {"w": g}, state)
            assert np.all(np.abs(p["w"] - prev) <= 1e-3 * 1.5 / (1 - 0.9))

    def test_shared_schedule_across_parameters(self):
        p = {"a": np.ones(1), "b": np.ones(1)}
        state = NadamState()
        nadam_step(p, {"a": np.ones(1), "b": np.ones(1)}, state)
        assert p["a"][0] == p["b"][0]
        assert state.t == 1


def tiny_dataset(n=6, size=16, seed=0):
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(n):
        labels = np.zeros((size, size), dtype=np.int64)
        r, c = rng.integers(0, size // 2, 2)
        labels[r:r + size // 2, c:c + size // 2] = 1
        img = np.stack([labels * 0.6 + 0.2, 0.5 - labels * 0.3, np.full(labels.shape, 0.4)])
        data.append((img + rng.normal(0, 0.05, img.shape), labels))
    return data


def tiny_model(seed=0, m=2):
    return build_model(ForwardStreamSpec(2, (4, 8, 16), 3), m, seed=seed)


class TestTrain:
    def test_split_sizes(self, rng):
        tr, va = split_train_val(20, 0.1, rng)
        assert len(va) == 2 and len(tr) == 18
        assert sorted(np.concatenate([tr, va]).tolist()) == list(range(20))
        tr, va = split_train_val(2, 0.1, rng)
        assert len(va) == 1 and len(tr) == 1
        tr, va = split_train_val(1, 0.5, rng)
        assert len(va) == 0 and len(tr) == 1

    def test_loss_decreases(self):
        m = tiny_model()
        rep = train(m, tiny_dataset(), TrainConfig(epochs=15, batch_size=2, lr=5e-3,
                                                   early_stop_patience=None, augment=False))
        assert rep.epochs[-1].train_loss < rep.epochs[0].train_loss

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            m = tiny_model()
            rep = train(m, tiny_dataset(), TrainConfig(epochs=3, batch_size=2, lr=1e-3))
            runs.append((model_to_bytes(m), rep.to_csv()))
        assert runs[0] == runs[1]

    def test_patience_zero_stops_after_first_worse_epoch(self):
        m = tiny_model()
        rep = train(m, tiny_dataset(), TrainConfig(epochs=40, batch_size=2, lr=0.5,
                                                   early_stop_patience=0))
        losses = [e.val_loss for e in rep.epochs]
        assert rep.stopped_early
        assert losses[-1] >= min(losses[:-1])
        assert all(b < a for a, b in zip(losses[:-2], losses[1:-1]))

    def test_restores_best_parameters(self):
        from rifcn.optim import evaluate

        data = tiny_dataset()
        m = tiny_model()
        cfg = TrainConfig(epochs=12, batch_size=2, lr=0.05, early_stop_patience=2)
        rep = train(m, data, cfg)
        best = min(e.val_loss for e in rep.epochs)
        assert rep.epochs[rep.best_epoch - 1].val_loss == best
        images = np.stack([d[0] for d in data]).astype(np.float32)
        labels = np.stack([d[1] for d in data])
        _, va = split_train_val(len(data), cfg.val_fraction, np.random.default_rng(cfg.seed))
        assert evaluate(m, images[va], labels[va])[0] == pytest.approx(best, rel=1e-6)

    def test_csv_columns(self):
        rep = train(tiny_model(), tiny_dataset(4), TrainConfig(epochs=2, batch_size=2))
        lines = rep.to_csv().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,train_acc,val_acc"
        assert len(lines) == 3 and lines[1].startswith("1,")

    def test_divergence_raises(self):
        with pytest.raises(NonFiniteLossError):
            train(tiny_model(), tiny_dataset(), TrainConfig(epochs=5, batch_size=2, lr=1e6))

    def test_patch_divisibility(self):
        data = [(np.zeros((3, 10, 10)), np.zeros((10, 10), dtype=int))]
        with pytest.raises(ValueError, match="divisible"):
            train(tiny_model(), data, TrainConfig(epochs=1))

    def test_sigmoid_head_trains(self):
        m = tiny_model(m=1)
        rep = train(m, tiny_dataset(), TrainConfig(epochs=10, batch_size=2, lr=5e-3,
                                                   early_stop_patience=None))
        assert rep.epochs[-1].train_loss < rep.epochs[0].train_loss

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainConfig(val_fraction=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(early_stop_patience=-1)
