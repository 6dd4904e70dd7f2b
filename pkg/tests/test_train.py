import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgtransfer.model import ArrhythmiaNet, parameter_digest
from ecgtransfer.synthetic import synthetic_beats
from ecgtransfer.train import (
    AdamState,
    DivergenceError,
    History,
    NonFiniteGradientError,
    ProtocolError,
    TrainConfig,
    adam_step,
    balance_classes,
    lr_schedule,
    make_mitbih_split,
    make_ptb_split,
    train_arrhythmia,
    train_mi,
)
from ecgtransfer.wfdb_io import BeatSet


@pytest.mark.parametrize("it,lr", [(0, 1e-3), (9999, 1e-3), (10000, 7.5e-4), (25000, 5.625e-4),
                                   (30000, 4.21875e-4)])
def test_lr_schedule_values(it, lr):
    assert lr_schedule(it) == pytest.approx(lr, rel=1e-15)


def test_lr_schedule_breakpoints_only_at_multiples():
    lrs = [lr_schedule(i) for i in range(0, 40001, 250)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    changes = [i * 250 for i in range(1, len(lrs)) if lrs[i] != lrs[i - 1]]
    assert changes == [10000, 20000, 30000, 40000]


def _adam_scalar(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return p


def test_adam_matches_scalar_oracle():
    grads = [0.5, -1.25, 2.0, 0.1, -0.3]
    p = {"w": np.array([1.0, 1.0])}
    state = AdamState()
    for g in grads:
        adam_step(p, {"w": np.array([g, 3 * g])}, state, lr=1e-3)
    assert p["w"][0] == pytest.approx(_adam_scalar(1.0, grads), abs=1e-15)
    assert p["w"][1] == pytest.approx(_adam_scalar(1.0, [3 * g for g in grads]), abs=1e-15)
    assert state.t == 5


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([0.0, 0.0])}
    adam_step(p, {"w": np.array([4.0, -0.01])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"], [-0.01, 0.01], rtol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 6))
def test_adam_zero_gradient_is_noop(seed, warmup):
    rng = np.random.default_rng(seed)
    p = {"a": rng.normal(size=3), "b": rng.normal(size=(2, 2))}
    state = AdamState()
    for _ in range(warmup):
        adam_step(p, {k: rng.normal(size=v.shape) for k, v in p.items()}, state, lr=1e-2)
    before = {k: v.copy() for k, v in p.items()}
    adam_step(p, {k: np.zeros_like(v) for k, v in p.items()}, state, lr=1e-2)
    for k in p:
        np.testing.assert_array_equal(p[k], before[k])


def test_adam_rejects_non_finite():
    with pytest.raises(NonFiniteGradientError, match="w"):
        adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, AdamState(), lr=1e-3)


def test_config_validation_and_strings():
    cfg = TrainConfig.from_mapping({"batch_size": "64", "learning_rate": "0.01", "balance": "none", "junk": "1"})
    assert (cfg.batch_size, cfg.learning_rate, cfg.balance) == (64, 0.01, "none")
    with pytest.raises(ValueError):
        TrainConfig(balance="smote")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(split_policy="random")


def _imbalanced(counts, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(c, k) for k, c in enumerate(counts)])
    ids = [f"{100 + i % 7}:{i}" for i in range(labels.size)]
    return BeatSet(rng.random((labels.size, 187)), labels, ids)


def test_balance_oversample():
    beats = _imbalanced([40, 5, 12])
    out = balance_classes(beats, seed=3)
    assert out.class_counts(3).tolist() == [40, 40, 40]
    np.testing.assert_array_equal(out.samples[:len(beats)], beats.samples)
    assert out.ids[:len(beats)] == beats.ids
    for i in range(len(beats), len(out)):
        src = beats.ids.index(out.ids[i].split("#")[0])
        orig, new = beats.samples[src], out.samples[i]
        assert 0.0 <= new.min() and new.max() <= 1.0
        ratio = new[(orig > 0.05) & (new < 1.0)] / orig[(orig > 0.05) & (new < 1.0)]
        assert np.all((ratio > 0.9 - 1e-5) & (ratio < 1.1 + 1e-5))
        assert np.ptp(ratio) < 1e-4          # one factor per copy


def test_balance_duplicate_and_none():
    beats = _imbalanced([10, 3])
    dup = balance_classes(beats, seed=0, mode="duplicate")
    for i in range(len(beats), len(dup)):
        src = beats.ids.index(dup.ids[i].split("#")[0])
        np.testing.assert_array_equal(dup.samples[i], beats.samples[src])
    assert balance_classes(beats, seed=0, mode="none") is beats


def test_balance_deterministic_and_empty_class():
    beats = _imbalanced([10, 3, 4])
    a, b = balance_classes(beats, 7), balance_classes(beats, 7)
    np.testing.assert_array_equal(a.samples, b.samples)
    with pytest.raises(ProtocolError):
        balance_classes(_imbalanced([10, 0, 3]), 0, n_classes=3)


def test_mitbih_split_counts_and_isolation():
    beats = _imbalanced([2000, 300, 1700, 120, 900])
    split = make_mitbih_split(beats, seed=0)
    # min(819, floor(count / 2)) per class
    assert split.test_counts.tolist() == [819, 150, 819, 60, 450]
    assert set(split.train.ids).isdisjoint(split.test.ids)
    assert not any("#aug" in i for i in split.test.ids)
    assert len(set(split.train_counts.tolist())) == 1
    originals = {i.split("#")[0] for i in split.train.ids}
    assert originals.isdisjoint(split.test.ids)
    assert len(originals) + len(split.test) == len(beats)


def test_mitbih_split_rejects_tiny_class():
    with pytest.raises(ProtocolError, match="class 3"):
        make_mitbih_split(_imbalanced([200, 200, 200, 49, 200]), seed=0)


def test_mitbih_split_inter_patient():
    split = make_mitbih_split(_imbalanced([400, 200, 300, 100, 150]), seed=1, policy="inter")
    assert set(split.train.subjects).isdisjoint(split.test.subjects)


def test_ptb_split_stratified_half_up():
    beats = _imbalanced([15, 13])
    split = make_ptb_split(beats, seed=0)
    # 0.8 * 15 = 12, 0.8 * 13 = 10.4 -> 10
    assert split.train_counts.tolist() == [12, 10]
    assert split.test_counts.tolist() == [3, 3]
    assert set(split.train.ids).isdisjoint(split.test.ids)
    assert make_ptb_split(_imbalanced([5, 5]), seed=0).train_counts.tolist() == [4, 4]


def test_history_rows_and_csv(tmp_path):
    h = History(log_interval=2)
    for i in range(5):
        h.append(i, 1e-3, 1.0 / (i + 1), float(i % 2))
    rows = h.rows()
    assert [r[0] for r in rows] == [0, 2, 4]
    assert [r[3] for r in rows] == [0.0, 0.5, 0.5]
    h.to_csv(tmp_path / "h.csv")
    with open(tmp_path / "h.csv") as fh:
        lines = list(csv.reader(fh))
    assert lines[0] == ["iteration", "lr", "loss", "interval_accuracy"]
    assert len(lines) == 4


def test_training_is_deterministic_and_learns():
    beats = synthetic_beats(8, seed=2)
    cfg = TrainConfig(batch_size=20, max_iterations=30, seed=4, log_interval=10)
    a, ha = train_arrhythmia(beats, cfg)
    b, hb = train_arrhythmia(beats, cfg)
    assert parameter_digest(a.params) == parameter_digest(b.params)
    assert ha.loss == hb.loss
    assert np.mean(ha.loss[-5:]) < ha.loss[0]


def test_divergence_is_reported():
    beats = synthetic_beats(2, seed=0)
    beats.samples[0, 0] = np.nan
    with pytest.raises(DivergenceError) as info:
        train_arrhythmia(beats, TrainConfig(batch_size=10, max_iterations=3))
    assert info.value.iteration == 0


def test_train_mi_updates_only_head():
    backbone = ArrhythmiaNet(seed=1)
    before = parameter_digest(backbone.params)
    beats = synthetic_beats(10, classes=("MI", "HC"), seed=3)
    mi, history = train_mi(backbone, beats, TrainConfig(batch_size=8, max_iterations=20))
    assert parameter_digest(mi.backbone.params) == before == history.metadata["backbone_digest"]
    assert history.metadata["updated_parameters"] == sorted(mi.params)


def test_empty_training_set():
    empty = BeatSet(np.zeros((0, 187)), np.zeros(0, np.int64), [])
    with pytest.raises(ProtocolError):
        train_arrhythmia(empty, TrainConfig(max_iterations=1))
