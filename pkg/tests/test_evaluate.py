import csv
from types import SimpleNamespace

import numpy as np
import pytest

from ecgtransfer.evaluate import (
    EvalError,
    EvalReport,
    ExportError,
    confusion_matrix,
    evaluate,
    export_embeddings,
    report_mi_metrics,
)
from ecgtransfer.model import ArrhythmiaNet, ArrhythmiaNetConfig
from ecgtransfer.wfdb_io import BeatSet


class Fixed:
    """Stands in for a network with predetermined predictions."""

    def __init__(self, preds, n_classes=5):
        self.preds = np.asarray(preds)
        self.config = SimpleNamespace(n_classes=n_classes)

    def predict(self, beats, batch_size=512):
        return self.preds[: len(beats)]


def _beats(labels):
    return BeatSet(np.zeros((len(labels), 187)), labels)


def test_hand_built_ten_beat_fixture():
    truth = [0, 0, 0, 1, 1, 2, 2, 3, 4, 4]
    preds = [0, 0, 1, 1, 0, 2, 2, 3, 4, 3]
    # row = truth, column = prediction, tallied by hand
    expected = np.array([
        [2, 1, 0, 0, 0],
        [1, 1, 0, 0, 0],
        [0, 0, 2, 0, 0],
        [0, 0, 0, 1, 0],
        [0, 0, 0, 1, 1],
    ])
    r = evaluate(Fixed(preds), _beats(truth))
    np.testing.assert_array_equal(r.confusion, expected)
    assert r.accuracy == pytest.approx(0.7)
    np.testing.assert_allclose(r.precision, [2 / 3, 1 / 2, 1, 1 / 2, 1])
    np.testing.assert_allclose(r.recall, [2 / 3, 1 / 2, 1, 1, 1 / 2])
    assert r.macro_recall == pytest.approx((2 / 3 + 0.5 + 1 + 1 + 0.5) / 5)


def test_perfect_and_constant_predictors():
    labels = np.repeat(np.arange(5), 4)
    perfect = evaluate(Fixed(labels), _beats(labels))
    np.testing.assert_array_equal(perfect.confusion, 4 * np.eye(5, dtype=int))
    assert perfect.accuracy == 1.0
    const = evaluate(Fixed(np.zeros(20, int)), _beats(labels))
    assert const.accuracy == pytest.approx(0.2)
    assert const.precision.tolist() == [0.2, 0, 0, 0, 0]
    assert const.confusion.sum(axis=1).tolist() == [4] * 5


def test_label_out_of_space():
    with pytest.raises(EvalError):
        evaluate(Fixed([0, 0], n_classes=2), _beats([0, 3]))
    with pytest.raises(EvalError):
        confusion_matrix([0, 1], [0, 5], 5)


def test_mi_metrics():
    conf = np.array([[95, 5], [5, 95]])
    assert report_mi_metrics(EvalReport(conf, ("MI", "HC"))) == pytest.approx((0.95, 0.95, 0.95))
    nothing_positive = EvalReport(np.array([[0, 10], [0, 10]]), ("MI", "HC"))
    assert report_mi_metrics(nothing_positive) == (0.5, 0.0, 0.0)
    with pytest.raises(EvalError):
        report_mi_metrics(EvalReport(np.eye(3, dtype=int), tuple("abc")))


def test_macro_metrics_invariant_under_relabeling(rng):
    conf = rng.integers(0, 30, size=(5, 5))
    perm = rng.permutation(5)
    a = EvalReport(conf, tuple("NSVFQ"))
    b = EvalReport(conf[np.ix_(perm, perm)], tuple(np.array(list("NSVFQ"))[perm]))
    assert a.macro_precision == pytest.approx(b.macro_precision)
    assert a.macro_recall == pytest.approx(b.macro_recall)
    assert a.accuracy == pytest.approx(b.accuracy)


def test_report_text_and_csv(tmp_path):
    r = EvalReport(np.array([[3, 1], [0, 4]]), ("MI", "HC"))
    text = r.to_text()
    assert "0.75" in text and "accuracy         0.8750" in text
    r.to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["true\\predicted", "MI", "HC", "precision", "recall"]
    assert rows[1][:3] == ["MI", "3", "1"]


def test_evaluate_is_pure(rng):
    net = ArrhythmiaNet(seed=0)
    beats = BeatSet(rng.random((12, 187)), rng.integers(0, 5, 12))
    a, b = evaluate(net, beats), evaluate(net, beats)
    np.testing.assert_array_equal(a.confusion, b.confusion)


def test_export_embeddings(tmp_path, rng):
    net = ArrhythmiaNet(seed=0)
    x = rng.random((3, 187))
    beats = BeatSet(np.concatenate([x, x[:1]]), [1, 2, 3, 1])
    export_embeddings(net, beats, tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert len(rows) == 4 and all(len(r) == 65 for r in rows)
    assert rows[0] == rows[3]
    assert [r[-1] for r in rows] == ["1", "2", "3", "1"]
    np.testing.assert_allclose(np.array(rows[1][:64], float), net.embed(beats.samples[1]), rtol=1e-6)


def test_zero_backbone_gives_zero_embedding(tmp_path, rng):
    net = ArrhythmiaNet(ArrhythmiaNetConfig(), seed=0)
    for p in net.params.values():
        p.data[...] = 0
    export_embeddings(net, BeatSet(rng.random((2, 187)), [0, 1]), tmp_path / "z.csv")
    rows = list(csv.reader(open(tmp_path / "z.csv")))
    assert all(float(v) == 0.0 for r in rows for v in r[:64])


def test_export_io_error(tmp_path):
    with pytest.raises(ExportError):
        export_embeddings(ArrhythmiaNet(seed=0), _beats([0]), tmp_path / "missing" / "e.csv")
