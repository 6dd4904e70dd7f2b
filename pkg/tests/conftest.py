import numpy as np
import pytest

from ecgtransfer.synthetic import synthetic_beats, synthetic_ecg, write_annotations, write_record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mit_record(tmp_path_factory):
    """Two-lead 360 Hz format-212 record with beat annotations plus a rhythm marker."""
    root = tmp_path_factory.mktemp("mit")
    x, pos, lab = synthetic_ecg(60, 360, list("NNAVNFN/"), seed=3)
    prefix = write_record(root, "100", [0.4 * x, x], 360, ["V5", "MLII"])
    events = list(zip(pos, lab))
    events.insert(3, (int(pos[2]) + 20, "+"))
    write_annotations(prefix, sorted(events, key=lambda e: e[0]))
    return prefix, x, pos, lab


@pytest.fixture(scope="session")
def ptb_record(tmp_path_factory):
    root = tmp_path_factory.mktemp("ptb") / "patient001"
    x, _, _ = synthetic_ecg(30, 1000, ["MI"], seed=4)
    prefix = write_record(root, "s0010_re", [0.2 * x, x, -x], 1000, ["i", "ii", "iii"], fmt=16,
                          gain=2000, comments=["age: 81", "Reason for admission: Myocardial infarction"])
    return prefix, x


@pytest.fixture(scope="session")
def five_class_beats():
    return synthetic_beats(60, seed=11)
