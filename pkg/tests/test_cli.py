import json
import shutil

import numpy as np
import pytest

from ecgtransfer.cli import UsageError, build_parser, main, read_config_file, resolve_config
from ecgtransfer.evaluate import evaluate
from ecgtransfer.model import load
from ecgtransfer.wfdb_io import read_beats_csv

FLAGS = ["--config", "--seed", "--records", "--out", "--checkpoint", "--backbone", "--batch-size",
         "--iterations", "--lr", "--split-policy", "--balance"]


@pytest.fixture(scope="module")
def ingested(mit_record, tmp_path_factory):
    prefix, *_ = mit_record
    out = tmp_path_factory.mktemp("ingest")
    assert main(["ingest", "--records", str(prefix.parent), "--out", str(out), "--log-level", "WARNING"]) == 0
    return out


def _run(*argv):
    return main([*map(str, argv), "--log-level", "WARNING"])


def test_help_lists_flags_and_defaults(capsys):
    for cmd in ("train", "transfer"):
        with pytest.raises(SystemExit):
            build_parser().parse_args([cmd, "--help"])
        text = " ".join(capsys.readouterr().out.split())
        for flag in FLAGS:
            assert flag in text
        for default in ("(default: 0.001)", "(default: 128)", "(default: 30000)", "0.75 every 10000",
                        "(default: intra)", "(default: oversample)"):
            assert default in text


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nbatch_size = 16\nlr = 0.01\nseed = 5\n")
    assert read_config_file(cfg) == {"batch_size": "16", "lr": "0.01", "seed": "5"}
    args = build_parser().parse_args(["train", "--config", str(cfg), "--seed", "9"])
    c = resolve_config(args)
    assert (c.batch_size, c.learning_rate, c.seed, c.max_iterations) == (16, 0.01, 9, 30000)


def test_config_file_errors(tmp_path):
    (tmp_path / "bad.cfg").write_text("batch_size 16\n")
    with pytest.raises(UsageError):
        read_config_file(tmp_path / "bad.cfg")
    (tmp_path / "neg.cfg").write_text("batch_size = -1\n")
    assert _run("train", "--config", tmp_path / "neg.cfg", "--records", "x.csv", "--out", tmp_path) == 2


def test_transfer_without_backbone_is_usage_error(tmp_path, capsys):
    assert _run("transfer", "--records", "b.csv", "--out", tmp_path) == 2
    assert "--backbone" in capsys.readouterr().err


def test_ingest_empty_directory(tmp_path):
    (tmp_path / "empty").mkdir()
    assert _run("ingest", "--records", tmp_path / "empty", "--out", tmp_path / "o") == 2


def test_ingest_outputs(ingested):
    beats = read_beats_csv(ingested / "beats.csv")
    assert len(beats) > 50 and set(beats.labels.tolist()) == {0, 1, 2, 3, 4}
    assert all(i.startswith("100:") for i in beats.ids)
    manifest = json.loads((ingested / "run_manifest.json").read_text())
    assert set(manifest["outputs"]) == {"beats.csv", "beats.manifest"}
    assert any(k.endswith("100.dat") for k in manifest["inputs"])


def test_train_then_eval_reproduces_library_report(ingested, tmp_path):
    beats = ingested / "beats.csv"
    tr = tmp_path / "train"
    assert _run("train", "--records", beats, "--out", tr, "--iterations", 5, "--batch-size", 16,
                "--test-per-class", 0) == 0
    assert _run("eval", "--checkpoint", tr / "model.ckpt", "--records", beats, "--out", tmp_path / "ev") == 0
    report = evaluate(load(tr / "model.ckpt"), read_beats_csv(beats))
    assert (tmp_path / "ev" / "report.txt").read_text() == report.to_text()
    assert _run("embed", "--checkpoint", tr / "model.ckpt", "--records", beats, "--out", tmp_path / "em") == 0
    emb = np.loadtxt(tmp_path / "em" / "embeddings.csv", delimiter=",")
    assert emb.shape == (len(read_beats_csv(beats)), 65)


def test_same_seed_same_manifest(ingested, tmp_path):
    manifests = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert _run("train", "--records", ingested / "beats.csv", "--out", out, "--iterations", 3,
                    "--batch-size", 8, "--seed", 11, "--test-per-class", 0) == 0
        m = json.loads((out / "run_manifest.json").read_text())
        m.pop("timings")
        manifests.append(m)
    assert manifests[0] == manifests[1]


def test_protocol_failure_exits_nonzero(ingested, tmp_path):
    # the fixture record has far fewer than 50 F beats
    assert _run("train", "--records", ingested / "beats.csv", "--out", tmp_path, "--iterations", 1) == 1
    assert not (tmp_path / "run_manifest.json").exists()


def test_transfer_and_info(ingested, ptb_record, tmp_path, capsys):
    prefix, _ = ptb_record
    ptb_dir = tmp_path / "ptb"
    shutil.copytree(prefix.parent, ptb_dir / "patient001")
    shutil.copytree(prefix.parent, ptb_dir / "patient002")
    for hea in (ptb_dir / "patient002").glob("*.hea"):
        hea.write_text(hea.read_text().replace("Myocardial infarction", "Healthy control"))
    assert _run("ingest", "--records", ptb_dir, "--out", tmp_path / "pi") == 0
    tr = tmp_path / "tr"
    assert _run("train", "--records", ingested / "beats.csv", "--out", tr, "--iterations", 2,
                "--batch-size", 8, "--test-per-class", 0) == 0
    assert _run("transfer", "--backbone", tr / "model.ckpt", "--records", tmp_path / "pi" / "beats.csv",
                "--out", tmp_path / "tx", "--iterations", 5, "--batch-size", 8) == 0
    assert (tmp_path / "tx" / "mi.ckpt").exists()
    capsys.readouterr()
    assert _run("info", "--checkpoint", tmp_path / "tx" / "mi.ckpt") == 0
    out = capsys.readouterr().out
    assert "kind         mi" in out and "iteration    5" in out
