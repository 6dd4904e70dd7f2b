"""
Command-line front end.

    ecgtransfer ingest   --records DIR_OR_PREFIX... --out DIR
    ecgtransfer train    --records beats.csv --out DIR
    ecgtransfer transfer --backbone model.ckpt --records ptb_beats.csv --out DIR
    ecgtransfer eval     --checkpoint model.ckpt --records beats.csv --out DIR
    ecgtransfer embed    --checkpoint model.ckpt --records beats.csv --out DIR
    ecgtransfer info     [--checkpoint model.ckpt]

Every command writes ``run_manifest.json`` into ``--out`` listing the config,
input and output digests and timings.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .evaluate import evaluate, export_embeddings, report_mi_metrics
from .model import MiNet, load, load_backbone, read_checkpoint, save
from .preprocess import ExtractionStats, beats_from_record, to_beat_set, write_manifest
from .train import TrainConfig, make_mitbih_split, make_ptb_split, train_arrhythmia, train_mi
from .wfdb_io import ARRHYTHMIA_CLASSES, MI_CLASSES, WfdbError, read_beats_csv, write_beats_csv

logger = logging.getLogger("ecgtransfer")

DEFAULTS = TrainConfig()

# flag dest -> TrainConfig field
_FLAG_FIELDS = {
    "seed": "seed",
    "batch_size": "batch_size",
    "iterations": "max_iterations",
    "lr": "learning_rate",
    "split_policy": "split_policy",
    "balance": "balance",
}


class UsageError(Exception):
    """Invalid combination of options or missing inputs."""


def read_config_file(path):
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{no}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve_config(args):
    """Defaults < config file < command-line flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
        if "iterations" in values:
            values["max_iterations"] = values.pop("iterations")
        if "lr" in values:
            values["learning_rate"] = values.pop("lr")
    for dest, name in _FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            values[name] = value
    try:
        return TrainConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out, command, config, inputs, outputs, timings):
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": config.seed if config else None,
        "config": config.as_dict() if config else {},
        "inputs": {str(p): file_digest(p) for p in sorted(inputs, key=str)},
        "outputs": {Path(p).name: file_digest(p) for p in sorted(outputs, key=str)},
        "timings": timings,
    }
    path = Path(out) / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _out_dir(args):
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _record_prefixes(paths):
    prefixes = []
    for p in map(Path, paths):
        if p.is_dir():
            prefixes += sorted(h.with_suffix("") for h in p.rglob("*.hea"))
        elif p.suffix == ".hea" and p.exists():
            prefixes.append(p.with_suffix(""))
        elif p.with_name(p.name + ".hea").exists():
            prefixes.append(p)
        else:
            raise UsageError(f"no record found at {p}")
    return prefixes


def _load_beats(args):
    if not args.records:
        raise UsageError("--records is required")
    if len(args.records) != 1:
        raise UsageError("expected a single beat CSV in --records")
    path = Path(args.records[0])
    if not path.is_file():
        raise UsageError(f"beat file {path} does not exist")
    return path, read_beats_csv(path)


def cmd_ingest(args):
    out = _out_dir(args)
    if not args.records:
        raise UsageError("--records is required")
    prefixes = _record_prefixes(args.records)
    if not prefixes:
        raise UsageError(f"no .hea records under {args.records}")
    roots = [Path(r) for r in args.records]
    stats = ExtractionStats()
    beats = []
    tasks = set()
    for prefix in prefixes:
        root = next((r for r in roots if r.is_dir() and r in prefix.parents), prefix.parent)
        record_id = prefix.relative_to(root).as_posix()
        try:
            rec_beats = beats_from_record(prefix, record_id, args.task, stats)
        except (WfdbError, ValueError, OSError) as exc:
            raise WfdbError(f"record {prefix}: {exc}") from exc
        beats += rec_beats
        tasks.update("mi" if b.label in MI_CLASSES else "arrhythmia" for b in rec_beats)
    if len(tasks) > 1:
        raise UsageError("records mix PTB (MI/HC) and arrhythmia labels; ingest them separately")
    classes = MI_CLASSES if tasks == {"mi"} else ARRHYTHMIA_CLASSES
    beat_set = to_beat_set(beats, classes)
    csv_path = out / "beats.csv"
    write_beats_csv(csv_path, beat_set)
    manifest_path = out / "beats.manifest"
    write_manifest(manifest_path, stats)
    logger.info("%d beats from %d records", len(beat_set), len(prefixes))
    inputs = []
    for prefix in prefixes:
        inputs += sorted(p for p in prefix.parent.glob(prefix.name + ".*") if p.suffix in (".hea", ".dat", ".atr"))
    return None, inputs, [csv_path, manifest_path]


def cmd_train(args):
    out = _out_dir(args)
    config = resolve_config(args)
    path, beats = _load_beats(args)
    if args.test_per_class > 0:
        split = make_mitbih_split(beats, config.seed, per_class=args.test_per_class,
                                  policy=config.split_policy, balance=config.balance)
        train_set = split.train
        test_path = out / "test_beats.csv"
        write_beats_csv(test_path, split.test)
        outputs = [test_path]
    else:
        from .train import balance_classes
        train_set = balance_classes(beats, config.seed + 1, len(ARRHYTHMIA_CLASSES), config.balance)
        outputs = []
    net, history = train_arrhythmia(train_set, config)
    ckpt = out / "model.ckpt"
    save(net, ckpt, iteration=config.max_iterations, seed=config.seed)
    hist = out / "history.csv"
    history.to_csv(hist)
    return config, [path], outputs + [ckpt, hist]


def cmd_transfer(args):
    if not args.backbone:
        raise UsageError("transfer needs --backbone <arrhythmia checkpoint>")
    out = _out_dir(args)
    config = resolve_config(args)
    backbone = load_backbone(args.backbone)
    path, beats = _load_beats(args)
    split = make_ptb_split(beats, config.seed, policy=config.split_policy)
    mi, history = train_mi(backbone, split.train, config)
    ckpt = out / "mi.ckpt"
    save(mi, ckpt, iteration=config.max_iterations, seed=config.seed)
    hist = out / "history.csv"
    history.to_csv(hist)
    test_path = out / "test_beats.csv"
    write_beats_csv(test_path, split.test)
    return config, [path, Path(args.backbone)], [ckpt, hist, test_path]


def cmd_eval(args):
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    out = _out_dir(args)
    net = load(args.checkpoint)
    path, beats = _load_beats(args)
    report = evaluate(net, beats)
    text = report.to_text()
    if isinstance(net, MiNet):
        acc, prec, rec = report_mi_metrics(report, positive=MI_CLASSES.index("MI"))
        text += f"MI accuracy      {acc:.4f}\nMI precision     {prec:.4f}\nMI recall        {rec:.4f}\n"
    txt, csv_path = out / "report.txt", out / "report.csv"
    txt.write_text(text)
    report.to_csv(csv_path)
    print(text, end="")
    return None, [path, Path(args.checkpoint)], [txt, csv_path]


def cmd_embed(args):
    if not args.checkpoint:
        raise UsageError("embed needs --checkpoint")
    out = _out_dir(args)
    net = load(args.checkpoint)
    path, beats = _load_beats(args)
    emb_path = out / "embeddings.csv"
    export_embeddings(net, beats, emb_path)
    return None, [path, Path(args.checkpoint)], [emb_path]


def cmd_info(args):
    if args.checkpoint:
        ckpt = read_checkpoint(args.checkpoint)
        n_params = sum(a.size for a in ckpt.tensors.values())
        print(f"checkpoint   {args.checkpoint}")
        print(f"kind         {ckpt.kind_name}")
        print(f"fingerprint  {ckpt.fingerprint.hex()}")
        print(f"iteration    {ckpt.iteration}")
        print(f"seed         {ckpt.seed}")
        print(f"tensors      {len(ckpt.tensors)} ({n_params} values)")
    else:
        print(f"ecgtransfer {__version__}")
        for key, value in DEFAULTS.as_dict().items():
            print(f"{key:<16} {value}")
    return None, [], []


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "info": cmd_info,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file (default: none)")
    common.add_argument("--seed", type=int, help=f"random seed (default: {DEFAULTS.seed})")
    common.add_argument("--records", nargs="+", help="record directories/prefixes, or a beat CSV (default: none)")
    common.add_argument("--out", help="output directory (default: none)")
    common.add_argument("--checkpoint", help="model checkpoint to read (default: none)")
    common.add_argument("--backbone", help="arrhythmia checkpoint to transfer from (default: none)")
    common.add_argument("--batch-size", type=int, help=f"minibatch size (default: {DEFAULTS.batch_size})")
    common.add_argument("--iterations", type=int,
                        help=f"training iterations (default: {DEFAULTS.max_iterations})")
    common.add_argument("--lr", type=float,
                        help=f"initial learning rate, decayed by {DEFAULTS.decay_factor} every "
                             f"{DEFAULTS.decay_interval} iterations (default: {DEFAULTS.learning_rate})")
    common.add_argument("--split-policy", choices=("intra", "inter"),
                        help=f"beat-level or subject-level split (default: {DEFAULTS.split_policy})")
    common.add_argument("--balance", choices=("oversample", "duplicate", "none"),
                        help=f"class balancing of the training set (default: {DEFAULTS.balance})")
    common.add_argument("--log-level", default="INFO", help="logging level (default: INFO)")

    parser = argparse.ArgumentParser(
        prog="ecgtransfer",
        description="ECG beat extraction, residual CNN arrhythmia training and MI transfer.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="extract labeled beats from WFDB records").add_argument(
        "--task", choices=("auto", "arrhythmia", "mi"), default="auto",
        help="label source: annotations or PTB admission reason (default: auto)")
    sub.add_parser("train", parents=[common], help="train the arrhythmia network").add_argument(
        "--test-per-class", type=int, default=819,
        help="beats per class held out for testing, 0 to train on everything (default: 819)")
    sub.add_parser("transfer", parents=[common], help="train the MI head on a frozen backbone")
    sub.add_parser("eval", parents=[common], help="confusion matrix and metrics")
    sub.add_parser("embed", parents=[common], help="export 64-d embeddings as CSV")
    sub.add_parser("info", parents=[common], help="show defaults or checkpoint details")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        config, inputs, outputs = COMMANDS[args.command](args)
        if args.command != "info":
            write_run_manifest(args.out, args.command, config, inputs, outputs,
                               {"wall_seconds": round(time.perf_counter() - start, 3)})
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced as a failed run, not a traceback
        logger.error("%s failed: %s", args.command, exc)
        logger.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
