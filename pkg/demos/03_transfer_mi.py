"""
Reusing the arrhythmia features for MI detection
================================================

The arrhythmia network is frozen; only a small head on its 64-value embedding
is trained. The backbone digest is the same before and after.
"""

import tempfile
from pathlib import Path

from ecgtransfer.evaluate import evaluate, report_mi_metrics
from ecgtransfer.model import load_backbone, parameter_digest, save
from ecgtransfer.synthetic import synthetic_beats
from ecgtransfer.train import TrainConfig, make_ptb_split, train_arrhythmia, train_mi

workdir = Path(tempfile.mkdtemp())

arrhythmia = synthetic_beats(40, seed=2)
net, _ = train_arrhythmia(arrhythmia, TrainConfig(batch_size=32, max_iterations=150, log_interval=0))
save(net, workdir / "backbone.ckpt", iteration=150)

backbone = load_backbone(workdir / "backbone.ckpt")
digest = parameter_digest(backbone.params)

mi_beats = synthetic_beats(150, classes=("MI", "HC"), seed=3)
split = make_ptb_split(mi_beats, seed=0)
print("MI/HC train:", split.train_counts, "test:", split.test_counts)

mi, history = train_mi(backbone, split.train, TrainConfig(batch_size=64, max_iterations=400, log_interval=0))
print("head parameters:", mi.parameter_count(), history.metadata["updated_parameters"])
print("backbone unchanged:", parameter_digest(mi.backbone.params) == digest)

report = evaluate(mi, split.test)
accuracy, precision, recall = report_mi_metrics(report)
print(f"accuracy {accuracy:.3f}  precision {precision:.3f}  recall {recall:.3f}")
