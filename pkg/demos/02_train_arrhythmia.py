"""
Training the residual CNN on five beat classes
==============================================

Uses synthetic beats so the script runs anywhere in under a minute. With the
MIT-BIH records at hand, replace the first block by
``read_beats_csv("beats.csv")`` on the output of ``ecgtransfer ingest``.
"""

import numpy as np

from ecgtransfer.evaluate import evaluate
from ecgtransfer.model import ArrhythmiaNet
from ecgtransfer.synthetic import synthetic_beats
from ecgtransfer.train import TrainConfig, make_mitbih_split, train_arrhythmia

beats = synthetic_beats(120, seed=1)
print("beats per class:", beats.class_counts(5))

# Hold out min(819, half) per class, then oversample the remainder to balance it.
split = make_mitbih_split(beats, seed=0)
print("train:", split.train_counts, "test:", split.test_counts)

net = ArrhythmiaNet(seed=0)
print("weight layers:", net.config.weight_layers, "parameters:", net.parameter_count())
print("activation lengths per block:", net.config.stage_lengths())

config = TrainConfig(batch_size=32, max_iterations=300, log_interval=50)
net, history = train_arrhythmia(split.train, config, net=net)
for it, lr, loss, acc in history.rows():
    print(f"iter {it:4d}  lr {lr:.4g}  loss {loss:.3f}  acc {acc:.3f}")

report = evaluate(net, split.test)
print(report.to_text())

# Row-normalized view, the way confusion matrices are usually drawn.
print(np.round(report.normalized(), 2))
