"""
From a WFDB record to fixed-length beats
========================================

Writes a small synthetic two-lead record in format 212, reads it back, and
walks through resampling, windowing, R-peak detection and beat cutting.
"""

import tempfile
from pathlib import Path

import numpy as np

from ecgtransfer.preprocess import (
    extract_beats,
    find_r_peaks,
    label_beats,
    nominal_period,
    normalize,
    rescale_events,
    resample,
    split_windows,
)
from ecgtransfer.synthetic import synthetic_ecg, write_annotations, write_record
from ecgtransfer.wfdb_io import read_annotations, read_record

workdir = Path(tempfile.mkdtemp())

# A 30 s record at 360 Hz, lead MLII in the second channel, with beat labels.
x, positions, symbols = synthetic_ecg(30, 360, list("NNVNANF/"), seed=0)
prefix = write_record(workdir, "demo", [0.3 * x, x], 360, ["V1", "MLII"])
write_annotations(prefix, list(zip(positions, symbols)))
print((workdir / "demo.hea").read_text())

record = read_record(prefix)
lead = record.lead_ii()
print("samples:", lead.size, "at", record.header.sampling_frequency, "Hz")

# Everything downstream runs at 125 Hz in 10 s windows.
x125 = resample(lead, record.header.sampling_frequency)
windows = split_windows(x125)
print("resampled length:", x125.size, "->", len(windows), "windows of", windows[0].size)

w = normalize(windows[0], "demo", 0)
peaks = find_r_peaks(w)
period = nominal_period(peaks)
print("R-peaks:", peaks)
print("median R-R:", period, "samples; beat span:", round(1.2 * period), "samples")

beats = extract_beats(w, peaks, period)
events = rescale_events(read_annotations(prefix), 360)
labeled = label_beats(beats, events)
print("beats in the first window:", len(beats), "labeled:", [b.label for b in labeled])

first = labeled[0].samples
print("first beat, every 10th sample:", np.round(first[::10], 2))
