"""
Beat extraction from continuous ECG.

The pipeline: resample to 125 Hz, cut non-overlapping 10 s windows, min-max
normalize each window, take local maxima of the first difference that reach
0.9 as R-peaks, use the median R-R interval T as the nominal period and cut
``round(1.2 T)`` samples from each R-peak, zero-padded to a fixed length.
No filtering of any kind is applied.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .wfdb_io import (AnnotationEvent, BeatSet, map_symbol_to_class, ptb_class,
                      read_annotations, read_record)

logger = logging.getLogger(__name__)

TARGET_FS = 125
WINDOW_SECONDS = 10
WINDOW_LENGTH = TARGET_FS * WINDOW_SECONDS
BEAT_LENGTH = 187
PEAK_THRESHOLD = 0.9
REFRACTORY = 31          # 0.25 s at 125 Hz
LABEL_TOLERANCE = 19     # 0.15 s at 125 Hz
PERIOD_FACTOR = 1.2


class PreprocessError(ValueError):
    pass


class ConstantWindowError(PreprocessError):
    """Raised for a window with zero amplitude range."""


class TooFewPeaksError(PreprocessError):
    """A window with fewer than two R-peaks has no nominal period."""


@dataclass(frozen=True)
class Window:
    samples: np.ndarray
    record_id: str = ""
    start: int = 0

    def __post_init__(self):
        if len(self.samples) != WINDOW_LENGTH:
            raise PreprocessError(f"window length {len(self.samples)} != {WINDOW_LENGTH}")


@dataclass(frozen=True)
class Beat:
    samples: np.ndarray
    r_peak_index: int
    label: str | None = None
    subject_id: str = ""
    window_start: int = 0

    @property
    def record_position(self):
        """R-peak position on the 125 Hz record timeline."""
        return self.window_start + self.r_peak_index

    @property
    def beat_id(self):
        return f"{self.subject_id}:{self.record_position}"


def resample(signal, fs_in, fs_out=TARGET_FS):
    """Linear-interpolation resampling onto the ``fs_out`` grid.

    Output sample ``j`` sits at input position ``j * fs_in / fs_out``; the
    output has ``floor(len * fs_out / fs_in)`` samples.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise PreprocessError("cannot resample an empty signal")
    if fs_in <= 0:
        raise PreprocessError(f"sampling frequency must be positive, got {fs_in}")
    if fs_in == fs_out:
        return x.copy()
    n_out = math.floor(x.size * fs_out / fs_in)
    if float(fs_in).is_integer() and float(fs_out).is_integer():
        n_out = x.size * int(fs_out) // int(fs_in)
    positions = np.arange(n_out) * (fs_in / fs_out)
    return np.interp(positions, np.arange(x.size), x)


def split_windows(signal, length=WINDOW_LENGTH):
    """Consecutive non-overlapping windows; the short tail is dropped."""
    x = np.asarray(signal)
    n = x.size // length
    return [x[i * length:(i + 1) * length] for i in range(n)]


def normalize(window, record_id="", start=0):
    x = np.asarray(window, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        raise ConstantWindowError(f"constant window at {record_id}:{start}")
    return Window((x - lo) / (hi - lo), record_id, start)


def find_r_peaks(window, threshold=PEAK_THRESHOLD, refractory=REFRACTORY):
    """R-peak candidates: local maxima (first-difference sign change from
    positive to non-positive, leftmost index on plateaus) at or above
    ``threshold``; candidates closer than ``refractory`` samples are merged
    keeping the larger one (the earlier on ties).
    """
    x = window.samples if isinstance(window, Window) else np.asarray(window, dtype=np.float64)
    d = np.diff(x)
    idx = np.flatnonzero((d[:-1] > 0) & (d[1:] <= 0)) + 1
    idx = idx[x[idx] >= threshold]
    peaks = []
    for i in idx:
        if peaks and i - peaks[-1] < refractory:
            if x[i] > x[peaks[-1]]:
                peaks[-1] = int(i)
            continue
        peaks.append(int(i))
    return peaks


def nominal_period(peaks):
    """Median R-R interval in samples."""
    if len(peaks) < 2:
        raise TooFewPeaksError(f"{len(peaks)} peak(s): nominal period undefined")
    return float(np.median(np.diff(np.asarray(peaks, dtype=np.float64))))


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def extract_beats(window, peaks, period, length=BEAT_LENGTH, subject_id=None):
    """Cut ``round(1.2 * period)`` samples starting at every peak.

    Parts are truncated at the window end and at ``length``, then zero-padded
    to ``length``.
    """
    if period < 1:
        raise PreprocessError(f"nominal period must be >= 1 sample, got {period}")
    x = window.samples if isinstance(window, Window) else np.asarray(window, dtype=np.float64)
    start = window.start if isinstance(window, Window) else 0
    if subject_id is None:
        subject_id = window.record_id if isinstance(window, Window) else ""
    span = _round_half_up(PERIOD_FACTOR * period)
    beats = []
    for p in peaks:
        part = x[p:min(p + span, x.size)][:length]
        out = np.zeros(length, dtype=np.float32)
        out[:part.size] = part
        beats.append(Beat(out, int(p), None, subject_id, start))
    return beats


@dataclass
class ExtractionStats:
    windows: int = 0
    skipped_constant: int = 0
    skipped_few_peaks: int = 0
    beats: int = 0
    dropped_unlabeled: int = 0
    dropped_unmapped: int = 0
    class_counts: Counter = field(default_factory=Counter)

    def merge(self, other):
        for name in ("windows", "skipped_constant", "skipped_few_peaks", "beats",
                     "dropped_unlabeled", "dropped_unmapped"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        self.class_counts.update(other.class_counts)


def beats_from_signal(signal, fs, record_id="", stats=None):
    """Run the whole extraction on one lead of one record."""
    stats = stats if stats is not None else ExtractionStats()
    x = resample(signal, fs)
    beats = []
    for k, raw in enumerate(split_windows(x)):
        stats.windows += 1
        try:
            w = normalize(raw, record_id, k * WINDOW_LENGTH)
        except ConstantWindowError:
            stats.skipped_constant += 1
            continue
        peaks = find_r_peaks(w)
        try:
            period = nominal_period(peaks)
        except TooFewPeaksError:
            stats.skipped_few_peaks += 1
            continue
        beats.extend(extract_beats(w, peaks, period))
    stats.beats += len(beats)
    return beats


def rescale_events(events, fs_in, fs_out=TARGET_FS):
    """Map annotation sample indices onto the resampled timeline."""
    scale = fs_out / fs_in
    return [AnnotationEvent(_round_half_up(e.sample_index * scale), e.symbol) for e in events]


def label_beats(beats, events, tolerance=LABEL_TOLERANCE, stats=None):
    """Attach the AAMI class of the nearest annotation within ``tolerance``.

    Ties go to the earlier annotation. Beats with no annotation in range, or
    whose nearest annotation is not a mapped beat symbol, are dropped.
    """
    stats = stats if stats is not None else ExtractionStats()
    positions = np.asarray([e.sample_index for e in events], dtype=np.int64)
    labeled = []
    for beat in beats:
        pos = beat.record_position
        j = int(np.searchsorted(positions, pos))
        best = None
        for cand in (j - 1, j):
            if 0 <= cand < positions.size:
                dist = abs(int(positions[cand]) - pos)
                if dist <= tolerance and (best is None or dist < best[0]):
                    best = (dist, cand)
        if best is None:
            stats.dropped_unlabeled += 1
            continue
        cls = map_symbol_to_class(events[best[1]].symbol)
        if cls is None:
            stats.dropped_unmapped += 1
            continue
        labeled.append(Beat(beat.samples, beat.r_peak_index, cls, beat.subject_id, beat.window_start))
        stats.class_counts[cls] += 1
    if stats.dropped_unlabeled or stats.dropped_unmapped:
        logger.warning("dropped %d unannotated and %d non-beat beats",
                       stats.dropped_unlabeled, stats.dropped_unmapped)
    return labeled


def write_manifest(path, stats):
    """Sidecar ``key=value`` tallies for an extracted beat set."""
    lines = [
        f"windows={stats.windows}",
        f"skipped_constant_windows={stats.skipped_constant}",
        f"skipped_few_peak_windows={stats.skipped_few_peaks}",
        f"extracted_beats={stats.beats}",
        f"dropped_unannotated_beats={stats.dropped_unlabeled}",
        f"dropped_unmapped_beats={stats.dropped_unmapped}",
    ]
    lines += [f"class_{cls}={n}" for cls, n in sorted(stats.class_counts.items())]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            key, sep, value = line.strip().partition("=")
            if sep:
                out[key] = int(value)
    return out


def beats_from_record(prefix, record_id=None, task="auto", stats=None):
    """Extract labeled beats from one WFDB record.

    ``task`` is ``"arrhythmia"`` (labels from the ``.atr`` annotations),
    ``"mi"`` (one label per record from the PTB admission reason) or
    ``"auto"``, which picks ``"mi"`` when the header carries an admission
    reason. Records outside the two PTB classes yield no beats.
    """
    stats = stats if stats is not None else ExtractionStats()
    record = read_record(prefix)
    header = record.header
    record_id = record_id or header.record_name
    if task == "auto":
        task = "mi" if header.comment_field("reason for admission") is not None else "arrhythmia"
    if task == "mi":
        cls = ptb_class(header)
        if cls is None:
            logger.info("record %s: not MI or healthy control, skipped", record_id)
            return []
    beats = beats_from_signal(record.lead_ii(), header.sampling_frequency, record_id, stats)
    if task == "mi":
        stats.class_counts[cls] += len(beats)
        return [Beat(b.samples, b.r_peak_index, cls, b.subject_id, b.window_start) for b in beats]
    events = read_annotations(prefix, n_samples=header.n_samples)
    events = rescale_events(events, header.sampling_frequency)
    return label_beats(beats, events, stats=stats)


def to_beat_set(beats, classes):
    """Stack labeled Beat objects into a BeatSet with class indices."""
    index = {c: i for i, c in enumerate(classes)}
    if not beats:
        return BeatSet(np.zeros((0, BEAT_LENGTH), np.float32), np.zeros(0, np.int64), [])
    return BeatSet(np.stack([b.samples for b in beats]),
                   np.asarray([index[b.label] for b in beats]),
                   [b.beat_id for b in beats])
