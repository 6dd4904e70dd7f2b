"""
Synthetic ECG-like data and PhysioBank-format writers.

Used by the demos and the test suite where the real MIT-BIH / PTB records are
not available. Morphologies are crude sums of Gaussians; they only need to be
distinguishable, not physiological.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .preprocess import BEAT_LENGTH, WINDOW_LENGTH
from .wfdb_io import ANNOTATION_CODES, BeatSet, encode_format212

_SYMBOL_CODES = {sym: code for code, sym in ANNOTATION_CODES.items()}

# (offset, width, amplitude) bumps relative to the R-peak, in samples at 125 Hz
_MORPHOLOGY = {
    "N": [(0, 2.0, 1.0), (-25, 4.0, 0.15), (40, 8.0, 0.3)],
    "S": [(0, 2.0, 1.0), (-18, 3.0, 0.25), (32, 7.0, 0.25)],
    "V": [(0, 6.0, 1.0), (14, 6.0, -0.6), (45, 10.0, -0.35)],
    "F": [(0, 4.0, 1.0), (10, 4.0, -0.3), (42, 9.0, 0.1)],
    "Q": [(-4, 0.8, 0.9), (0, 3.0, 1.0), (36, 12.0, 0.45)],
    "MI": [(0, 2.5, 1.0), (15, 10.0, 0.45), (40, 9.0, 0.5)],
    "HC": [(0, 2.0, 1.0), (-25, 4.0, 0.15), (40, 8.0, 0.3)],
}
_PERIOD = {"N": 100, "S": 75, "V": 110, "F": 100, "Q": 95, "MI": 95, "HC": 100}


def gaussian_pulse_train(n_pulses=12, spacing=100, first=50, width=5.0, amplitude=1.0,
                         baseline=0.1, noise=0.005, length=WINDOW_LENGTH, seed=0):
    """A window of identical Gaussian pulses; returns (signal, true peak indices)."""
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    peaks = first + spacing * np.arange(n_pulses)
    x = np.full(length, baseline, dtype=np.float64)
    for p in peaks:
        x += amplitude * np.exp(-0.5 * ((t - p) / width) ** 2)
    x += rng.uniform(-noise, noise, size=length)
    return x, peaks.astype(int)


def _shape(cls, t, rng, jitter):
    y = np.zeros_like(t, dtype=np.float64)
    for offset, width, amp in _MORPHOLOGY[cls]:
        o = offset + jitter * rng.normal() * 2
        w = width * (1 + jitter * 0.2 * rng.normal())
        a = amp * (1 + jitter * 0.15 * rng.normal())
        y += a * np.exp(-0.5 * ((t - o) / w) ** 2)
    return y


def synthetic_beats(n_per_class, classes=("N", "S", "V", "F", "Q"), seed=0, jitter=1.0, noise=0.01):
    """Ready-made 187-sample beats (R-peak first, zero-padded) per class."""
    rng = np.random.default_rng(seed)
    samples, labels, ids = [], [], []
    t = np.arange(-30, BEAT_LENGTH + 30, dtype=np.float64)
    for k, cls in enumerate(classes):
        for i in range(n_per_class):
            period = _PERIOD[cls] * (1 + 0.08 * jitter * rng.normal())
            trace = _shape(cls, t, rng, jitter) + rng.normal(scale=noise, size=t.size)
            trace = (trace - trace.min()) / (trace.max() - trace.min())
            start = 30
            span = min(int(round(1.2 * period)), BEAT_LENGTH)
            beat = np.zeros(BEAT_LENGTH, dtype=np.float32)
            beat[:span] = trace[start:start + span]
            samples.append(beat)
            labels.append(k)
            ids.append(f"syn{k}_{i // 50}:{i}")
    return BeatSet(np.asarray(samples), np.asarray(labels), ids)


def synthetic_ecg(duration_s, fs, symbols, seed=0, amplitude_mv=1.2, hr_jitter=0.05):
    """Continuous lead signal (mV) with one beat per symbol, cycling ``symbols``.

    Returns (signal, annotation sample indices, annotation symbols). Each
    annotation sits on its beat's R-peak.
    """
    rng = np.random.default_rng(seed)
    n = int(duration_s * fs)
    t = np.arange(n, dtype=np.float64)
    scale = fs / 125.0
    x = 0.05 * np.sin(2 * np.pi * 0.3 * t / fs)
    positions, labels = [], []
    pos = 0.6 * fs
    i = 0
    while pos < n - 0.6 * fs:
        sym = symbols[i % len(symbols)]
        cls = {"N": "N", "L": "N", "R": "N", "A": "S", "V": "V", "F": "F", "/": "Q"}.get(sym, sym)
        lo, hi = max(int(pos - 60 * scale), 0), min(int(pos + 80 * scale), n)
        seg = t[lo:hi]
        wave = np.zeros(seg.size)
        for offset, width, amp in _MORPHOLOGY.get(cls, _MORPHOLOGY["N"]):
            wave += amp * np.exp(-0.5 * ((seg - pos - offset * scale) / (width * scale)) ** 2)
        x[lo:hi] += amplitude_mv * wave / wave.max()
        positions.append(int(round(pos)))
        labels.append(sym)
        period = _PERIOD.get(cls, 100) * scale * (1 + hr_jitter * rng.normal())
        pos += period
        i += 1
    x += rng.normal(scale=0.01, size=n)
    return x, np.asarray(positions), labels


def encode_annotations(events):
    """MIT-format annotation bytes for (sample, symbol) pairs, zero-terminated."""
    words = []
    last = 0
    for sample, symbol in events:
        delta = int(sample) - last
        if delta < 0:
            raise ValueError("annotations must be sorted")
        if delta > 1023:
            words += [59 << 10, (delta >> 16) & 0xFFFF, delta & 0xFFFF]
            delta = 0
        words.append((_SYMBOL_CODES[symbol] << 10) | delta)
        last = int(sample)
    words.append(0)
    return np.asarray(words, dtype="<u2").tobytes()


def write_record(directory, name, signals, fs, descriptions, fmt=212, gain=200.0, baseline=0,
                 comments=()):
    """Write ``name.hea`` and ``name.dat`` for physical signals (mV).

    ``signals`` is a list of equal-length arrays, stored interleaved in one
    file with the given format.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sig = np.stack([np.asarray(s, dtype=np.float64) for s in signals], axis=1)
    adc = np.round(sig * gain + baseline).astype(np.int64)
    lo, hi = (-2048, 2047) if fmt == 212 else (-32768, 32767)
    adc = np.clip(adc, lo, hi)
    flat = adc.reshape(-1)
    if fmt == 212:
        if flat.size % 2:
            flat = np.append(flat, 0)
        payload = encode_format212(flat)
    elif fmt == 16:
        payload = flat.astype("<i2").tobytes()
    else:
        raise ValueError(f"unsupported format {fmt}")
    dat = f"{name}.dat"
    (directory / dat).write_bytes(payload)
    lines = [f"{name} {sig.shape[1]} {fs:g} {sig.shape[0]}"]
    for j, desc in enumerate(descriptions):
        lines.append(f"{dat} {fmt} {gain:g}({baseline})/mV 12 0 {int(adc[0, j])} 0 0 {desc}")
    lines += [f"# {c}" for c in comments]
    (directory / f"{name}.hea").write_text("\n".join(lines) + "\n")
    return directory / name


def write_annotations(prefix, events, extension="atr"):
    prefix = Path(prefix)
    path = prefix.parent / f"{prefix.name}.{extension}"
    path.write_bytes(encode_annotations(events))
    return path
