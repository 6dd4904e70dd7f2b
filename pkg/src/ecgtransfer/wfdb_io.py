"""
Readers for PhysioBank (WFDB) records.

Handles the subset needed for MIT-BIH Arrhythmia and PTB Diagnostic records:
text headers (``.hea``), signal files in formats 212 and 16 (``.dat``) and
MIT-format annotation files (``.atr``). A plain CSV beat format is also
supported so the rest of the pipeline can run without the binary datasets.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SUPPORTED_FORMATS = (212, 16)

ARRHYTHMIA_CLASSES = ("N", "S", "V", "F", "Q")
MI_CLASSES = ("MI", "HC")

# AAMI EC57 grouping of MIT-BIH beat symbols.
_AAMI_GROUPS = {
    "N": "NLRej",
    "S": "AaJS",
    "V": "VE",
    "F": "F",
    "Q": "/fQ",
}
SYMBOL_TO_CLASS = {s: cls for cls, symbols in _AAMI_GROUPS.items() for s in symbols}

LEAD_II_NAMES = ("mlii", "ii", "i i")

# MIT annotation type codes -> symbols (WFDB code table).
ANNOTATION_CODES = {
    1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A", 9: "S",
    10: "E", 11: "j", 12: "/", 13: "Q", 14: "~", 16: "|", 18: "s", 19: "T",
    20: "*", 21: "D", 22: '"', 23: "=", 24: "p", 25: "B", 26: "^", 27: "t",
    28: "+", 29: "u", 30: "?", 31: "!", 32: "[", 33: "]", 34: "e", 35: "n",
    36: "@", 37: "x", 38: "f", 39: "(", 40: ")", 41: "r",
}
_SKIP, _NUM, _SUB, _CHAN, _AUX = 59, 60, 61, 62, 63


class WfdbError(ValueError):
    """Base class for record ingestion errors."""


class HeaderParseError(WfdbError):
    def __init__(self, message, line_no=None, line=None):
        where = f" (line {line_no}: {line!r})" if line_no is not None else ""
        super().__init__(message + where)
        self.line_no = line_no
        self.line = line


class UnsupportedFormatError(HeaderParseError):
    pass


class TruncatedDataError(WfdbError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class AnnotationError(WfdbError):
    pass


class LeadNotFoundError(WfdbError):
    pass


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    format_code: int
    adc_gain: float
    baseline: int
    units_label: str
    description: str


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_signals: int
    sampling_frequency: float
    n_samples: int
    signals: tuple[SignalSpec, ...]
    comments: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_signals < 1 or self.n_signals != len(self.signals):
            raise HeaderParseError(
                f"header declares {self.n_signals} signals, found {len(self.signals)} signal lines")
        if not self.sampling_frequency > 0:
            raise HeaderParseError(f"sampling frequency must be positive, got {self.sampling_frequency}")
        if self.n_samples < 0:
            raise HeaderParseError(f"negative sample count {self.n_samples}")

    def comment_field(self, key):
        """Value of a ``key: value`` header comment, or None (case-insensitive key)."""
        key = key.lower()
        for comment in self.comments:
            name, sep, value = comment.partition(":")
            if sep and name.strip().lower() == key:
                return value.strip()
        return None


@dataclass(frozen=True)
class SignalRecord:
    header: RecordHeader
    channels: tuple[np.ndarray, ...]

    def __post_init__(self):
        for ch in self.channels:
            if len(ch) != self.header.n_samples:
                raise WfdbError(
                    f"channel length {len(ch)} != header n_samples {self.header.n_samples}")
            ch.setflags(write=False)

    def lead_ii(self):
        """Physical samples (mV) of the lead-II channel."""
        return self.channels[lead_ii_index(self.header)]


@dataclass(frozen=True)
class AnnotationEvent:
    sample_index: int
    symbol: str


def _parse_number(token, kind, line_no, line):
    try:
        return kind(token)
    except ValueError:
        raise HeaderParseError(f"bad numeric field {token!r}", line_no, line) from None


def parse_header(text):
    """Parse the contents of a ``.hea`` file into a :class:`RecordHeader`."""
    lines = []
    comments = []
    for no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            comments.append(stripped.lstrip("#").strip())
            continue
        lines.append((no, stripped))
    if not lines:
        raise HeaderParseError("empty header")

    no, line = lines[0]
    tokens = line.split()
    if len(tokens) < 2:
        raise HeaderParseError("record line needs at least a name and a signal count", no, line)
    name = tokens[0].split("/")[0]
    if "/" in tokens[0]:
        raise HeaderParseError("multi-segment records are not supported", no, line)
    n_signals = _parse_number(tokens[1], int, no, line)
    fs = 250.0
    if len(tokens) > 2:
        # fs[/counter_freq[(base_counter)]]
        fs = _parse_number(tokens[2].split("/")[0].split("(")[0], float, no, line)
    n_samples = _parse_number(tokens[3], int, no, line) if len(tokens) > 3 else 0
    if n_signals < 1:
        raise HeaderParseError(f"record declares {n_signals} signals", no, line)

    signal_lines = lines[1:]
    if len(signal_lines) != n_signals:
        raise HeaderParseError(
            f"record declares {n_signals} signals but {len(signal_lines)} signal lines follow", no, line)

    signals = [_parse_signal_line(sno, sline) for sno, sline in signal_lines]
    return RecordHeader(name, n_signals, fs, n_samples, tuple(signals), tuple(comments))


_FORMAT_RE = re.compile(r"^(\d+)")
_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\(([-+]?\d+)\))?(?:/(\S+))?$")


def _parse_signal_line(no, line):
    tokens = line.split()
    if len(tokens) < 2:
        raise HeaderParseError("signal line needs a file name and format", no, line)
    m = _FORMAT_RE.match(tokens[1])
    if not m:
        raise HeaderParseError(f"bad format field {tokens[1]!r}", no, line)
    fmt = int(m.group(1))
    if fmt not in SUPPORTED_FORMATS:
        raise UnsupportedFormatError(f"unsupported signal format {fmt}", no, line)

    gain, baseline, units = 200.0, None, "mV"
    if len(tokens) > 2:
        gm = _GAIN_RE.match(tokens[2])
        if not gm:
            raise HeaderParseError(f"bad ADC gain field {tokens[2]!r}", no, line)
        gain = float(gm.group(1))
        if gm.group(2) is not None:
            baseline = int(gm.group(2))
        if gm.group(3):
            units = gm.group(3)
    if gain == 0:
        gain = 200.0
    # adc resolution, adc zero, initial value, checksum, block size, description
    adc_zero = _parse_number(tokens[4], int, no, line) if len(tokens) > 4 else 0
    if baseline is None:
        baseline = adc_zero
    description = " ".join(tokens[8:]) if len(tokens) > 8 else ""
    return SignalSpec(tokens[0], fmt, gain, baseline, units, description)


def decode_format212(data, n_samples):
    """Unpack format-212 bytes (two 12-bit samples per 3 bytes) to ints."""
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    needed = (3 * n_samples + 1) // 2
    if buf.size < needed:
        raise TruncatedDataError(
            f"format 212 stream holds {buf.size} bytes, {needed} needed for {n_samples} samples",
            buf.size)
    n_groups = (n_samples + 1) // 2
    padded = np.zeros(3 * n_groups, dtype=np.int32)
    padded[:needed] = buf[:needed]
    b0, b1, b2 = padded[0::3], padded[1::3], padded[2::3]
    out = np.empty(2 * n_groups, dtype=np.int32)
    out[0::2] = ((b1 & 0x0F) << 8) | b0
    out[1::2] = ((b1 >> 4) << 8) | b2
    out[out > 2047] -= 4096
    return out[:n_samples]


def encode_format212(samples):
    """Inverse of :func:`decode_format212` for an even number of samples."""
    s = np.asarray(samples, dtype=np.int64)
    if s.size % 2:
        raise ValueError("format 212 encoder needs an even sample count")
    if s.size and (s.min() < -2048 or s.max() > 2047):
        raise ValueError("sample outside the 12-bit range")
    u = s & 0xFFF
    a, b = u[0::2], u[1::2]
    out = np.empty(3 * a.size, dtype=np.uint8)
    out[0::3] = a & 0xFF
    out[1::3] = ((a >> 8) & 0x0F) | (((b >> 8) & 0x0F) << 4)
    out[2::3] = b & 0xFF
    return out.tobytes()


def decode_format16(data, n_samples):
    """Little-endian signed 16-bit samples."""
    buf = bytes(data)
    if len(buf) < 2 * n_samples:
        raise TruncatedDataError(
            f"format 16 stream holds {len(buf)} bytes, {2 * n_samples} needed", len(buf))
    return np.frombuffer(buf, dtype="<i2", count=n_samples).astype(np.int32)


_DECODERS = {212: decode_format212, 16: decode_format16}


def parse_annotations(data):
    """Decode an MIT-format annotation stream into beat/event annotations.

    Each annotation is a little-endian 16-bit word: the top 6 bits hold the
    type code, the low 10 bits the sample increment since the previous
    annotation. SKIP carries a 32-bit increment in the next two words, AUX
    carries a byte string; NUM/SUB/CHAN only modify the current annotation.
    """
    buf = bytes(data)
    if len(buf) % 2:
        buf = buf + b"\x00"
    words = np.frombuffer(buf, dtype="<u2")
    events = []
    t = 0
    i = 0
    n = words.size
    while i < n:
        w = int(words[i])
        code, delta = w >> 10, w & 0x3FF
        if w == 0:
            break
        if code == _SKIP:
            if i + 2 >= n:
                raise AnnotationError(f"dangling SKIP pseudo-annotation at word {i}")
            hi, lo = int(words[i + 1]), int(words[i + 2])
            skip = (hi << 16) | lo
            if skip >= 1 << 31:
                skip -= 1 << 32
            t += skip
            i += 3
            continue
        if code == _AUX:
            n_bytes = delta
            n_words = (n_bytes + 1) // 2
            if i + 1 + n_words > n:
                raise AnnotationError(f"AUX string of {n_bytes} bytes overruns the buffer at word {i}")
            i += 1 + n_words
            continue
        if code in (_NUM, _SUB, _CHAN):
            i += 1
            continue
        t += delta
        i += 1
        if code == 0:
            continue
        symbol = ANNOTATION_CODES.get(code)
        if symbol is None:
            logger.debug("unknown annotation code %d at sample %d", code, t)
            continue
        events.append(AnnotationEvent(t, symbol))
    else:
        if n and int(words[-1]) != 0:
            logger.debug("annotation stream ended without a terminator word")
    return events


def map_symbol_to_class(symbol):
    """AAMI class for a beat symbol, or None when the symbol is not a mapped beat."""
    return SYMBOL_TO_CLASS.get(symbol)


def lead_ii_index(header):
    for i, sig in enumerate(header.signals):
        if sig.description.strip().lower() in LEAD_II_NAMES:
            return i
    names = [s.description for s in header.signals]
    raise LeadNotFoundError(f"record {header.record_name} has no lead II channel (signals: {names})")


def ptb_class(header):
    """'MI', 'HC' or None from the PTB 'Reason for admission' comment."""
    reason = header.comment_field("reason for admission")
    if reason is None:
        return None
    reason = reason.lower()
    if reason.startswith("myocardial infarction"):
        return "MI"
    if reason.startswith("healthy control"):
        return "HC"
    return None


def read_header(path):
    path = Path(path)
    hea = path if path.suffix == ".hea" else path.with_name(path.name + ".hea")
    return parse_header(hea.read_text(encoding="latin-1"))


def read_record(path):
    """Read a record addressed by its path prefix (``.../100`` -> ``100.hea``)."""
    prefix = Path(path)
    if prefix.suffix == ".hea":
        prefix = prefix.with_suffix("")
    header = read_header(prefix)
    base = prefix.parent
    n = header.n_samples

    # signals sharing a file are interleaved frame by frame
    groups = {}
    for idx, sig in enumerate(header.signals):
        groups.setdefault(sig.file_name, []).append(idx)

    phys = [None] * header.n_signals
    for file_name, members in groups.items():
        fmts = {header.signals[m].format_code for m in members}
        if len(fmts) != 1:
            raise WfdbError(f"mixed formats within {file_name}")
        fmt = fmts.pop()
        raw = (base / file_name).read_bytes()
        if n == 0:
            n_frames = len(raw) * 2 // 3 // len(members) if fmt == 212 else len(raw) // 2 // len(members)
            if len(groups) > 1:
                raise WfdbError("sample count missing from a multi-file header")
            header = RecordHeader(header.record_name, header.n_signals,
                                  header.sampling_frequency, n_frames,
                                  header.signals, header.comments)
            n = n_frames
        adc = _DECODERS[fmt](raw, n * len(members)).reshape(n, len(members))
        for j, m in enumerate(members):
            sig = header.signals[m]
            phys[m] = (adc[:, j] - sig.baseline) / sig.adc_gain
    return SignalRecord(header, tuple(phys))


def read_annotations(path, extension="atr", n_samples=None):
    prefix = Path(path)
    events = parse_annotations((prefix.parent / f"{prefix.name}.{extension}").read_bytes())
    if n_samples is not None:
        bad = [e for e in events if not 0 <= e.sample_index < n_samples]
        if bad:
            raise AnnotationError(
                f"{len(bad)} annotations fall outside the record (first at {bad[0].sample_index})")
    return events


def write_beats_csv(path, beats):
    """Write a BeatSet as ``id,<values...>,label`` rows (float32 round-trip exact)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for beat_id, row, label in zip(beats.ids, beats.samples, beats.labels):
            writer.writerow([beat_id, *(f"{v:.9g}" for v in row), int(label)])


@dataclass
class BeatSet:
    """Fixed-length beats as an (n, length) float32 array with integer labels.

    Ids have the form ``<subject>:<position>``; duplicates made by class
    balancing carry an ``#aug<k>`` suffix.
    """

    samples: np.ndarray
    labels: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.ids:
            self.ids = [f"beat:{i}" for i in range(len(self.labels))]
        if not (len(self.samples) == len(self.labels) == len(self.ids)):
            raise WfdbError("samples, labels and ids differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def subjects(self):
        return [beat_id.split("#")[0].rsplit(":", 1)[0].split("/")[0] for beat_id in self.ids]

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return BeatSet(self.samples[index], self.labels[index], [self.ids[i] for i in index])

    def class_counts(self, n_classes):
        return np.bincount(self.labels, minlength=n_classes)


def read_beats_csv(path, length=187):
    """Read a beat CSV; rows are ``[id,] v_1..v_length, label``."""
    rows, labels, ids = [], [], []
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) == length + 2:
                beat_id, values = row[0], row[1:-1]
            elif len(row) == length + 1:
                beat_id, values = f"{Path(path).stem}:{line_no}", row[:-1]
            else:
                raise WfdbError(f"{path}:{line_no}: expected {length + 1} or {length + 2} columns, got {len(row)}")
            try:
                rows.append([float(v) for v in values])
                labels.append(int(float(row[-1])))
            except ValueError as exc:
                raise WfdbError(f"{path}:{line_no}: {exc}") from None
            ids.append(beat_id)
    samples = np.asarray(rows, dtype=np.float32).reshape(-1, length)
    return BeatSet(samples, np.asarray(labels, dtype=np.int64), ids)
