"""
Residual 1-D CNN for heartbeat classification and its transfer head.

Layout (per-example shapes for the default 187-sample input)::

    beat (1, 187)
    stem conv 1->32                         (32, 187)
    5 x residual block:
        conv -> relu -> conv -> + input -> relu -> maxpool(5, 2)
                                            (32, 92) (32, 44) (32, 20) (32, 8) (32, 2)
    flatten                                 (64,)      <- embedding
    fc 64->32 -> relu -> fc 32->32 -> relu
    fc 32->5 -> softmax

The stem, the ten block convolutions and the two hidden fully-connected
layers are the 13 weight layers; the 5-way projection belongs to the softmax
head. For MI prediction the whole network is frozen and a new head
(64->32->32->2) is trained on the embedding.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class ArrhythmiaNetConfig:
    input_length: int = 187
    channels: int = 32
    kernel: int = 5
    residual_blocks: int = 5
    pool_size: int = 5
    pool_stride: int = 2
    fc_width: int = 32
    n_classes: int = 5

    def __post_init__(self):
        if self.kernel != ad.KERNEL:
            raise ValueError(f"only kernel size {ad.KERNEL} is supported")
        if (self.pool_size, self.pool_stride) != (ad.POOL_SIZE, ad.POOL_STRIDE):
            raise ValueError(f"only pooling ({ad.POOL_SIZE}, {ad.POOL_STRIDE}) is supported")
        if self.stage_lengths()[-1] < 1:
            raise ValueError("input too short for the number of residual blocks")

    @property
    def weight_layers(self):
        return 1 + 2 * self.residual_blocks + 2

    def stage_lengths(self):
        lengths = []
        length = self.input_length
        for _ in range(self.residual_blocks):
            length = (length - self.pool_size) // self.pool_stride + 1
            lengths.append(length)
        return tuple(lengths)

    @property
    def embedding_size(self):
        return self.channels * self.stage_lengths()[-1]

    def fingerprint(self, kind="arrhythmia"):
        canon = ";".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(f"{kind}|{canon}".encode()).digest()


MI_HEAD_WIDTH = 32
MI_CLASSES = 2


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _as_input(beats, length, dtype):
    x = np.asarray(beats, dtype=dtype)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != length:
        raise ad.ShapeError(f"expected beats of length {length}, got shape {np.shape(beats)}")
    return x[:, None, :]


class ArrhythmiaNet:
    """The backbone plus its 5-way softmax head. Parameters live in ``params``."""

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or ArrhythmiaNetConfig()
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.params = {}
        rng = np.random.default_rng(seed)
        c, k = self.config.channels, self.config.kernel

        def conv(name, c_in):
            self._add(f"{name}.w", _glorot(rng, (c, c_in, k), c_in * k, c * k, self.dtype))
            self._add(f"{name}.b", np.zeros(c, self.dtype))

        def dense(name, d_in, d_out):
            self._add(f"{name}.w", _glorot(rng, (d_out, d_in), d_in, d_out, self.dtype))
            self._add(f"{name}.b", np.zeros(d_out, self.dtype))

        conv("stem", 1)
        for i in range(self.config.residual_blocks):
            conv(f"block{i}.conv1", c)
            conv(f"block{i}.conv2", c)
        width = self.config.fc_width
        dense("fc1", self.config.embedding_size, width)
        dense("fc2", width, width)
        dense("out", width, self.config.n_classes)

    def _add(self, name, value):
        self.params[name] = ad.Tensor(value, requires_grad=True, name=name)

    @property
    def weight_layer_names(self):
        names = ["stem"]
        for i in range(self.config.residual_blocks):
            names += [f"block{i}.conv1", f"block{i}.conv2"]
        return names + ["fc1", "fc2"]

    def parameter_count(self, trainable_only=True):
        return sum(p.data.size for p in self.params.values()
                   if p.requires_grad or not trainable_only)

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    @property
    def frozen(self):
        return not any(p.requires_grad for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def features(self, x):
        """Output of the last residual block, shape (N, channels, final_length)."""
        p = self.params
        h = ad.conv1d_same(x, p["stem.w"], p["stem.b"])
        for i in range(self.config.residual_blocks):
            pre = f"block{i}"
            y = ad.conv1d_same(h, p[f"{pre}.conv1.w"], p[f"{pre}.conv1.b"])
            y = ad.relu(y)
            y = ad.conv1d_same(y, p[f"{pre}.conv2.w"], p[f"{pre}.conv2.b"])
            h = ad.maxpool1d(ad.relu(ad.residual_add(y, h)))
        return h

    def head_logits(self, embedding):
        p = self.params
        h = ad.relu(ad.fully_connected(embedding, p["fc1.w"], p["fc1.b"]))
        h = ad.relu(ad.fully_connected(h, p["fc2.w"], p["fc2.b"]))
        return ad.fully_connected(h, p["out.w"], p["out.b"])

    def logits(self, beats):
        """Class logits as a Tensor (recorded when a tape is active)."""
        x = ad.Tensor(_as_input(beats, self.config.input_length, self.dtype))
        return self.head_logits(ad.flatten(self.features(x), batched=True))

    def embed(self, beats):
        """Flattened last-block activations: (N, 64), or (64,) for one beat."""
        x = ad.Tensor(_as_input(beats, self.config.input_length, self.dtype))
        e = ad.flatten(self.features(x), batched=True).data
        return e[0] if np.ndim(beats) == 1 else e

    def probabilities_from_embedding(self, embedding):
        return ad.softmax(self.head_logits(ad.Tensor(np.asarray(embedding, self.dtype))).data)

    def forward(self, beats):
        """Class probabilities: (N, n_classes), or (n_classes,) for one beat."""
        probs = ad.softmax(self.logits(beats).data)
        return probs[0] if np.ndim(beats) == 1 else probs

    def predict(self, beats, batch_size=512):
        beats = np.asarray(beats)
        out = [self.forward(beats[i:i + batch_size]).argmax(axis=1)
               for i in range(0, len(beats), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


class MiNet:
    """Frozen arrhythmia backbone feeding a trainable MI head."""

    def __init__(self, backbone, seed=0):
        self.backbone = backbone
        self.config = backbone.config
        self.dtype = backbone.dtype
        self.seed = seed
        backbone.freeze()
        rng = np.random.default_rng(seed)
        self.params = {}
        sizes = [self.config.embedding_size, MI_HEAD_WIDTH, MI_HEAD_WIDTH, MI_CLASSES]
        for name, d_in, d_out in zip(("mi.fc1", "mi.fc2", "mi.out"), sizes[:-1], sizes[1:]):
            self.params[f"{name}.w"] = ad.Tensor(
                _glorot(rng, (d_out, d_in), d_in, d_out, self.dtype), requires_grad=True, name=f"{name}.w")
            self.params[f"{name}.b"] = ad.Tensor(
                np.zeros(d_out, self.dtype), requires_grad=True, name=f"{name}.b")

    def parameter_count(self):
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def embed(self, beats):
        return self.backbone.embed(beats)

    def head_logits(self, embedding):
        p = self.params
        if not isinstance(embedding, ad.Tensor):
            embedding = ad.Tensor(np.asarray(embedding, self.dtype))
        h = ad.relu(ad.fully_connected(embedding, p["mi.fc1.w"], p["mi.fc1.b"]))
        h = ad.relu(ad.fully_connected(h, p["mi.fc2.w"], p["mi.fc2.b"]))
        return ad.fully_connected(h, p["mi.out.w"], p["mi.out.b"])

    def logits(self, beats):
        return self.head_logits(self.backbone.embed(np.atleast_2d(beats)))

    def forward(self, beats):
        probs = ad.softmax(self.logits(beats).data)
        return probs[0] if np.ndim(beats) == 1 else probs

    def predict(self, beats, batch_size=512):
        beats = np.asarray(beats)
        out = [self.forward(beats[i:i + batch_size]).argmax(axis=1)
               for i in range(0, len(beats), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def attach_mi_head(net, seed=0):
    """Freeze ``net`` and put a fresh two-class head on its embedding."""
    return MiNet(net, seed=seed)


def parameter_digest(params):
    """SHA-256 over parameter names, shapes and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data if isinstance(params[name], ad.Tensor) else params[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# --- checkpoints -----------------------------------------------------------

MAGIC = b"ECGRCNN\x00"
VERSION = 1
KIND_ARRHYTHMIA, KIND_MI = 0, 1
_KIND_NAMES = {KIND_ARRHYTHMIA: "arrhythmia", KIND_MI: "mi"}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: int
    fingerprint: bytes
    tensors: dict
    iteration: int = 0
    seed: int = 0

    @property
    def kind_name(self):
        return _KIND_NAMES[self.kind]


def serialize(ckpt):
    out = bytearray(MAGIC)
    out += struct.pack("<HB", VERSION, ckpt.kind)
    out += ckpt.fingerprint
    out += struct.pack("<Qq", ckpt.iteration, ckpt.seed)
    out += struct.pack("<I", len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def deserialize(blob):
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedCheckpointError(f"checkpoint ends at byte {len(view)}, needed {pos + n}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(view[:len(MAGIC)]) != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    take(len(MAGIC))
    version, kind = struct.unpack("<HB", take(3))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if kind not in _KIND_NAMES:
        raise CheckpointError(f"unknown checkpoint kind {kind}")
    fingerprint = bytes(take(32))
    iteration, seed = struct.unpack("<Qq", take(16))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8", errors="replace")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    body_end = pos
    (crc,) = struct.unpack("<I", take(4))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after checksum")
    if zlib.crc32(view[:body_end]) != crc:
        raise ChecksumError("checkpoint checksum mismatch (corrupt payload)")
    return Checkpoint(kind, fingerprint, tensors, iteration, seed)


def _params_to_arrays(params):
    return {name: np.asarray(t.data, dtype=np.float32) for name, t in params.items()}


def save(net, path, iteration=0, seed=None):
    """Write ``net`` (ArrhythmiaNet or MiNet) to ``path``; returns the bytes written."""
    if isinstance(net, MiNet):
        tensors = _params_to_arrays(net.backbone.params)
        tensors.update(_params_to_arrays(net.params))
        kind = KIND_MI
    else:
        tensors = _params_to_arrays(net.params)
        kind = KIND_ARRHYTHMIA
    fp = net.config.fingerprint(_KIND_NAMES[kind])
    blob = serialize(Checkpoint(kind, fp, tensors, iteration, net.seed if seed is None else seed))
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def _fill(params, tensors, dtype):
    missing = [n for n in params if n not in tensors]
    if missing:
        raise FingerprintMismatchError(f"checkpoint lacks parameters {missing[:3]}")
    for name, t in params.items():
        if tensors[name].shape != t.shape:
            raise FingerprintMismatchError(f"{name}: shape {tensors[name].shape} != {t.shape}")
        t.data = tensors[name].astype(dtype)
        if t.requires_grad:
            t.grad = np.zeros_like(t.data)


def load(path, config=None):
    """Load a checkpoint as ArrhythmiaNet or MiNet, verifying its fingerprint."""
    config = config or ArrhythmiaNetConfig()
    ckpt = read_checkpoint(path)
    if ckpt.fingerprint != config.fingerprint(ckpt.kind_name):
        raise FingerprintMismatchError(
            f"checkpoint architecture fingerprint does not match {config}")
    net = ArrhythmiaNet(config, seed=ckpt.seed)
    _fill(net.params, ckpt.tensors, net.dtype)
    if ckpt.kind == KIND_ARRHYTHMIA:
        return net
    mi = MiNet(net, seed=ckpt.seed)
    _fill(mi.params, ckpt.tensors, mi.dtype)
    return mi


def load_backbone(path, config=None):
    """The arrhythmia network from any checkpoint kind (MI heads are ignored)."""
    net = load(path, config)
    return net.backbone if isinstance(net, MiNet) else net


def checkpoint_iteration(path):
    return read_checkpoint(path).iteration
