"""Forecaster assembly, initialization and serialization.

Wiring for ``attention_bilstm``::

    x -> BiLSTM -> BN -> ReLU -> LSTM -> BN -> ReLU -> attention -> GAP -> dense

``attention_lstm`` uses a unidirectional first layer and ``bilstm`` drops the
attention step, pooling the post-ReLU sequence directly.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .errors import ConfigError, FormatError, ShapeError

VARIANTS = ("attention_bilstm", "attention_lstm", "bilstm")
MODEL_MAGIC = b"S2O1"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    variant: str = "attention_bilstm"
    time_steps: int = 5
    input_features: int = 2
    hidden_sizes: list = field(default_factory=lambda: [64, 64])
    output_dim: int = 1
    seed: int = 0
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if self.time_steps < 1:
            raise ConfigError("time_steps must be >= 1")
        if self.output_dim < 1:
            raise ConfigError("output_dim must be >= 1")
        if self.input_features < 1:
            raise ConfigError("input_features must be >= 1")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden_sizes must be a non-empty list of positive sizes")
        if not 0.0 < self.bn_momentum < 1.0 or self.bn_epsilon <= 0:
            raise ConfigError("batch norm momentum must be in (0, 1) and epsilon > 0")
        return self

    @property
    def bidirectional(self):
        return self.variant in ("attention_bilstm", "bilstm")

    @property
    def attention(self):
        return self.variant in ("attention_bilstm", "attention_lstm")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


class ModelParams:
    """Ordered trainable blocks, their gradient slots, and batch-norm buffers."""

    def __init__(self):
        self.blocks = {}
        self.grads = {}
        self.buffers = {}

    def add(self, name, value):
        self.blocks[name] = np.ascontiguousarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.blocks[name])

    def add_buffer(self, name, value):
        self.buffers[name] = np.ascontiguousarray(value, dtype=np.float64)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def count(self):
        return sum(v.size for v in self.blocks.values())

    def copy(self):
        out = ModelParams()
        for k, v in self.blocks.items():
            out.add(k, v.copy())
        for k, v in self.buffers.items():
            out.add_buffer(k, v.copy())
        return out

    def load_state(self, other):
        """Copy values from ``other`` in place (keeps array identities)."""
        for k, v in other.blocks.items():
            self.blocks[k][...] = v
        for k, v in other.buffers.items():
            self.buffers[k][...] = v

    def all_arrays(self):
        yield from self.blocks.items()
        yield from self.buffers.items()

    def equals(self, other):
        mine, theirs = dict(self.all_arrays()), dict(other.all_arrays())
        return mine.keys() == theirs.keys() and all(
            mine[k].shape == theirs[k].shape and mine[k].tobytes() == theirs[k].tobytes()
            for k in mine
        )

    # views consumed by the layer functions
    def lstm(self, prefix):
        return L.LstmParams(self.blocks[prefix + ".W"], self.blocks[prefix + ".U"], self.blocks[prefix + ".b"])

    def batchnorm(self, prefix, config):
        return L.BatchNormParams(
            self.blocks[prefix + ".gamma"],
            self.blocks[prefix + ".beta"],
            self.buffers[prefix + ".running_mean"],
            self.buffers[prefix + ".running_var"],
            config.bn_momentum,
            config.bn_epsilon,
        )

    def attention(self):
        return L.AttentionParams(self.blocks["att.w"], self.blocks["att.b"])

    def dense(self):
        return L.DenseParams(self.blocks["out.W"], self.blocks["out.b"])


def _orthogonal(rng, rows, cols):
    a = rng.normal(size=(rows, cols))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def _lstm_block(params, rng, prefix, F, H):
    limit = np.sqrt(6.0 / (F + 4 * H))
    params.add(prefix + ".W", rng.uniform(-limit, limit, size=(4 * H, F)))
    params.add(prefix + ".U", _orthogonal(rng, 4 * H, H))
    b = np.zeros(4 * H)
    b[H:2 * H] = 1.0
    params.add(prefix + ".b", b)


def layer_widths(config):
    """Channel count produced by each recurrent layer."""
    out = []
    for i, H in enumerate(config.hidden_sizes):
        out.append(2 * H if (i == 0 and config.bidirectional) else H)
    return out


def build(config):
    """Initialize parameters deterministically from ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = ModelParams()
    F = config.input_features
    for i, (H, C) in enumerate(zip(config.hidden_sizes, layer_widths(config))):
        if i == 0 and config.bidirectional:
            _lstm_block(params, rng, f"rnn{i}.fwd", F, H)
            _lstm_block(params, rng, f"rnn{i}.bwd", F, H)
        else:
            _lstm_block(params, rng, f"rnn{i}", F, H)
        params.add(f"bn{i}.gamma", np.ones(C))
        params.add(f"bn{i}.beta", np.zeros(C))
        params.add_buffer(f"bn{i}.running_mean", np.zeros(C))
        params.add_buffer(f"bn{i}.running_var", np.ones(C))
        F = C
    if config.attention:
        limit = np.sqrt(6.0 / (F + 1))
        params.add("att.w", rng.uniform(-limit, limit, size=F))
        params.add("att.b", np.zeros(1))
    limit = np.sqrt(6.0 / (F + config.output_dim))
    params.add("out.W", rng.uniform(-limit, limit, size=(config.output_dim, F)))
    params.add("out.b", np.zeros(config.output_dim))
    return params


def expected_param_count(config):
    """Closed-form number of trainable scalars for ``config``."""
    total = 0
    F = config.input_features
    for i, (H, C) in enumerate(zip(config.hidden_sizes, layer_widths(config))):
        directions = 2 if (i == 0 and config.bidirectional) else 1
        total += directions * 4 * H * (F + H + 1)
        total += 2 * C
        F = C
    if config.attention:
        total += F + 1
    return total + config.output_dim * (F + 1)


def forward(params, config, x, mode="infer"):
    """Run the network on ``x`` (B, T, F).

    Returns ``(y_hat, alpha, caches)``; ``alpha`` is None for ``bilstm``.
    """
    if x.ndim != 3 or x.shape[1] != config.time_steps or x.shape[2] != config.input_features:
        raise ShapeError(
            f"input {x.shape} does not match (B, {config.time_steps}, {config.input_features})"
        )
    caches = []
    h = x
    for i in range(len(config.hidden_sizes)):
        if i == 0 and config.bidirectional:
            h, c = L.bilstm_forward(h, params.lstm(f"rnn{i}.fwd"), params.lstm(f"rnn{i}.bwd"))
            caches.append(("bilstm", f"rnn{i}", c))
        else:
            h, c = L.lstm_layer_forward(h, params.lstm(f"rnn{i}"))
            caches.append(("lstm", f"rnn{i}", c))
        h, c = L.batchnorm_forward(h, params.batchnorm(f"bn{i}", config), mode)
        caches.append(("batchnorm", f"bn{i}", c))
        h, c = L.relu_forward(h)
        caches.append(("relu", None, c))
    alpha = None
    if config.attention:
        h, alpha, c = L.attention_forward(h, params.attention())
        caches.append(("attention", "att", c))
    h, c = L.gap_forward(h)
    caches.append(("gap", None, c))
    y, c = L.dense_forward(h, params.dense(), "linear")
    caches.append(("dense", "out", c))
    return y, alpha, caches


def backward(params, caches, dy):
    """Accumulate parameter gradients into ``params.grads``; returns dL/dx."""
    g = dy
    for layer, prefix, cache in reversed(caches):
        g, grads = L.backward(layer, g, cache)
        if layer == "bilstm":
            for direction in ("fwd", "bwd"):
                for k, v in grads[direction].items():
                    params.grads[f"{prefix}.{direction}.{k}"] += v
        else:
            for k, v in grads.items():
                params.grads[f"{prefix}.{k}"] += v
    return g


class Forecaster:
    """A config plus its parameters, with prediction helpers."""

    def __init__(self, config, params=None):
        self.config = config.validate()
        self.params = params if params is not None else build(config)

    def forward(self, x, mode="infer"):
        return forward(self.params, self.config, x, mode)

    def backward(self, caches, dy):
        return backward(self.params, caches, dy)

    def predict(self, x, batch_size=256):
        """Infer-mode predictions in normalized units, batched to bound memory."""
        if len(x) == 0:
            return np.zeros((0, self.config.output_dim))
        out = [self.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Container format: magic, u32 version, u32 meta length, JSON meta, u32 block
# count, then per block: u32 name length, name, u32 ndim, u64 dims, f64 data.
# All integers and floats little-endian.


def write_container(path, magic, meta, blocks):
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_container(path, magic):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(magic):
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    pos = len(magic)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    try:
        version, meta_len = struct.unpack("<II", take(8))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        meta = json.loads(take(meta_len).decode("utf-8"))
        (n_blocks,) = struct.unpack("<I", take(4))
        blocks = {}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack("<I", take(4))
            name = take(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            blocks[name] = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt container ({exc})") from None
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after last block")
    return meta, blocks


def save(params, config, path, metadata=None):
    meta = {"config": json.loads(config.to_json()), "extra": metadata or {}}
    blocks = dict(params.blocks)
    blocks.update({"buffer:" + k: v for k, v in params.buffers.items()})
    write_container(path, MODEL_MAGIC, meta, blocks)


def load_bundle(path):
    """Return ``(params, config, metadata)`` from a model file."""
    meta, blocks = read_container(path, MODEL_MAGIC)
    try:
        config = ModelConfig.from_dict(meta["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: invalid model config ({exc})") from None
    params = build(config)
    expected = {k: v.shape for k, v in params.blocks.items()}
    expected.update({"buffer:" + k: v.shape for k, v in params.buffers.items()})
    got = {k: v.shape for k, v in blocks.items()}
    if expected != got:
        raise FormatError(f"{path}: parameter blocks do not match the stored config")
    for k, v in blocks.items():
        if k.startswith("buffer:"):
            params.buffers[k[len("buffer:"):]][...] = v
        else:
            params.blocks[k][...] = v
    return params, config, meta.get("extra", {})


def load(path):
    params, config, _ = load_bundle(path)
    return params, config
