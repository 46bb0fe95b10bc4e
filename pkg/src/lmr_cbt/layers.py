"""Network building blocks on top of the autograd core.

Everything here is a pure function of (params, input) given a mode flag;
the only mutable state is the pair of batch-norm running-statistic buffers,
updated in training mode only. Parameters live in a ``ParamStore`` keyed by
dotted path so they can be enumerated, counted, and serialized
deterministically.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, DimensionError, EmptySequenceError
from .tensor import Tensor

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def substream(seed: int, name: str) -> np.random.Generator:
    """Named RNG substream derived from one master seed."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, zlib.crc32(name.encode())])))


class ParamStore:
    """Named map from dotted parameter path to leaf Tensor.

    Each parameter is drawn from its own substream of ``init_seed``, so the
    values depend only on (seed, path, shape), not on construction order.
    Non-trainable buffers (running statistics) live in a parallel map and are
    excluded from counting and gradients.
    """

    def __init__(self, init_seed: int):
        self.init_seed = init_seed
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def weight(self, path: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        if path in self.params:
            raise ConfigError(f"duplicate parameter path {path!r}")
        bound = 1.0 / math.sqrt(fan_in)
        rng = substream(self.init_seed, path)
        t = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self.params[path] = t
        return t

    def zeros(self, path: str, shape: tuple[int, ...]) -> Tensor:
        if path in self.params:
            raise ConfigError(f"duplicate parameter path {path!r}")
        t = Tensor(np.zeros(shape), requires_grad=True)
        self.params[path] = t
        return t

    def ones(self, path: str, shape: tuple[int, ...]) -> Tensor:
        if path in self.params:
            raise ConfigError(f"duplicate parameter path {path!r}")
        t = Tensor(np.ones(shape), requires_grad=True)
        self.params[path] = t
        return t

    def buffer(self, path: str, value: np.ndarray) -> np.ndarray:
        if path in self.buffers:
            raise ConfigError(f"duplicate buffer path {path!r}")
        self.buffers[path] = np.asarray(value, dtype=np.float64)
        return self.buffers[path]

    def items(self):
        """Parameters in sorted path order."""
        return sorted(self.params.items())

    def buffer_items(self):
        return sorted(self.buffers.items())

    def count(self) -> int:
        return sum(t.data.size for _, t in self.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def __getitem__(self, path: str) -> Tensor:
        return self.params[path]


@dataclass
class EncoderConfig:
    """Shape parameters of one self-attention encoder stack."""
    d_f: int
    h: int
    depth: int
    ff_dim: int
    max_len: int

    def __post_init__(self):
        if self.d_f % self.h != 0:
            raise ConfigError(f"d_f={self.d_f} must be divisible by h={self.h}")
        if self.depth < 1:
            raise ConfigError(f"encoder depth must be >= 1, got {self.depth}")
        if self.ff_dim < self.d_f:
            raise ConfigError(f"ff_dim={self.ff_dim} must be >= d_f={self.d_f}")

    @property
    def d_k(self) -> int:
        return self.d_f // self.h


# ---------------------------------------------------------------------------
# linear / layer norm


def init_linear(store: ParamStore, prefix: str, d_in: int, d_out: int) -> None:
    store.weight(f"{prefix}.weight", (d_in, d_out), fan_in=d_in)
    store.zeros(f"{prefix}.bias", (d_out,))


def linear(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return T.add(T.matmul(x, store[f"{prefix}.weight"]), store[f"{prefix}.bias"])


def init_layer_norm(store: ParamStore, prefix: str, d: int) -> None:
    store.ones(f"{prefix}.gamma", (d,))
    store.zeros(f"{prefix}.beta", (d,))


def layer_norm(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    """Normalize over the last axis; eps floors the variance so an all-equal
    row maps to zeros pre-affine."""
    m = T.tmean(x, axis=-1, keepdims=True)
    centered = T.sub(x, m)
    var = T.tmean(T.mul(centered, centered), axis=-1, keepdims=True)
    normed = T.div(centered, T.sqrt(T.shift(var, LN_EPS)))
    return T.add(T.mul(normed, store[f"{prefix}.gamma"]), store[f"{prefix}.beta"])


# ---------------------------------------------------------------------------
# 1D temporal convolution + batch norm


def init_conv1d_bn(store: ParamStore, prefix: str, d_in: int, d_out: int, kernel: int) -> None:
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"conv kernel must be odd and positive, got {kernel}")
    store.weight(f"{prefix}.conv.weight", (kernel * d_in, d_out), fan_in=kernel * d_in)
    store.zeros(f"{prefix}.conv.bias", (d_out,))
    store.ones(f"{prefix}.bn.gamma", (d_out,))
    store.zeros(f"{prefix}.bn.beta", (d_out,))
    store.buffer(f"{prefix}.bn.running_mean", np.zeros(d_out))
    store.buffer(f"{prefix}.bn.running_var", np.ones(d_out))


def conv1d_bn(store: ParamStore, prefix: str, x: Tensor, kernel: int,
              training: bool) -> Tensor:
    """Same-length temporal convolution (zero padding) followed by batch
    normalization per output channel over the time extent.

    With a single time step there is no batch statistic to take, so the
    running statistics are used and left unchanged.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"conv1d_bn: expected [T, d_in], got shape {x.data.shape}")
    t_len = x.data.shape[0]
    if t_len == 0:
        raise EmptySequenceError("conv1d_bn: empty sequence")
    if kernel % 2 == 0:
        raise ConfigError(f"conv kernel must be odd, got {kernel}")
    half = (kernel - 1) // 2
    if kernel == 1:
        cols = x
    else:
        padded = T.pad(x, 0, half, half)
        windows = [T.narrow(padded, 0, j, j + t_len) for j in range(kernel)]
        cols = T.concat(windows, axis=1)                  # [T, kernel*d_in]
    y = T.add(T.matmul(cols, store[f"{prefix}.conv.weight"]),
              store[f"{prefix}.conv.bias"])
    return _batch_norm(store, f"{prefix}.bn", y, training)


def _batch_norm(store: ParamStore, prefix: str, x: Tensor, training: bool) -> Tensor:
    run_mean = store.buffers[f"{prefix}.running_mean"]
    run_var = store.buffers[f"{prefix}.running_var"]
    n = x.data.shape[0]
    if training and n > 1:
        m = T.tmean(x, axis=0, keepdims=True)
        centered = T.sub(x, m)
        var = T.tmean(T.mul(centered, centered), axis=0, keepdims=True)
        normed = T.div(centered, T.sqrt(T.shift(var, BN_EPS)))
        # running update is a side effect outside the tape; unbiased variance
        run_mean *= 1.0 - BN_MOMENTUM
        run_mean += BN_MOMENTUM * m.data[0]
        run_var *= 1.0 - BN_MOMENTUM
        run_var += BN_MOMENTUM * var.data[0] * n / (n - 1)
    else:
        centered = T.sub(x, T.constant(run_mean.copy()))
        normed = T.div(centered, T.constant(np.sqrt(run_var + BN_EPS)))
    return T.add(T.mul(normed, store[f"{prefix}.gamma"]), store[f"{prefix}.beta"])


# ---------------------------------------------------------------------------
# two-layer bidirectional LSTM + layer norm


def init_bilstm2_ln(store: ParamStore, prefix: str, d_in: int, d_f: int) -> None:
    if d_f % 2 != 0:
        raise ConfigError(f"d_f={d_f} must be even to split BiLSTM directions")
    hidden = d_f // 2
    for layer, layer_in in ((0, d_in), (1, d_f)):
        for direction in ("fw", "bw"):
            p = f"{prefix}.l{layer}.{direction}"
            store.weight(f"{p}.w_ih", (layer_in, 4 * hidden), fan_in=layer_in)
            store.weight(f"{p}.w_hh", (hidden, 4 * hidden), fan_in=hidden)
            store.zeros(f"{p}.b_ih", (4 * hidden,))
            store.zeros(f"{p}.b_hh", (4 * hidden,))
    init_layer_norm(store, f"{prefix}.ln", d_f)


def lstm_direction(store: ParamStore, prefix: str, x: Tensor, hidden: int,
                   reverse: bool) -> Tensor:
    """One LSTM direction over [T, d_in] -> [T, hidden].

    Gate order i, f, g, o; state starts at zero.
    """
    t_len = x.data.shape[0]
    gates_x = T.add(T.add(T.matmul(x, store[f"{prefix}.w_ih"]),
                          store[f"{prefix}.b_ih"]),
                    store[f"{prefix}.b_hh"])              # [T, 4H]
    w_hh = store[f"{prefix}.w_hh"]
    h = T.constant(np.zeros((1, hidden)))
    c = T.constant(np.zeros((1, hidden)))
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    outputs: list[Tensor] = []
    for t in steps:
        g = T.add(T.narrow(gates_x, 0, t, t + 1), T.matmul(h, w_hh))
        i_gate = T.sigmoid(T.narrow(g, 1, 0, hidden))
        f_gate = T.sigmoid(T.narrow(g, 1, hidden, 2 * hidden))
        g_gate = T.tanh(T.narrow(g, 1, 2 * hidden, 3 * hidden))
        o_gate = T.sigmoid(T.narrow(g, 1, 3 * hidden, 4 * hidden))
        c = T.add(T.mul(f_gate, c), T.mul(i_gate, g_gate))
        h = T.mul(o_gate, T.tanh(c))
        outputs.append(h)
    if reverse:
        outputs.reverse()
    return T.concat(outputs, axis=0)                      # [T, hidden]


def bilstm2_ln(store: ParamStore, prefix: str, x: Tensor, d_f: int) -> Tensor:
    """Two stacked BiLSTM layers (per-direction hidden d_f/2) with one layer
    norm per time step at the end."""
    if x.data.ndim != 2:
        raise DimensionError(f"bilstm2_ln: expected [T, d_in], got shape {x.data.shape}")
    if x.data.shape[0] == 0:
        raise EmptySequenceError("bilstm2_ln: empty sequence")
    if d_f % 2 != 0:
        raise ConfigError(f"d_f={d_f} must be even to split BiLSTM directions")
    hidden = d_f // 2
    z = x
    for layer in (0, 1):
        fw = lstm_direction(store, f"{prefix}.l{layer}.fw", z, hidden, reverse=False)
        bw = lstm_direction(store, f"{prefix}.l{layer}.bw", z, hidden, reverse=True)
        z = T.concat([fw, bw], axis=1)                    # [T, d_f]
    return layer_norm(store, f"{prefix}.ln", z)


# ---------------------------------------------------------------------------
# positional encoding


def positional_encoding(t_len: int, d_f: int) -> np.ndarray:
    """Sinusoidal table: sin on even feature indices, cos on odd ones,
    frequency 1/10000^(2i/d_f) shared per pair. Non-trainable."""
    if t_len < 1:
        raise EmptySequenceError("positional_encoding: need at least one position")
    if d_f % 2 != 0:
        raise ConfigError(f"positional encoding needs even width, got {d_f}")
    pos = np.arange(t_len, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_f, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d_f)
    pe = np.empty((t_len, d_f))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


@lru_cache(maxsize=8)
def _positional_table(max_len: int, d_f: int) -> np.ndarray:
    table = positional_encoding(max_len, d_f)
    table.flags.writeable = False
    return table


def add_positional(x: Tensor, max_len: int, stage: str) -> Tensor:
    """Add rows of the precomputed positional table; sequences beyond the
    table's capacity are rejected, never truncated."""
    t_len = x.data.shape[0]
    if t_len > max_len:
        raise CapacityError(
            f"{stage}: sequence length {t_len} exceeds positional capacity {max_len}")
    return T.add(x, T.constant(_positional_table(max_len, x.data.shape[1])[:t_len]))


# ---------------------------------------------------------------------------
# multi-head self-attention and encoder stack


def init_mhsa(store: ParamStore, prefix: str, d_f: int) -> None:
    for name in ("wq", "wv", "wo"):
        init_linear(store, f"{prefix}.{name}", d_f, d_f)
    # no key bias: a per-row constant in the scores cancels in the softmax,
    # which would leave a permanently gradient-dead parameter
    store.weight(f"{prefix}.wk.weight", (d_f, d_f), fan_in=d_f)


def multi_head_self_attention(store: ParamStore, prefix: str, z: Tensor, h: int,
                              return_weights: bool = False):
    """Full bidirectional scaled dot-product attention with h heads."""
    t_len, d_f = z.data.shape
    if t_len == 0:
        raise EmptySequenceError("attention: empty sequence")
    if d_f % h != 0:
        raise ConfigError(f"d_f={d_f} not divisible by h={h}")
    d_k = d_f // h
    q = linear(store, f"{prefix}.wq", z)
    k = T.matmul(z, store[f"{prefix}.wk.weight"])
    v = linear(store, f"{prefix}.wv", z)
    heads = []
    weights = []
    for i in range(h):
        lo, hi = i * d_k, (i + 1) * d_k
        qh = T.narrow(q, 1, lo, hi)
        kh = T.narrow(k, 1, lo, hi)
        vh = T.narrow(v, 1, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(d_k))
        probs = T.softmax(scores, axis=-1)                # rows sum to 1
        heads.append(T.matmul(probs, vh))
        if return_weights:
            weights.append(probs.data.copy())
    ctx = heads[0] if h == 1 else T.concat(heads, axis=1)
    out = linear(store, f"{prefix}.wo", ctx)
    if return_weights:
        return out, weights
    return out


def init_transformer_encoder(store: ParamStore, prefix: str, cfg: EncoderConfig) -> None:
    for layer in range(cfg.depth):
        p = f"{prefix}.layer{layer}"
        init_mhsa(store, f"{p}.attn", cfg.d_f)
        init_layer_norm(store, f"{p}.ln1", cfg.d_f)
        init_linear(store, f"{p}.ff.fc1", cfg.d_f, cfg.ff_dim)
        init_linear(store, f"{p}.ff.fc2", cfg.ff_dim, cfg.d_f)
        init_layer_norm(store, f"{p}.ln2", cfg.d_f)


def transformer_encoder(store: ParamStore, prefix: str, z: Tensor,
                        cfg: EncoderConfig) -> Tensor:
    """Post-norm encoder: z <- LN(z + attn(z)); z <- LN(z + ff(z)), repeated
    ``depth`` times. The caller adds positional encoding."""
    for layer in range(cfg.depth):
        p = f"{prefix}.layer{layer}"
        attn = multi_head_self_attention(store, f"{p}.attn", z, cfg.h)
        z = layer_norm(store, f"{p}.ln1", T.add(z, attn))
        ff = linear(store, f"{p}.ff.fc2",
                    T.relu(linear(store, f"{p}.ff.fc1", z)))
        z = layer_norm(store, f"{p}.ln2", T.add(z, ff))
    return z


# ---------------------------------------------------------------------------
# temporal pooling


def init_temporal_pool(store: ParamStore, prefix: str, d_f: int) -> None:
    init_layer_norm(store, f"{prefix}.ln", d_f)


def temporal_pool(store: ParamStore, prefix: str, z: Tensor) -> Tensor:
    """Mean over time, then layer norm; [T, d_f] -> [d_f]."""
    if z.data.shape[0] == 0:
        raise EmptySequenceError("temporal_pool: empty sequence")
    pooled = T.tmean(z, axis=0)                           # [d_f]
    return layer_norm(store, f"{prefix}.ln", pooled)
