"""The full three-branch network: modality preprocessing, two deep
self-attention branches, residual cross-modal fusion into the target
modality's sequence, a global encoder over the fused sequence, and a
two-layer prediction head.

Roles are positional: the two non-target modalities (in L, V, A order) feed
the deep branches, the target modality receives the fused residual. The
preprocessor is bound to the modality (BiLSTM for language, convolution for
visual/audio) regardless of role, so swapping the fusion target never
changes the parameter count.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError, DataError, DimensionError, SchemaError
from .layers import EncoderConfig, ParamStore
from .tensor import Tensor

MODALITIES = ("lang", "vis", "aud")
TASKS = ("multilabel-4", "sentiment-scalar")

CHECKPOINT_MAGIC = b"LMRC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """All architecture hyperparameters.

    ``fusion_target`` names the modality whose preprocessed sequence receives
    the fused residual; the other two run the deep branches.
    ``text_encoder='conv1d'`` is the ablation arm that swaps the language
    BiLSTM for a k=3 convolution.
    """
    d_l: int
    d_v: int
    d_a: int
    d_f: int
    h: int
    depth: int
    k_v: int
    k_a: int
    d_out: int
    task: str
    fusion_target: str = "lang"
    text_encoder: str = "bilstm"
    max_len: int = 64
    ff_mult: int = 4
    k_text: int = 3
    fuse_softmax_axis: str = "feature"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.fusion_target not in MODALITIES:
            raise ConfigError(
                f"fusion_target must be one of {MODALITIES}, got {self.fusion_target!r}")
        if self.text_encoder not in ("bilstm", "conv1d"):
            raise ConfigError(f"text_encoder must be 'bilstm' or 'conv1d', got {self.text_encoder!r}")
        if self.fuse_softmax_axis not in ("feature", "time"):
            raise ConfigError(
                f"fuse_softmax_axis must be 'feature' or 'time', got {self.fuse_softmax_axis!r}")
        if self.d_f % self.h != 0:
            raise ConfigError(f"d_f={self.d_f} must be divisible by h={self.h}")
        if self.d_f % 2 != 0:
            raise ConfigError(f"d_f={self.d_f} must be even")
        for name, k in (("k_v", self.k_v), ("k_a", self.k_a), ("k_text", self.k_text)):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be odd and positive, got {k}")
        if min(self.d_l, self.d_v, self.d_a, self.d_out, self.depth, self.max_len) < 1:
            raise ConfigError("dims, depth and max_len must all be positive")

    @property
    def ff_dim(self) -> int:
        return self.ff_mult * self.d_f

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(d_f=self.d_f, h=self.h, depth=self.depth,
                             ff_dim=self.ff_dim, max_len=self.max_len)

    def modality_dim(self, modality: str) -> int:
        return {"lang": self.d_l, "vis": self.d_v, "aud": self.d_a}[modality]

    def deep_modalities(self) -> tuple[str, str]:
        rest = tuple(m for m in MODALITIES if m != self.fusion_target)
        return rest  # canonical (L, V, A) order

    def to_flat_dict(self) -> dict[str, str]:
        return {f"model.{k}": str(v) for k, v in vars(self).items()}


@dataclass
class FusionState:
    """Intermediate results of one forward pass through the fusion block:
    the two pooled deep-branch vectors, the preprocessed target sequence,
    the fused sequence (same length as the target), and the pooled vector
    of the globally encoded fused sequence."""
    f_deep1: Tensor
    f_deep2: Tensor
    x_target: Tensor
    x_fused: Tensor
    f_fused: Tensor


def make_ablation(cfg: ModelConfig, variant: str) -> ModelConfig:
    """Table-style ablation arms: swap the text encoder or the fusion target."""
    if variant == "text-conv1d":
        return replace(cfg, text_encoder="conv1d")
    if variant == "text-bilstm":
        return replace(cfg, text_encoder="bilstm")
    if variant == "fuse-to-L":
        return replace(cfg, fusion_target="lang")
    if variant == "fuse-to-V":
        return replace(cfg, fusion_target="vis")
    if variant == "fuse-to-A":
        return replace(cfg, fusion_target="aud")
    raise ConfigError(f"unknown ablation variant {variant!r}")


class LmrCbtModel:
    """Assembled parameter set plus the forward pipeline."""

    def __init__(self, cfg: ModelConfig, init_seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore(init_seed)
        self.training = True
        self._build()

    def _build(self) -> None:
        cfg = self.cfg
        if cfg.text_encoder == "bilstm":
            L.init_bilstm2_ln(self.store, "pre.lang", cfg.d_l, cfg.d_f)
        else:
            L.init_conv1d_bn(self.store, "pre.lang", cfg.d_l, cfg.d_f, cfg.k_text)
        L.init_conv1d_bn(self.store, "pre.vis", cfg.d_v, cfg.d_f, cfg.k_v)
        L.init_conv1d_bn(self.store, "pre.aud", cfg.d_a, cfg.d_f, cfg.k_a)
        enc = cfg.encoder_config()
        for branch in ("deep1", "deep2", "fused"):
            L.init_transformer_encoder(self.store, f"enc.{branch}", enc)
            L.init_temporal_pool(self.store, f"pool.{branch}", cfg.d_f)
        L.init_linear(self.store, "fuse.merge", 2 * cfg.d_f, cfg.d_f)
        L.init_linear(self.store, "fuse.target", cfg.d_f, cfg.d_f)
        L.init_linear(self.store, "head.fc1", 3 * cfg.d_f, cfg.d_f)
        L.init_linear(self.store, "head.fc2", cfg.d_f, cfg.d_out)

    def train_mode(self) -> None:
        self.training = True

    def eval_mode(self) -> None:
        self.training = False

    # -- pipeline stages ----------------------------------------------------

    def preprocess(self, sample) -> dict[str, Tensor]:
        """Project each raw modality sequence to width d_f, keeping its own
        length: BiLSTM+LN for language, Conv1D+BN for visual and audio."""
        cfg = self.cfg
        seqs = {"lang": sample.lang, "vis": sample.vis, "aud": sample.aud}
        out: dict[str, Tensor] = {}
        for modality, raw in seqs.items():
            arr = np.asarray(raw, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] == 0:
                raise DataError(f"preprocess: modality {modality!r} is empty or not [T, d]")
            want = cfg.modality_dim(modality)
            if arr.shape[1] != want:
                raise DimensionError(
                    f"preprocess: modality {modality!r} has feature dim {arr.shape[1]}, expected {want}")
            x = T.constant(arr)
            if modality == "lang" and cfg.text_encoder == "bilstm":
                out[modality] = L.bilstm2_ln(self.store, "pre.lang", x, cfg.d_f)
            else:
                kernel = {"lang": cfg.k_text, "vis": cfg.k_v, "aud": cfg.k_a}[modality]
                out[modality] = L.conv1d_bn(self.store, f"pre.{modality}", x,
                                            kernel, self.training)
        return out

    def local_temporal(self, deep1: Tensor, deep2: Tensor) -> tuple[Tensor, Tensor]:
        """Deep branches: add positional encoding, encode, pool to vectors."""
        cfg = self.cfg
        enc = cfg.encoder_config()
        pooled = []
        for name, z in (("deep1", deep1), ("deep2", deep2)):
            z = L.add_positional(z, cfg.max_len, f"local_temporal({name})")
            z = L.transformer_encoder(self.store, f"enc.{name}", z, enc)
            pooled.append(L.temporal_pool(self.store, f"pool.{name}", z))
        return pooled[0], pooled[1]

    def cross_modal_fuse(self, f_deep1: Tensor, f_deep2: Tensor,
                         x_target: Tensor) -> Tensor:
        """Residual fusion: the two pooled deep vectors are merged to one
        joint vector, broadcast-added to a linear map of the target sequence,
        squashed (tanh), normalized (softmax per time step), and added back
        onto the target sequence."""
        cfg = self.cfg
        for name, vec in (("deep1", f_deep1), ("deep2", f_deep2)):
            if vec.data.shape != (cfg.d_f,):
                raise DimensionError(
                    f"cross_modal_fuse: {name} has shape {vec.data.shape}, expected ({cfg.d_f},)")
        if x_target.data.ndim != 2 or x_target.data.shape[1] != cfg.d_f:
            raise DimensionError(
                f"cross_modal_fuse: target has shape {x_target.data.shape}, expected [T, {cfg.d_f}]")
        joint = L.linear(self.store, "fuse.merge", T.concat([f_deep1, f_deep2], axis=0))
        pre = T.add(L.linear(self.store, "fuse.target", x_target), joint)
        axis = -1 if cfg.fuse_softmax_axis == "feature" else 0
        gate = T.softmax(T.tanh(pre), axis=axis)
        return T.add(gate, x_target)

    def fusion_state(self, sample) -> FusionState:
        """Run the pipeline up to and including global attention over the
        fused sequence, exposing every fusion-stage intermediate."""
        cfg = self.cfg
        pre = self.preprocess(sample)
        d1_name, d2_name = cfg.deep_modalities()
        f1, f2 = self.local_temporal(pre[d1_name], pre[d2_name])
        x_target = pre[cfg.fusion_target]
        fused = self.cross_modal_fuse(f1, f2, x_target)
        z = L.add_positional(fused, cfg.max_len, "global_attention")
        z = L.transformer_encoder(self.store, "enc.fused", z, cfg.encoder_config())
        f_fused = L.temporal_pool(self.store, "pool.fused", z)
        return FusionState(f_deep1=f1, f_deep2=f2, x_target=x_target,
                           x_fused=fused, f_fused=f_fused)

    def forward(self, sample) -> Tensor:
        """Full pipeline; returns raw scores of shape [d_out]."""
        state = self.fusion_state(sample)
        stacked = T.concat([state.f_fused, state.f_deep1, state.f_deep2], axis=0)
        hid = T.relu(L.linear(self.store, "head.fc1", stacked))
        return L.linear(self.store, "head.fc2", hid)

    def predict(self, sample) -> np.ndarray:
        """Forward without gradient tracking."""
        return self.forward(sample).data

    # -- state access ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent state (trainable params then buffers), path-sorted."""
        state = {path: t.data for path, t in self.store.items()}
        state.update({path: buf for path, buf in self.store.buffer_items()})
        return dict(sorted(state.items()))

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise SchemaError(
                f"checkpoint state mismatch: missing={missing[:3]} extra={extra[:3]}")
        for path, arr in state.items():
            target = (self.store.params[path].data if path in self.store.params
                      else self.store.buffers[path])
            if target.shape != arr.shape:
                raise SchemaError(
                    f"checkpoint shape mismatch at {path!r}: {arr.shape} vs {target.shape}")
            target[...] = arr


# ---------------------------------------------------------------------------
# parameter accounting


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Trainable parameter shapes by path, without allocating a model."""
    model = LmrCbtModel(cfg, init_seed=0)
    return {path: t.data.shape for path, t in model.store.items()}


def param_count(cfg: ModelConfig) -> int:
    """Number of trainable scalars (positional table and BN running
    statistics excluded)."""
    total = 0
    for shape in parameter_shapes(cfg).values():
        n = 1
        for extent in shape:
            n *= extent
        total += n
    return total


def parameter_ledger(cfg: ModelConfig) -> tuple[list[tuple[str, tuple[int, ...], int]], dict[str, int], int]:
    """Per-path rows, per-module subtotals, and the grand total."""
    rows = []
    subtotals: dict[str, int] = {}
    total = 0
    for path, shape in sorted(parameter_shapes(cfg).items()):
        n = 1
        for extent in shape:
            n *= extent
        rows.append((path, shape, n))
        module = path.split(".", 1)[0]
        subtotals[module] = subtotals.get(module, 0) + n
        total += n
    return rows, subtotals, total


# ---------------------------------------------------------------------------
# vectorized fusion over a batch (forward-only helper)


def cross_modal_fuse_batch(model: LmrCbtModel, f_deep1: np.ndarray,
                           f_deep2: np.ndarray, x_targets: np.ndarray) -> np.ndarray:
    """Vectorized counterpart of ``cross_modal_fuse`` over a stacked batch
    [B, T, d_f] with matching pooled vectors [B, d_f]. Must agree with the
    per-sample loop bit for bit."""
    store = model.store
    w_m = store["fuse.merge.weight"].data
    b_m = store["fuse.merge.bias"].data
    w_t = store["fuse.target.weight"].data
    b_t = store["fuse.target.bias"].data
    cat = np.concatenate([f_deep1, f_deep2], axis=1)
    # vector-matrix product per row: BLAS rounds a stacked GEMM differently,
    # which would break bit-equality with the per-sample loop
    joint = np.stack([row @ w_m for row in cat]) + b_m               # [B, d_f]
    pre = x_targets @ w_t + b_t + joint[:, None, :]
    act = np.tanh(pre)
    axis = -1 if model.cfg.fuse_softmax_axis == "feature" else 1
    shifted = act - act.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    gate = e / e.sum(axis=axis, keepdims=True)
    return gate + x_targets


# ---------------------------------------------------------------------------
# checkpoint container


def _canonical_config_text(config_fields: dict[str, str]) -> str:
    lines = [f"{k}={config_fields[k]}" for k in sorted(config_fields)]
    return "\n".join(lines) + "\n"


def save_checkpoint_bytes(model: LmrCbtModel,
                          extra_config: dict[str, str] | None = None) -> bytes:
    """Serialize config text plus every state array, little-endian float64."""
    fields = model.cfg.to_flat_dict()
    if extra_config:
        fields.update(extra_config)
    text = _canonical_config_text(fields).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(text)))
    buf.write(text)
    state = model.state_arrays()
    buf.write(struct.pack("<I", len(state)))
    for path, arr in state.items():
        encoded = path.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(arr.astype("<f8").tobytes(order="C"))
    return buf.getvalue()


def parse_checkpoint_bytes(raw: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise SchemaError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    try:
        (version,) = struct.unpack("<I", buf.read(4))
        if version != CHECKPOINT_VERSION:
            raise SchemaError(f"unsupported checkpoint version {version}")
        (text_len,) = struct.unpack("<Q", buf.read(8))
        text = buf.read(text_len).decode("utf-8")
        fields: dict[str, str] = {}
        for line in text.splitlines():
            if line:
                key, _, value = line.partition("=")
                fields[key] = value
        (n_entries,) = struct.unpack("<I", buf.read(4))
        state: dict[str, np.ndarray] = {}
        for _ in range(n_entries):
            (path_len,) = struct.unpack("<H", buf.read(2))
            path = buf.read(path_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", buf.read(1))
            shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
            count = 1
            for extent in shape:
                count *= extent
            payload = buf.read(count * 8)
            if len(payload) != count * 8:
                raise SchemaError(f"truncated data for parameter {path!r}")
            data = np.frombuffer(payload, dtype="<f8").reshape(shape)
            state[path] = np.ascontiguousarray(data, dtype=np.float64)
    except (struct.error, UnicodeDecodeError) as exc:
        raise SchemaError(f"truncated or corrupt checkpoint: {exc}") from None
    if buf.read(1):
        raise SchemaError("trailing bytes after checkpoint payload")
    return fields, state


def config_from_fields(fields: dict[str, str]) -> ModelConfig:
    """Rebuild a ModelConfig from the flat key=value form."""
    kwargs = {}
    for key, value in fields.items():
        if not key.startswith("model."):
            continue
        name = key[len("model."):]
        kwargs[name] = value
    try:
        return ModelConfig(
            d_l=int(kwargs["d_l"]), d_v=int(kwargs["d_v"]), d_a=int(kwargs["d_a"]),
            d_f=int(kwargs["d_f"]), h=int(kwargs["h"]), depth=int(kwargs["depth"]),
            k_v=int(kwargs["k_v"]), k_a=int(kwargs["k_a"]), d_out=int(kwargs["d_out"]),
            task=kwargs["task"], fusion_target=kwargs["fusion_target"],
            text_encoder=kwargs["text_encoder"], max_len=int(kwargs["max_len"]),
            ff_mult=int(kwargs["ff_mult"]), k_text=int(kwargs["k_text"]),
            fuse_softmax_axis=kwargs["fuse_softmax_axis"])
    except KeyError as exc:
        raise SchemaError(f"checkpoint config is missing field {exc}") from None


def load_checkpoint_bytes(raw: bytes, init_seed: int = 0) -> tuple[LmrCbtModel, dict[str, str]]:
    fields, state = parse_checkpoint_bytes(raw)
    cfg = config_from_fields(fields)
    model = LmrCbtModel(cfg, init_seed=init_seed)
    model.load_state_arrays(state)
    model.eval_mode()
    return model, fields
