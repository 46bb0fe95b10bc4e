"""Seeded synthetic unaligned multimodal datasets plus the MMDS record file.

Each sample draws per-modality latents and a cross latent that is split
across the three modalities, so the label's cross component can only be
recovered jointly. Sequences embed the latent through a fixed per-modality
projection; temporal position carries no label information. All randomness
is Box-Muller over the PCG64 uniform stream, so a seed pins every byte.

On disk a dataset is a self-describing binary stream (magic ``MMDS``):
float32 little-endian payloads, varint record lengths. In memory everything
is float64; generated values are quantized to float32 precision so a
save/load round trip is exact.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, SchemaError
from .layers import substream

MAGIC = b"MMDS"
FORMAT_VERSION = 1
_TASK_CODES = {"multilabel-4": 0, "sentiment-scalar": 1}
_TASK_NAMES = {v: k for k, v in _TASK_CODES.items()}
_LABEL_DIMS = {"multilabel-4": 4, "sentiment-scalar": 1}


@dataclass
class MultimodalSample:
    """Three unaligned feature sequences plus a task label."""
    lang: np.ndarray   # [T_l, d_l]
    vis: np.ndarray    # [T_v, d_v]
    aud: np.ndarray    # [T_a, d_a]
    label: np.ndarray  # [4] binary flags or [1] scalar in [-3, 3]
    id: str

    def lengths(self) -> tuple[int, int, int]:
        return self.lang.shape[0], self.vis.shape[0], self.aud.shape[0]


class Dataset:
    """Immutable sample collection with fixed dims and task."""

    def __init__(self, task: str, dims: tuple[int, int, int],
                 samples: list[MultimodalSample]):
        if task not in _TASK_CODES:
            raise ConfigError(f"unknown task {task!r}")
        self.task = task
        self.dims = tuple(dims)
        self.samples = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i: int) -> MultimodalSample:
        return self.samples[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.task != other.task or self.dims != other.dims or len(self) != len(other):
            return False
        for a, b in zip(self.samples, other.samples):
            if a.id != b.id:
                return False
            if not (np.array_equal(a.lang, b.lang) and np.array_equal(a.vis, b.vis)
                    and np.array_equal(a.aud, b.aud) and np.array_equal(a.label, b.label)):
                return False
        return True

    def content_hash(self) -> str:
        """Order-independent hex digest over record payloads."""
        total = 0
        for sample in self.samples:
            digest = hashlib.sha256(_encode_record(sample)).digest()
            total = (total + int.from_bytes(digest, "big")) % (1 << 256)
        return f"{total:064x}"


@dataclass(frozen=True)
class SynthSpec:
    """Generation recipe; weights must be nonnegative, sum to 1, and keep a
    strictly positive cross component."""
    n_train: int
    n_val: int
    n_test: int
    len_l: tuple[int, int]
    len_v: tuple[int, int]
    len_a: tuple[int, int]
    d_l: int
    d_v: int
    d_a: int
    task: str
    w_l: float = 0.3
    w_v: float = 0.15
    w_a: float = 0.15
    w_cross: float = 0.4
    noise_sigma: float = 0.1
    seed: int = 0
    margin: float = 0.3
    pattern_amp: float = 0.3
    ramp: float = 0.0   # language-only amplitude drift over time

    def __post_init__(self):
        if self.task not in _TASK_CODES:
            raise ConfigError(f"unknown task {self.task!r}")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train == 0:
            raise ConfigError("need n_train >= 1 and nonnegative split sizes")
        for name, rng_pair in (("len_l", self.len_l), ("len_v", self.len_v),
                               ("len_a", self.len_a)):
            lo, hi = rng_pair
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name}={rng_pair} is not a valid length range")
        if min(self.d_l, self.d_v, self.d_a) < 1:
            raise ConfigError("feature dims must be positive")
        weights = (self.w_l, self.w_v, self.w_a, self.w_cross)
        if any(w < 0 for w in weights):
            raise ConfigError(f"signal weights must be nonnegative, got {weights}")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError(f"signal weights must sum to 1, got {weights}")
        if self.w_cross <= 0:
            raise ConfigError("w_cross must be strictly positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if not 0 <= self.margin < 1:
            raise ConfigError("margin must lie in [0, 1)")

    @property
    def n_classes(self) -> int:
        return _LABEL_DIMS[self.task]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.d_l, self.d_v, self.d_a)

    def to_flat_dict(self) -> dict[str, str]:
        out = {}
        for k, v in vars(self).items():
            out[f"data.{k}"] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out


@dataclass
class SignalReport:
    """Nearest-centroid label recovery from latents: full concatenation vs
    each single modality (fit on train, evaluated on val)."""
    full: float
    per_modality: dict[str, float]
    n_val: int


@dataclass
class DatasetBundle:
    train: Dataset
    val: Dataset
    test: Dataset
    spec: SynthSpec
    signal: SignalReport | None = None
    latents: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def splits(self) -> dict[str, Dataset]:
        return {"train": self.train, "val": self.val, "test": self.test}


# ---------------------------------------------------------------------------
# generation


def _gauss(rng: np.random.Generator, shape) -> np.ndarray:
    """Box-Muller over the uniform stream; no platform RNG dependence."""
    n = int(np.prod(shape)) if shape else 1
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)          # (0, 1]
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n].reshape(shape)


def _f32(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).astype(np.float64)


def _draw_latents(spec: SynthSpec, rng: np.random.Generator):
    """Rejection-sample latents until every class margin is respected and the
    scalar label stays inside [-3, 3] pre-clip."""
    n_cls = spec.n_classes
    inv_sqrt3 = 1.0 / math.sqrt(3.0)
    for _ in range(10000):
        z = {m: _gauss(rng, (n_cls,)) for m in ("lang", "vis", "aud")}
        c = {m: _gauss(rng, (n_cls,)) for m in ("lang", "vis", "aud")}
        mix = (spec.w_l * z["lang"] + spec.w_v * z["vis"] + spec.w_a * z["aud"]
               + spec.w_cross * (c["lang"] + c["vis"] + c["aud"]) * inv_sqrt3)
        mags = np.abs(mix)
        if mags.min() >= spec.margin and mags.max() <= 1.0:
            distract = {m: _gauss(rng, (1,)) for m in ("lang", "vis", "aud")}
            latents = {m: np.concatenate([z[m], c[m], distract[m]]) for m in z}
            return latents, mix
    raise ConfigError("margin rejection failed; the configured margin is too tight")


def _label_from_mix(spec: SynthSpec, mix: np.ndarray) -> np.ndarray:
    if spec.task == "sentiment-scalar":
        return _f32(np.clip(3.0 * mix[:1], -3.0, 3.0))
    return (mix > 0).astype(np.float64)


def _embed_sequence(u: np.ndarray, proj: np.ndarray, t_len: int,
                    spec: SynthSpec, rng: np.random.Generator,
                    ramp: float = 0.0) -> np.ndarray:
    d = proj.shape[0]
    base = proj @ u
    t = np.arange(t_len, dtype=np.float64)
    if t_len > 1 and ramp != 0.0:
        # mean-preserving linear amplitude drift across time
        envelope = 1.0 + ramp * (t / (t_len - 1) - 0.5)
    else:
        envelope = np.ones(t_len)
    freq = float(rng.integers(1, 4))
    phase = rng.random()
    direction = _gauss(rng, (d,)) / math.sqrt(d)
    pattern = np.sin(2.0 * np.pi * (freq * t / t_len + phase))[:, None] * direction[None, :]
    seq = envelope[:, None] * base[None, :] + spec.pattern_amp * pattern
    if spec.noise_sigma > 0:
        seq = seq + spec.noise_sigma * _gauss(rng, (t_len, d))
    return _f32(seq)


def generate(spec: SynthSpec) -> DatasetBundle:
    """Produce train/val/test splits, fully reproducible from the seed."""
    projections = {}
    for modality, d in zip(("lang", "vis", "aud"), spec.dims):
        u_dim = 2 * spec.n_classes + 1
        rng = substream(spec.seed, f"proj:{modality}")
        projections[modality] = _gauss(rng, (d, u_dim)) / math.sqrt(u_dim)

    ranges = {"lang": spec.len_l, "vis": spec.len_v, "aud": spec.len_a}
    splits: dict[str, Dataset] = {}
    latent_log: dict[str, dict[str, np.ndarray]] = {}
    for split, count in (("train", spec.n_train), ("val", spec.n_val),
                         ("test", spec.n_test)):
        samples = []
        us = {m: [] for m in ("lang", "vis", "aud")}
        mixes = []
        for i in range(count):
            rng = substream(spec.seed, f"data:{split}:{i}")
            latents, mix = _draw_latents(spec, rng)
            label = _label_from_mix(spec, mix)
            seqs = {}
            for modality in ("lang", "vis", "aud"):
                lo, hi = ranges[modality]
                t_len = int(rng.integers(lo, hi + 1))
                ramp = spec.ramp if modality == "lang" else 0.0
                seqs[modality] = _embed_sequence(latents[modality],
                                                 projections[modality],
                                                 t_len, spec, rng, ramp=ramp)
            samples.append(MultimodalSample(
                lang=seqs["lang"], vis=seqs["vis"], aud=seqs["aud"],
                label=label, id=f"{split}-{i:05d}"))
            for modality in us:
                us[modality].append(latents[modality])
            mixes.append(mix)
        splits[split] = Dataset(spec.task, spec.dims, samples)
        latent_log[split] = {m: np.array(v) for m, v in us.items()}
        latent_log[split]["mix"] = np.array(mixes)

    bundle = DatasetBundle(train=splits["train"], val=splits["val"],
                           test=splits["test"], spec=spec, latents=latent_log)
    if spec.n_val > 0:
        bundle.signal = _signal_report(bundle)
    return bundle


def _centroid_accuracy(train_u: np.ndarray, train_y: np.ndarray,
                       val_u: np.ndarray, val_y: np.ndarray) -> float:
    pos, neg = train_u[train_y], train_u[~train_y]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    mu_p, mu_n = pos.mean(axis=0), neg.mean(axis=0)
    w = mu_p - mu_n
    bias = 0.5 * (mu_p @ mu_p - mu_n @ mu_n)
    pred = val_u @ w - bias > 0
    return float(np.mean(pred == val_y))


def _signal_report(bundle: DatasetBundle) -> SignalReport:
    tr, va = bundle.latents["train"], bundle.latents["val"]
    n_cls = bundle.spec.n_classes
    full_tr = np.concatenate([tr[m] for m in ("lang", "vis", "aud")], axis=1)
    full_va = np.concatenate([va[m] for m in ("lang", "vis", "aud")], axis=1)

    def class_mean(u_tr, u_va):
        accs = []
        for j in range(n_cls):
            y_tr = tr["mix"][:, j] > 0
            y_va = va["mix"][:, j] > 0
            accs.append(_centroid_accuracy(u_tr, y_tr, u_va, y_va))
        return float(np.mean(accs))

    return SignalReport(
        full=class_mean(full_tr, full_va),
        per_modality={m: class_mean(tr[m], va[m]) for m in ("lang", "vis", "aud")},
        n_val=len(bundle.val))


# ---------------------------------------------------------------------------
# MMDS record file


def _write_varint(buf, n: int) -> None:
    while True:
        byte = n & 0x7F
        n >>= 7
        buf.write(bytes([byte | (0x80 if n else 0)]))
        if not n:
            return


def _read_varint(buf, index: int) -> int:
    shift = 0
    value = 0
    while True:
        raw = buf.read(1)
        if not raw:
            raise ParseError(f"record {index}: truncated varint", index)
        byte = raw[0]
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value
        shift += 7
        if shift > 63:
            raise ParseError(f"record {index}: varint too long", index)


def _encode_record(sample: MultimodalSample) -> bytes:
    buf = io.BytesIO()
    encoded_id = sample.id.encode("utf-8")
    _write_varint(buf, len(encoded_id))
    buf.write(encoded_id)
    for seq in (sample.lang, sample.vis, sample.aud):
        _write_varint(buf, seq.shape[0])
    for seq in (sample.lang, sample.vis, sample.aud):
        buf.write(seq.astype("<f4").tobytes(order="C"))
    buf.write(np.asarray(sample.label).astype("<f4").tobytes(order="C"))
    return buf.getvalue()


def save_dataset(ds: Dataset, path: str) -> None:
    """Atomic write of the MMDS container."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<B", _TASK_CODES[ds.task]))
    buf.write(struct.pack("<III", *ds.dims))
    buf.write(struct.pack("<B", _LABEL_DIMS[ds.task]))
    buf.write(struct.pack("<Q", len(ds)))
    for sample in ds.samples:
        buf.write(_encode_record(sample))
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_dataset(path: str) -> Dataset:
    """Stream records, validating lengths, dims, and finiteness."""
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != MAGIC:
        raise SchemaError(f"bad dataset magic {magic!r}, expected {MAGIC!r}")
    header = buf.read(4 + 1 + 12 + 1 + 8)
    if len(header) != 26:
        raise SchemaError("truncated dataset header")
    (version,) = struct.unpack_from("<I", header, 0)
    if version != FORMAT_VERSION:
        raise SchemaError(f"unsupported dataset version {version}")
    (task_code,) = struct.unpack_from("<B", header, 4)
    if task_code not in _TASK_NAMES:
        raise SchemaError(f"unknown task code {task_code}")
    task = _TASK_NAMES[task_code]
    dims = struct.unpack_from("<III", header, 5)
    (label_dim,) = struct.unpack_from("<B", header, 17)
    if label_dim != _LABEL_DIMS[task]:
        raise SchemaError(f"label dim {label_dim} inconsistent with task {task!r}")
    (n_records,) = struct.unpack_from("<Q", header, 18)

    samples = []
    for index in range(n_records):
        id_len = _read_varint(buf, index)
        raw_id = buf.read(id_len)
        if len(raw_id) != id_len:
            raise ParseError(f"record {index}: truncated id", index)
        lengths = [_read_varint(buf, index) for _ in range(3)]
        if min(lengths) < 1:
            raise ParseError(f"record {index}: zero-length sequence {lengths}", index)
        seqs = []
        for t_len, d in zip(lengths, dims):
            raw = buf.read(t_len * d * 4)
            if len(raw) != t_len * d * 4:
                raise ParseError(f"record {index}: truncated sequence payload", index)
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(t_len, d)
            if not np.all(np.isfinite(arr)):
                raise ParseError(f"record {index}: non-finite feature values", index)
            seqs.append(arr)
        raw = buf.read(label_dim * 4)
        if len(raw) != label_dim * 4:
            raise ParseError(f"record {index}: truncated label", index)
        label = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(label)):
            raise ParseError(f"record {index}: non-finite label", index)
        samples.append(MultimodalSample(lang=seqs[0], vis=seqs[1], aud=seqs[2],
                                        label=label, id=raw_id.decode("utf-8")))
    if buf.read(1):
        raise ParseError("trailing bytes after final record", n_records)
    return Dataset(task, dims, samples)


def check_dims(ds: Dataset, expected: tuple[int, int, int]) -> None:
    if tuple(ds.dims) != tuple(expected):
        raise SchemaError(f"dataset dims {ds.dims} do not match expected {expected}")


# ---------------------------------------------------------------------------
# batching and summaries


def split_batches(n_or_ds, batch_size: int, seed: int) -> list[list[int]]:
    """Seeded shuffle into batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = n_or_ds if isinstance(n_or_ds, int) else len(n_or_ds)
    order = substream(seed, "shuffle").permutation(n)
    return [order[i:i + batch_size].tolist() for i in range(0, n, batch_size)]


def dataset_summary(ds: Dataset, name: str) -> list[dict]:
    """Line-delimited structured summary records."""
    lengths = np.array([s.lengths() for s in ds.samples]) if len(ds) else np.zeros((0, 3), dtype=int)
    records = [{
        "kind": "split", "name": name, "count": len(ds), "task": ds.task,
        "dims": list(ds.dims), "hash": ds.content_hash(),
    }]
    for i, modality in enumerate(("lang", "vis", "aud")):
        if len(ds):
            col = lengths[:, i]
            stats = {"min": int(col.min()), "max": int(col.max()),
                     "mean": round(float(col.mean()), 3)}
        else:
            stats = {"min": 0, "max": 0, "mean": 0.0}
        records.append({"kind": "lengths", "split": name, "modality": modality, **stats})
    if len(ds):
        labels = np.array([s.label for s in ds.samples])
        if ds.task == "sentiment-scalar":
            bins = np.round(np.clip(labels[:, 0], -3, 3)).astype(int)
            hist = {str(b): int(np.sum(bins == b)) for b in range(-3, 4)}
        else:
            hist = {f"class{j}": int(labels[:, j].sum()) for j in range(labels.shape[1])}
        records.append({"kind": "labels", "split": name, "histogram": hist})
    return records


def summary_text(records: list[dict]) -> str:
    return "\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n"
