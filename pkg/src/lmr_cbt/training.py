"""Optimization and evaluation: task losses, Adam, the metric suite, the
per-sample training loop with batch-accumulated gradients, and the ablation
sweep.

Loss conventions (the task itself fixes only the label space): multilabel
uses mean binary cross-entropy with logits, the sentiment scalar uses L1.
Binary sentiment accuracy excludes labels that are exactly zero and treats
a zero prediction as non-negative. Both conventions are stamped into every
metric log header.
"""

from __future__ import annotations

import io
import json
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .data import Dataset, DatasetBundle, SynthSpec, generate, split_batches
from .errors import ConfigError, ContractError, TrainAbortError
from .layers import substream
from .model import (LmrCbtModel, ModelConfig, load_checkpoint_bytes,
                    make_ablation, param_count, save_checkpoint_bytes)
from .tensor import Tape, Tensor

LOSS_CONVENTIONS = {
    "multilabel-4": "mean-bce-with-logits",
    "sentiment-scalar": "l1",
    "acc2_zero_labels": "excluded",
}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr must be >= 0, batch_size >= 1, epochs >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")

    def to_flat_dict(self) -> dict[str, str]:
        return {f"train.{k}": str(v) for k, v in vars(self).items()}


# ---------------------------------------------------------------------------
# losses


def loss(logits: Tensor, label: np.ndarray, task: str) -> Tensor:
    label = np.asarray(label, dtype=np.float64)
    if task == "multilabel-4":
        if logits.data.shape != (4,) or label.shape != (4,):
            raise ContractError(
                f"multilabel loss expects 4 logits and 4 flags, got {logits.data.shape} and {label.shape}")
        # BCE with logits: mean_j [ softplus(z_j) - z_j * y_j ]
        weighted = T.mul(logits, T.constant(label))
        return T.tmean(T.sub(T.softplus(logits), weighted))
    if task == "sentiment-scalar":
        if logits.data.shape != (1,) or label.shape != (1,):
            raise ContractError(
                f"scalar loss expects 1 logit and 1 label, got {logits.data.shape} and {label.shape}")
        return T.tmean(T.absolute(T.sub(logits, T.constant(label))))
    raise ContractError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# Adam


class Adam:
    """Standard Adam with bias correction and optional global-norm clipping."""

    def __init__(self, store, cfg: TrainConfig):
        self.store = store
        self.cfg = cfg
        self.t = 0
        self.m = {path: np.zeros_like(t.data) for path, t in store.items()}
        self.v = {path: np.zeros_like(t.data) for path, t in store.items()}

    def step(self) -> None:
        cfg = self.cfg
        grads = {path: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for path, t in self.store.items()}
        if cfg.grad_clip is not None:
            total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > cfg.grad_clip:
                factor = cfg.grad_clip / total
                grads = {path: g * factor for path, g in grads.items()}
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for path, tensor in self.store.items():
            g = grads[path]
            m = self.m[path]
            v = self.v[path]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            tensor.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# metrics


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _binary_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = float(np.sum(pred & truth))
    fp = float(np.sum(pred & ~truth))
    fn = float(np.sum(~pred & truth))
    if tp == 0.0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def _weighted_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    """Support-weighted mean of the per-class F1 of a binary task."""
    total = len(truth)
    if total == 0:
        return 0.0
    score = 0.0
    for positive_class in (True, False):
        support = float(np.sum(truth == positive_class))
        if support == 0:
            continue
        score += support / total * _binary_f1(pred == positive_class,
                                              truth == positive_class)
    return score


def scalar_metrics(preds: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """Acc7 over integer bins of the clipped prediction, Acc2/F1 on the sign
    task with zero labels excluded, MAE over everything."""
    preds = preds.reshape(-1)
    labels = labels.reshape(-1)
    mae = float(np.mean(np.abs(preds - labels)))
    pred_bins = _round_half_away(np.clip(preds, -3.0, 3.0))
    label_bins = _round_half_away(np.clip(labels, -3.0, 3.0))
    acc7 = float(np.mean(pred_bins == label_bins))
    nonzero = labels != 0.0
    if np.any(nonzero):
        pred_pos = preds[nonzero] >= 0.0
        label_pos = labels[nonzero] > 0.0
        acc2 = float(np.mean(pred_pos == label_pos))
        f1 = _weighted_f1(pred_pos, label_pos)
    else:
        acc2 = 0.0
        f1 = 0.0
    return {"acc7": acc7, "acc2": acc2, "f1": f1, "mae": mae}


MULTILABEL_CLASSES = ("neutral", "happy", "sad", "angry")


def multilabel_metrics(preds: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """Per-class binary accuracy and F1 on sigmoid(logit) thresholded at 0.5
    (equivalently logit >= 0)."""
    out: dict[str, float] = {}
    accs = []
    f1s = []
    for j, name in enumerate(MULTILABEL_CLASSES):
        pred = preds[:, j] >= 0.0
        truth = labels[:, j] > 0.5
        acc = float(np.mean(pred == truth))
        f1 = _binary_f1(pred, truth)
        out[f"acc_{name}"] = acc
        out[f"f1_{name}"] = f1
        accs.append(acc)
        f1s.append(f1)
    out["acc_mean"] = float(np.mean(accs))
    out["f1_mean"] = float(np.mean(f1s))
    return out


@dataclass
class MetricsReport:
    task: str
    metrics: dict[str, float]
    loss: float
    count: int

    def to_dict(self) -> dict:
        out = {"task": self.task, "loss": self.loss, "count": self.count}
        out.update(self.metrics)
        return out


def evaluate(model: LmrCbtModel, ds: Dataset, task: str | None = None) -> MetricsReport:
    """Metrics over a frozen model; forwards run without a tape."""
    if len(ds) == 0:
        raise ContractError("evaluate: empty dataset")
    task = task or ds.task
    if task != model.cfg.task:
        raise ContractError(f"task mismatch: dataset {task!r} vs model {model.cfg.task!r}")
    was_training = model.training
    model.eval_mode()
    preds = []
    losses = []
    for sample in ds:
        logits = model.forward(sample)
        preds.append(logits.data.copy())
        losses.append(float(loss(logits, sample.label, task).data))
    if was_training:
        model.train_mode()
    preds = np.array(preds)
    labels = np.array([s.label for s in ds.samples])
    if task == "sentiment-scalar":
        metrics = scalar_metrics(preds, labels)
    else:
        metrics = multilabel_metrics(preds, labels)
    return MetricsReport(task=task, metrics=metrics,
                         loss=float(np.mean(losses)), count=len(ds))


def primary_accuracy(report: MetricsReport) -> float:
    """The headline accuracy: sentiment Acc2 or mean per-class accuracy."""
    key = "acc2" if report.task == "sentiment-scalar" else "acc_mean"
    return report.metrics[key]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best_checkpoint: bytes
    best_epoch: int
    log_records: list[dict]

    def log_text(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.log_records) + "\n"


def train(model: LmrCbtModel, train_ds: Dataset, val_ds: Dataset,
          cfg: TrainConfig, extra_config: dict[str, str] | None = None,
          clock=time.perf_counter, log_train_metrics: bool = True) -> TrainResult:
    """Per-sample forward/backward with batch-accumulated gradients, one Adam
    step per batch, per-epoch evaluation, best-validation-loss selection.

    ``clock`` exists so deterministic runs can pin the wall-time field;
    ``log_train_metrics=False`` skips the per-epoch train-split evaluation
    pass (ablation sweeps only need validation selection).
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ContractError("train: need nonempty train and val datasets")
    task = model.cfg.task
    optimizer = Adam(model.store, cfg)
    header = {"event": "header", "seed": cfg.seed, "task": task,
              "loss_conventions": LOSS_CONVENTIONS}
    if extra_config:
        header["config"] = dict(sorted(extra_config.items()))
    records: list[dict] = [header]
    start = clock()

    best_loss = math.inf
    best_epoch = -1
    best_blob = save_checkpoint_bytes(model, extra_config)
    for epoch in range(cfg.epochs):
        model.train_mode()
        epoch_seed = int(substream(cfg.seed, f"shuffle:{epoch}").integers(0, 2**63))
        batches = split_batches(len(train_ds), cfg.batch_size, epoch_seed)
        for batch_index, batch in enumerate(batches):
            model.store.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                sample = train_ds[idx]
                with Tape():
                    out = model.forward(sample)
                    sample_loss = loss(out, sample.label, task)
                    T.backward(sample_loss)
                batch_loss += float(sample_loss.data)
            if not math.isfinite(batch_loss):
                raise TrainAbortError(
                    f"non-finite loss at epoch {epoch} batch {batch_index}",
                    epoch=epoch, batch=batch_index)
            inv = 1.0 / len(batch)
            for _, tensor in model.store.items():
                if tensor.grad is not None:
                    tensor.grad *= inv
            optimizer.step()

        train_report = evaluate(model, train_ds, task) if log_train_metrics else None
        val_report = evaluate(model, val_ds, task)
        if train_report is not None:
            records.append({"event": "epoch", "epoch": epoch, "split": "train",
                            "seed": cfg.seed, "wall_s": round(clock() - start, 6),
                            **train_report.to_dict()})
        records.append({"event": "epoch", "epoch": epoch, "split": "val",
                        "seed": cfg.seed, "wall_s": round(clock() - start, 6),
                        **val_report.to_dict()})
        if val_report.loss < best_loss:
            best_loss = val_report.loss
            best_epoch = epoch
            best_blob = save_checkpoint_bytes(model, extra_config)
            record = {"event": "best", "epoch": epoch,
                      "val_loss": val_report.loss, "val": val_report.to_dict()}
            if train_report is not None:
                record["train"] = train_report.to_dict()
            records.append(record)
    records.append({"event": "done", "best_epoch": best_epoch,
                    "best_val_loss": None if best_epoch < 0 else best_loss,
                    "epochs": cfg.epochs, "seed": cfg.seed,
                    "wall_s": round(clock() - start, 6)})
    return TrainResult(best_checkpoint=best_blob, best_epoch=best_epoch,
                       log_records=records)


# ---------------------------------------------------------------------------
# ablation sweep


ABLATION_VARIANTS = ("text-conv1d", "text-bilstm", "fuse-to-A", "fuse-to-V", "fuse-to-L")

VARIANT_LABELS = {
    "text-conv1d": "Conv1D text",
    "text-bilstm": "BiLSTM text",
    "fuse-to-A": "[V, L]->A",
    "fuse-to-V": "[L, A]->V",
    "fuse-to-L": "[V, A]->L",
}


@dataclass
class AblationRow:
    variant: str
    label: str
    params: int
    acc_mean: float
    acc_std: float
    f1_mean: float
    f1_std: float
    seeds: list[int]

    def to_dict(self) -> dict:
        return {"variant": self.variant, "label": self.label, "params": self.params,
                "params_m": round(self.params / 1e6, 4),
                "acc_mean": self.acc_mean, "acc_std": self.acc_std,
                "f1_mean": self.f1_mean, "f1_std": self.f1_std,
                "seeds": self.seeds}


def train_variant_once(cfg: ModelConfig, bundle: DatasetBundle,
                       train_cfg: TrainConfig, seed: int) -> MetricsReport:
    """One seeded train/eval cycle used by the sweep; evaluates on test."""
    run_cfg = replace(train_cfg, seed=seed)
    model = LmrCbtModel(cfg, init_seed=int(substream(seed, "init").integers(0, 2**63)))
    result = train(model, bundle.train, bundle.val, run_cfg, clock=lambda: 0.0,
                   log_train_metrics=False)
    best_model, _ = load_checkpoint_bytes(result.best_checkpoint)
    return evaluate(best_model, bundle.test)


def _ablation_variant_job(args) -> AblationRow:
    base_cfg, variant, spec, train_cfg, seeds = args
    bundle = generate(spec)
    cfg = make_ablation(base_cfg, variant)
    accs = []
    f1s = []
    for seed in seeds:
        report = train_variant_once(cfg, bundle, train_cfg, seed)
        accs.append(primary_accuracy(report))
        key = "f1" if report.task == "sentiment-scalar" else "f1_mean"
        f1s.append(report.metrics[key])
    return AblationRow(
        variant=variant, label=VARIANT_LABELS[variant], params=param_count(cfg),
        acc_mean=float(np.mean(accs)), acc_std=float(np.std(accs)),
        f1_mean=float(np.mean(f1s)), f1_std=float(np.std(f1s)),
        seeds=list(seeds))


def run_ablation(base_cfg: ModelConfig, spec: SynthSpec, train_cfg: TrainConfig,
                 seeds: list[int], variants=ABLATION_VARIANTS,
                 max_workers: int = 1, on_variant=None) -> list[AblationRow]:
    """Train every variant on the same seeded data and report mean/std of the
    headline metrics; parameter counts come from the configs alone.

    ``max_workers > 1`` fans variants out across processes; results are
    identical either way because each job regenerates the seeded data.
    """
    if not seeds:
        raise ConfigError("run_ablation: need at least one seed")
    jobs = [(base_cfg, variant, spec, train_cfg, list(seeds)) for variant in variants]
    rows: list[AblationRow] = []
    if max_workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            for row in pool.map(_ablation_variant_job, jobs):
                rows.append(row)
                if on_variant is not None:
                    on_variant(row)
    else:
        for job in jobs:
            row = _ablation_variant_job(job)
            rows.append(row)
            if on_variant is not None:
                on_variant(row)
    return rows


def ablation_table_text(rows: list[AblationRow]) -> str:
    header = f"{'variant':<14}{'label':<14}{'params(M)':>10}{'acc':>16}{'f1':>16}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row.variant:<14}{row.label:<14}{row.params / 1e6:>10.4f}"
            f"{row.acc_mean:>9.4f}±{row.acc_std:<6.4f}"
            f"{row.f1_mean:>9.4f}±{row.f1_std:<6.4f}")
    return "\n".join(lines) + "\n"


def ablation_table_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    buf.write("variant,label,params,params_m,acc_mean,acc_std,f1_mean,f1_std\n")
    for row in rows:
        buf.write(f"{row.variant},{row.label},{row.params},{row.params / 1e6:.4f},"
                  f"{row.acc_mean:.6f},{row.acc_std:.6f},{row.f1_mean:.6f},{row.f1_std:.6f}\n")
    return buf.getvalue()
