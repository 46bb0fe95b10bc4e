"""Central finite-difference verification of every backward rule.

Each unit builds a seeded scenario (leaf tensors plus a closure computing a
scalar loss), takes tape gradients once, then compares them against central
differences (step 1e-5) coordinate by coordinate. The finite-difference side
only ever calls the forward path, so it stays independent of the backward
rules it checks. Relative error uses a 1e-3 denominator floor so exactly
zero gradients compare cleanly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import model as M
from . import tensor as T
from .data import MultimodalSample
from .training import loss as task_loss
from .layers import EncoderConfig, ParamStore
from .tensor import Tape, Tensor

STEP = 1e-5
TOL = 1e-4
REL_FLOOR = 1e-3


@dataclass
class UnitResult:
    name: str
    max_rel_err: float
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} max rel err {self.max_rel_err:.3e} (tol {self.tol:.0e})"


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def fd_gradients(forward, leaves: list[Tensor], step: float = STEP) -> list[np.ndarray]:
    """Central differences of ``forward()`` w.r.t. every leaf coordinate."""
    grads = []
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(forward().data)
            flat[i] = orig - step
            down = float(forward().data)
            flat[i] = orig
            g[i] = (up - down) / (2.0 * step)
        grads.append(g.reshape(leaf.data.shape))
    return grads


def check_unit(forward, leaves: list[Tensor], step: float = STEP) -> float:
    """Max relative error between tape and finite-difference gradients."""
    for leaf in leaves:
        leaf.grad = None
    with Tape():
        loss = forward()
        T.backward(loss)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
                for leaf in leaves]
    numeric = fd_gradients(forward, leaves, step)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _reduce(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, T.constant(weights)))


# ---------------------------------------------------------------------------
# op units


def _op_units():
    """name -> builder(seed) returning (forward, leaves)."""

    def matmul_2d(seed):
        rng = _rng(seed)
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
        w = rng.normal(size=(3, 2))
        return lambda: _reduce(T.matmul(a, b), w), [a, b]

    def matmul_batched(seed):
        rng = _rng(seed)
        a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 2))
        w = rng.normal(size=(2, 3, 2))
        return lambda: _reduce(T.matmul(a, b), w), [a, b]

    def matmul_vec(seed):
        rng = _rng(seed)
        a, b, c = _leaf(rng, (4,)), _leaf(rng, (4, 3)), _leaf(rng, (3,))
        w = rng.normal(size=())
        return lambda: _reduce(T.matmul(T.matmul(a, b), c), w), [a, b, c]

    def add_broadcast(seed):
        rng = _rng(seed)
        a, b = _leaf(rng, (4, 3)), _leaf(rng, (3,))
        w = rng.normal(size=(4, 3))
        return lambda: _reduce(T.add(a, b), w), [a, b]

    def sub_op(seed):
        rng = _rng(seed)
        a, b = _leaf(rng, (3, 3)), _leaf(rng, (1, 3))
        w = rng.normal(size=(3, 3))
        return lambda: _reduce(T.sub(a, b), w), [a, b]

    def mul_broadcast(seed):
        rng = _rng(seed)
        a, b = _leaf(rng, (4, 3)), _leaf(rng, (4, 1))
        w = rng.normal(size=(4, 3))
        return lambda: _reduce(T.mul(a, b), w), [a, b]

    def div_op(seed):
        rng = _rng(seed)
        a = _leaf(rng, (3, 4))
        b = Tensor(rng.uniform(0.5, 1.5, size=(3, 1)) * rng.choice([-1.0, 1.0], size=(3, 1)),
                   requires_grad=True)
        w = rng.normal(size=(3, 4))
        return lambda: _reduce(T.div(a, b), w), [a, b]

    def scale_shift(seed):
        rng = _rng(seed)
        a = _leaf(rng, (5,))
        w = rng.normal(size=(5,))
        return lambda: _reduce(T.shift(T.scale(a, -1.7), 0.3), w), [a]

    def unary(fn, transform=None):
        def build(seed):
            rng = _rng(seed)
            raw = rng.uniform(-2.0, 2.0, size=(3, 4))
            if transform is not None:
                raw = transform(raw)
            a = Tensor(raw, requires_grad=True)
            w = rng.normal(size=(3, 4))
            return lambda: _reduce(fn(a), w), [a]
        return build

    def softmax_rows(seed):
        rng = _rng(seed)
        a = _leaf(rng, (3, 4), -2.0, 2.0)
        w = rng.normal(size=(3, 4))
        return lambda: _reduce(T.softmax(a, axis=-1), w), [a]

    def softmax_cols(seed):
        rng = _rng(seed)
        a = _leaf(rng, (3, 4), -2.0, 2.0)
        w = rng.normal(size=(3, 4))
        return lambda: _reduce(T.softmax(a, axis=0), w), [a]

    def concat_op(seed):
        rng = _rng(seed)
        a, b, c = _leaf(rng, (2, 3)), _leaf(rng, (1, 3)), _leaf(rng, (2, 3))
        w = rng.normal(size=(5, 3))
        return lambda: _reduce(T.concat([a, b, c], axis=0), w), [a, b, c]

    def narrow_pad(seed):
        rng = _rng(seed)
        a = _leaf(rng, (5, 3))
        w = rng.normal(size=(4, 3))
        return lambda: _reduce(T.narrow(T.pad(a, 0, 1, 1), 0, 2, 6), w), [a]

    def transpose_reshape(seed):
        rng = _rng(seed)
        a = _leaf(rng, (3, 4))
        w = rng.normal(size=(2, 6))
        return lambda: _reduce(T.reshape(T.transpose(a), (2, 6)), w), [a]

    def sums(seed):
        rng = _rng(seed)
        a = _leaf(rng, (3, 4))
        w = rng.normal(size=(4,))
        return (lambda: T.add(T.tsum(T.mul(a, a)),
                              _reduce(T.tmean(a, axis=0), w)), [a])

    # keep |x| away from kinks for relu/abs
    nudge = lambda raw: raw + np.sign(raw) * 0.05
    positive = lambda raw: np.abs(raw) + 0.5
    return {
        "matmul": matmul_2d,
        "matmul-batched": matmul_batched,
        "matmul-vec": matmul_vec,
        "add": add_broadcast,
        "sub": sub_op,
        "mul": mul_broadcast,
        "div": div_op,
        "scale-shift": scale_shift,
        "tanh": unary(T.tanh),
        "relu": unary(T.relu, nudge),
        "sigmoid": unary(T.sigmoid),
        "exp": unary(T.exp),
        "log": unary(T.log, positive),
        "sqrt": unary(T.sqrt, positive),
        "abs": unary(T.absolute, nudge),
        "softplus": unary(T.softplus),
        "softmax-feature": softmax_rows,
        "softmax-time": softmax_cols,
        "concat": concat_op,
        "narrow-pad": narrow_pad,
        "transpose-reshape": transpose_reshape,
        "sum-mean": sums,
    }


# ---------------------------------------------------------------------------
# layer units


def _store_leaves(store: ParamStore) -> list[Tensor]:
    return [t for _, t in store.items()]


def _layer_units():
    def linear_unit(seed):
        rng = _rng(seed)
        store = ParamStore(seed)
        L.init_linear(store, "fc", 3, 4)
        x = _leaf(rng, (5, 3))
        w = rng.normal(size=(5, 4))
        return lambda: _reduce(L.linear(store, "fc", x), w), [x] + _store_leaves(store)

    def layer_norm_unit(seed):
        rng = _rng(seed)
        store = ParamStore(seed)
        L.init_layer_norm(store, "ln", 4)
        x = _leaf(rng, (3, 4))
        w = rng.normal(size=(3, 4))
        return lambda: _reduce(L.layer_norm(store, "ln", x), w), [x] + _store_leaves(store)

    def conv_train(seed):
        rng = _rng(seed)
        store = ParamStore(seed)
        L.init_conv1d_bn(store, "conv", 3, 4, 3)
        x = _leaf(rng, (5, 3))
        w = rng.normal(size=(5, 4))

        def forward():
            store.buffers["conv.bn.running_mean"][:] = 0.0
            store.buffers["conv.bn.running_var"][:] = 1.0
            return _reduce(L.conv1d_bn(store, "conv", x, 3, training=True), w)

        return forward, [x] + _store_leaves(store)

    def conv_eval(seed):
        rng = _rng(seed)
        store = ParamStore(seed)
        L.init_conv1d_bn(store, "conv", 3, 4, 3)
        store.buffers["conv.bn.running_mean"][:] = rng.uniform(-0.2, 0.2, size=4)
        store.buffers["conv.bn.running_var"][:] = rng.uniform(0.5, 1.5, size=4)
        x = _leaf(rng, (1, 3))   # single step exercises the running-stats path
        w = rng.normal(size=(1, 4))
        return (lambda: _reduce(L.conv1d_bn(store, "conv", x, 3, training=True), w),
                [x] + _store_leaves(store))

    def bilstm_unit(seed):
        rng = _rng(seed)
        store = ParamStore(seed)
        L.init_bilstm2_ln(store, "lstm", 3, 4)
        x = _leaf(rng, (3, 3))
        w = rng.normal(size=(3, 4))
        return (lambda: _reduce(L.bilstm2_ln(store, "lstm", x, 4), w),
                [x] + _store_leaves(store))

    def mhsa_unit(seed):
        rng = _rng(seed)
        store = ParamStore(seed)
        L.init_mhsa(store, "attn", 4)
        x = _leaf(rng, (3, 4))
        w = rng.normal(size=(3, 4))
        return (lambda: _reduce(L.multi_head_self_attention(store, "attn", x, 2), w),
                [x] + _store_leaves(store))

    def encoder_unit(seed):
        rng = _rng(seed)
        cfg = EncoderConfig(d_f=4, h=2, depth=1, ff_dim=8, max_len=8)
        store = ParamStore(seed)
        L.init_transformer_encoder(store, "enc", cfg)
        x = _leaf(rng, (3, 4))
        w = rng.normal(size=(3, 4))
        return (lambda: _reduce(L.transformer_encoder(store, "enc", x, cfg), w),
                [x] + _store_leaves(store))

    def pool_unit(seed):
        rng = _rng(seed)
        store = ParamStore(seed)
        L.init_temporal_pool(store, "pool", 4)
        x = _leaf(rng, (4, 4))
        w = rng.normal(size=(4,))
        return (lambda: _reduce(L.temporal_pool(store, "pool", x), w),
                [x] + _store_leaves(store))

    return {
        "linear": linear_unit,
        "layer-norm": layer_norm_unit,
        "conv1d-bn-batchstats": conv_train,
        "conv1d-bn-runningstats": conv_eval,
        "bilstm2-ln": bilstm_unit,
        "attention": mhsa_unit,
        "encoder": encoder_unit,
        "temporal-pool": pool_unit,
    }


# ---------------------------------------------------------------------------
# end-to-end model units


def tiny_config(task: str = "sentiment-scalar") -> M.ModelConfig:
    return M.ModelConfig(d_l=3, d_v=2, d_a=2, d_f=4, h=1, depth=1, k_v=3, k_a=1,
                         d_out=4 if task == "multilabel-4" else 1, task=task,
                         max_len=8, ff_mult=2)


def _tiny_sample(rng, cfg: M.ModelConfig, task: str) -> MultimodalSample:
    lengths = (3, 4, 5)
    label = (np.array([1.8]) if task == "sentiment-scalar"
             else np.array([1.0, 0.0, 1.0, 0.0]))
    return MultimodalSample(
        lang=rng.uniform(-1, 1, size=(lengths[0], cfg.d_l)),
        vis=rng.uniform(-1, 1, size=(lengths[1], cfg.d_v)),
        aud=rng.uniform(-1, 1, size=(lengths[2], cfg.d_a)),
        label=label, id="gradcheck")


def _model_units():
    def model_unit(task):
        def build(seed):
            rng = _rng(seed)
            cfg = tiny_config(task)
            model = M.LmrCbtModel(cfg, init_seed=seed)
            model.eval_mode()   # frozen BN statistics keep forward pure
            sample = _tiny_sample(rng, cfg, task)
            leaves = _store_leaves(model.store)
            return lambda: task_loss(model.forward(sample), sample.label, task), leaves
        return build

    return {
        "model-sentiment": model_unit("sentiment-scalar"),
        "model-multilabel": model_unit("multilabel-4"),
    }


# ---------------------------------------------------------------------------
# suite driver


SCOPES = ("ops", "layers", "model")


def run_suite(scope: str, trials: int = 5, base_seed: int = 101) -> list[UnitResult]:
    if scope == "ops":
        units, n_trials = _op_units(), trials
    elif scope == "layers":
        units, n_trials = _layer_units(), min(trials, 2)
    elif scope == "model":
        units, n_trials = _model_units(), 1
    else:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    results = []
    for name, build in units.items():
        worst = 0.0
        for trial in range(n_trials):
            forward, leaves = build(base_seed + 17 * trial)
            worst = max(worst, check_unit(forward, leaves))
        results.append(UnitResult(name=name, max_rel_err=worst))
    return results


def run_all() -> list[UnitResult]:
    out = []
    for scope in SCOPES:
        out.extend(run_suite(scope))
    return out
