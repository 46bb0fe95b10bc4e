"""Command-line entry point.

Subcommands: ``synth`` (generate MMDS datasets), ``train``, ``eval``,
``gradcheck``, ``params``, ``ablate``. Every run is deterministic given its
flags and ``--seed``; the fully resolved configuration is echoed into every
output artifact. Value resolution order: command-line flag, then config
file (flat ``section.key=value`` lines), then profile default.

Exit codes: 0 success, 2 config/validation error, 3 data/schema error,
4 numeric abort, 5 gradcheck failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import __version__, gradcheck
from .data import (SynthSpec, check_dims, dataset_summary, generate,
                   load_dataset, save_dataset, summary_text)
from .errors import ConfigError, DataError, LmrCbtError, NumericError
from .layers import substream
from .model import (LmrCbtModel, ModelConfig, load_checkpoint_bytes,
                    parameter_ledger)
from .profiles import PROFILES, get_profile
from .training import (LOSS_CONVENTIONS, TrainConfig, ablation_table_csv,
                    ablation_table_text, evaluate, run_ablation, train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5

FORMAT_VERSION = 1

_TARGET_ALIASES = {"l": "lang", "v": "vis", "a": "aud",
                   "lang": "lang", "vis": "vis", "aud": "aud"}


def _parse_range(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"expected 'lo,hi' range, got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_grad_clip(text: str):
    return None if text.lower() in ("none", "off") else float(text)


def _parse_target(text: str) -> str:
    key = text.strip().lower()
    if key not in _TARGET_ALIASES:
        raise ConfigError(f"fusion target must be one of L/V/A, got {text!r}")
    return _TARGET_ALIASES[key]


MODEL_KEYS = {
    "d_l": int, "d_v": int, "d_a": int, "d_f": int, "h": int, "depth": int,
    "k_v": int, "k_a": int, "d_out": int, "task": str,
    "fusion_target": _parse_target, "text_encoder": str, "max_len": int,
    "ff_mult": int, "k_text": int, "fuse_softmax_axis": str,
}
TRAIN_KEYS = {
    "lr": float, "batch_size": int, "epochs": int, "beta1": float,
    "beta2": float, "eps": float, "grad_clip": _parse_grad_clip, "seed": int,
}
SYNTH_KEYS = {
    "n_train": int, "n_val": int, "n_test": int,
    "len_l": _parse_range, "len_v": _parse_range, "len_a": _parse_range,
    "d_l": int, "d_v": int, "d_a": int, "task": str,
    "w_l": float, "w_v": float, "w_a": float, "w_cross": float,
    "noise_sigma": float, "seed": int, "margin": float,
    "pattern_amp": float, "ramp": float,
}
_SECTIONS = {"model": MODEL_KEYS, "train": TRAIN_KEYS, "data": SYNTH_KEYS}


def _load_config_file(path: str) -> dict[str, dict]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    sections: dict[str, dict] = {"model": {}, "train": {}, "data": {}}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            section, _, name = key.partition(".")
            if section not in _SECTIONS or name not in _SECTIONS[section]:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            sections[section][name] = _SECTIONS[section][name](value)
    return sections


def _resolve_section(section: str, profile_defaults: dict, file_cfg: dict,
                     flags: dict) -> dict:
    merged = dict(profile_defaults)
    merged.update(file_cfg.get(section, {}))
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def _resolved_flat(model_cfg: ModelConfig | None, train_cfg: TrainConfig | None,
                   spec: SynthSpec | None, profile: str | None,
                   seed: int | None) -> dict[str, str]:
    flat: dict[str, str] = {"run.format_version": str(FORMAT_VERSION)}
    if profile:
        flat["run.profile"] = profile
    if seed is not None:
        flat["run.seed"] = str(seed)
    if model_cfg:
        flat.update(model_cfg.to_flat_dict())
    if train_cfg:
        flat.update(train_cfg.to_flat_dict())
    if spec:
        flat.update(spec.to_flat_dict())
    return dict(sorted(flat.items()))


def _write_atomic(path: str, payload: bytes | str) -> None:
    mode = "wb" if isinstance(payload, bytes) else "w"
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, mode) as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _model_flags(args) -> dict:
    return {
        "d_l": args.d_l, "d_v": args.d_v, "d_a": args.d_a, "d_f": args.d_f,
        "h": args.heads, "depth": args.depth, "k_v": args.k_v, "k_a": args.k_a,
        "d_out": args.d_out, "task": args.task,
        "fusion_target": _parse_target(args.fusion_target) if args.fusion_target else None,
        "text_encoder": args.text_encoder, "max_len": args.max_len,
    }


def _build_model_config(args, file_cfg) -> tuple[ModelConfig, str | None]:
    profile = args.profile
    defaults = get_profile(profile)["model"] if profile else {}
    merged = _resolve_section("model", defaults, file_cfg, _model_flags(args))
    required = ("d_l", "d_v", "d_a", "d_f", "h", "depth", "k_v", "k_a",
                "d_out", "task")
    missing = [k for k in required if k not in merged]
    if missing:
        raise ConfigError(
            f"model config incomplete (missing {missing}); pass --profile or flags")
    return ModelConfig(**merged), profile


def _build_train_config(args, file_cfg, profile: str | None) -> TrainConfig:
    defaults = dict(get_profile(profile)["train"]) if profile else {}
    flags = {"lr": args.lr, "batch_size": args.batch_size, "epochs": args.epochs,
             "grad_clip": _parse_grad_clip(args.grad_clip) if args.grad_clip else None,
             "seed": args.seed}
    merged = _resolve_section("train", defaults, file_cfg, flags)
    return TrainConfig(**merged)


def _build_synth_spec(args, file_cfg, profile: str | None) -> SynthSpec:
    defaults = dict(get_profile(profile)["synth"]) if profile else {}
    flags = {"n_train": args.n_train, "n_val": args.n_val, "n_test": args.n_test,
             "noise_sigma": args.noise_sigma, "margin": args.margin,
             "seed": args.seed, "task": args.task, "ramp": args.ramp}
    if args.weights:
        parts = [float(x) for x in args.weights.split(",")]
        if len(parts) != 4:
            raise ConfigError(f"--weights needs wL,wV,wA,wCross, got {args.weights!r}")
        flags.update({"w_l": parts[0], "w_v": parts[1], "w_a": parts[2],
                      "w_cross": parts[3]})
    for name in ("len_l", "len_v", "len_a"):
        value = getattr(args, name)
        if value is not None:
            flags[name] = _parse_range(value)
    for name in ("d_l", "d_v", "d_a"):
        value = getattr(args, name, None)
        if value is not None:
            flags[name] = value
    merged = _resolve_section("data", defaults, file_cfg, flags)
    required = ("n_train", "n_val", "n_test", "len_l", "len_v", "len_a",
                "d_l", "d_v", "d_a", "task")
    missing = [k for k in required if k not in merged]
    if missing:
        raise ConfigError(
            f"synth spec incomplete (missing {missing}); pass --profile or flags")
    return SynthSpec(**merged)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    spec = _build_synth_spec(args, file_cfg, args.profile)
    os.makedirs(args.out, exist_ok=True)
    bundle = generate(spec)
    resolved = _resolved_flat(None, None, spec, args.profile, args.seed)
    records = [{"kind": "config", "format_version": FORMAT_VERSION, **resolved}]
    for name, ds in bundle.splits().items():
        path = os.path.join(args.out, f"{name}.mmds")
        save_dataset(ds, path)
        records.extend(dataset_summary(ds, name))
        print(f"wrote {path} ({len(ds)} samples)")
    if bundle.signal is not None:
        records.append({"kind": "signal",
                        "full": bundle.signal.full,
                        "per_modality": bundle.signal.per_modality,
                        "n_val": bundle.signal.n_val})
    _write_atomic(os.path.join(args.out, "summary.jsonl"), summary_text(records))
    print(f"wrote {os.path.join(args.out, 'summary.jsonl')}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    model_cfg, profile = _build_model_config(args, file_cfg)
    train_cfg = _build_train_config(args, file_cfg, profile)
    train_path = os.path.join(args.data, "train.mmds")
    val_path = os.path.join(args.data, "val.mmds")
    for path in (train_path, val_path):
        if not os.path.exists(path):
            raise DataError(f"missing dataset file: {path}")
    train_ds = load_dataset(train_path)
    val_ds = load_dataset(val_path)
    check_dims(train_ds, (model_cfg.d_l, model_cfg.d_v, model_cfg.d_a))
    check_dims(val_ds, (model_cfg.d_l, model_cfg.d_v, model_cfg.d_a))
    if train_ds.task != model_cfg.task:
        raise DataError(
            f"dataset task {train_ds.task!r} does not match model task {model_cfg.task!r}")

    resolved = _resolved_flat(model_cfg, train_cfg, None, profile, train_cfg.seed)
    init_seed = int(substream(train_cfg.seed, "init").integers(0, 2**63))
    model = LmrCbtModel(model_cfg, init_seed=init_seed)
    clock = (lambda: 0.0) if args.clock == "fixed" else time.perf_counter
    result = train(model, train_ds, val_ds, train_cfg,
                   extra_config=resolved, clock=clock)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.lmrc")
    log_path = os.path.join(args.out, "metrics.jsonl")
    _write_atomic(ckpt_path, result.best_checkpoint)
    _write_atomic(log_path, result.log_text())
    print(f"wrote {ckpt_path}")
    print(f"wrote {log_path}")
    best = [r for r in result.log_records if r.get("event") == "best"]
    if best:
        print(f"best epoch {best[-1]['epoch']}: val_loss {best[-1]['val_loss']:.6f}")
    return EXIT_OK


def _report_lines(payload: dict) -> str:
    lines = [f"{key} = {payload[key]!r}" for key in sorted(payload)]
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    with open(args.checkpoint, "rb") as fh:
        raw = fh.read()
    model, fields = load_checkpoint_bytes(raw)
    ds = load_dataset(args.data)
    check_dims(ds, (model.cfg.d_l, model.cfg.d_v, model.cfg.d_a))
    if ds.task != model.cfg.task:
        raise DataError(f"dataset task {ds.task!r} does not match checkpoint task {model.cfg.task!r}")
    report = evaluate(model, ds)
    payload = {"format_version": FORMAT_VERSION, "data": os.path.basename(args.data),
               "loss_conventions": LOSS_CONVENTIONS, "config": fields,
               **report.to_dict()}
    if args.format == "json":
        text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    else:
        flat = {k: v for k, v in payload.items() if not isinstance(v, dict)}
        text = _report_lines(flat)
    sys.stdout.write(text)
    if args.out:
        _write_atomic(args.out, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    scopes = gradcheck.SCOPES if args.scope == "all" else (args.scope,)
    failed = False
    for scope in scopes:
        results = gradcheck.run_suite(scope)
        print(f"[{scope}]")
        for result in results:
            print(f"  {result.line()}")
        failed = failed or any(not r.passed for r in results)
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_params(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    model_cfg, profile = _build_model_config(args, file_cfg)
    rows, subtotals, total = parameter_ledger(model_cfg)
    width = max(len(path) for path, _, _ in rows)
    for path, shape, count in rows:
        print(f"{path:<{width}}  {str(shape):<14} {count:>10}")
    print("-" * (width + 27))
    for module in sorted(subtotals):
        print(f"{'subtotal ' + module:<{width}}  {'':<14} {subtotals[module]:>10}")
    print(f"{'total':<{width}}  {'':<14} {total:>10}  ({total / 1e6:.4f}M)")
    claim = get_profile(profile)["claim_m"] if profile else None
    if claim is not None:
        print(f"published claim for profile {profile!r}: {claim:.2f}M")
    return EXIT_OK


def cmd_ablate(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    model_cfg, profile = _build_model_config(args, file_cfg)
    train_cfg = _build_train_config(args, file_cfg, profile)
    spec = _build_synth_spec(args, file_cfg, profile)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [train_cfg.seed]
    os.makedirs(args.out, exist_ok=True)
    max_workers = int(os.environ.get("LMRCBT_THREADS", "1"))
    resolved = _resolved_flat(model_cfg, train_cfg, spec, profile, args.seed)

    def on_variant(row):
        path = os.path.join(args.out, f"variant-{row.variant}.json")
        _write_atomic(path, json.dumps(row.to_dict(), sort_keys=True, indent=2) + "\n")
        print(f"finished {row.variant}: acc {row.acc_mean:.4f}±{row.acc_std:.4f}")

    rows = run_ablation(model_cfg, spec, train_cfg, seeds,
                        max_workers=max(1, max_workers), on_variant=on_variant)
    config_header = "".join(f"# {k}={v}\n" for k, v in resolved.items())
    _write_atomic(os.path.join(args.out, "table.txt"),
                  config_header + ablation_table_text(rows))
    _write_atomic(os.path.join(args.out, "table.csv"),
                  config_header + ablation_table_csv(rows))
    _write_atomic(os.path.join(args.out, "run.json"), json.dumps(
        {"format_version": FORMAT_VERSION, "config": resolved, "seeds": seeds,
         "rows": [r.to_dict() for r in rows]}, sort_keys=True, indent=2) + "\n")
    print(ablation_table_text(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common(parser, with_model=False, with_synth=False, with_train=False):
    parser.add_argument("--profile", choices=sorted(PROFILES), default=None)
    parser.add_argument("--config", default=None, help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=0)
    if with_model:
        parser.add_argument("--d-l", dest="d_l", type=int)
        parser.add_argument("--d-v", dest="d_v", type=int)
        parser.add_argument("--d-a", dest="d_a", type=int)
        parser.add_argument("--d-f", dest="d_f", type=int)
        parser.add_argument("--heads", type=int)
        parser.add_argument("--depth", type=int)
        parser.add_argument("--k-v", dest="k_v", type=int)
        parser.add_argument("--k-a", dest="k_a", type=int)
        parser.add_argument("--d-out", dest="d_out", type=int)
        parser.add_argument("--task", choices=("multilabel-4", "sentiment-scalar"))
        parser.add_argument("--fusion-target", help="L, V, or A")
        parser.add_argument("--text-encoder", choices=("bilstm", "conv1d"))
        parser.add_argument("--max-len", dest="max_len", type=int)
    elif with_synth:
        parser.add_argument("--task", choices=("multilabel-4", "sentiment-scalar"))
    if with_synth:
        parser.add_argument("--n-train", dest="n_train", type=int)
        parser.add_argument("--n-val", dest="n_val", type=int)
        parser.add_argument("--n-test", dest="n_test", type=int)
        parser.add_argument("--noise-sigma", dest="noise_sigma", type=float)
        parser.add_argument("--margin", type=float)
        parser.add_argument("--ramp", type=float)
        parser.add_argument("--weights", help="wL,wV,wA,wCross (must sum to 1)")
        parser.add_argument("--len-l", dest="len_l", help="lo,hi")
        parser.add_argument("--len-v", dest="len_v", help="lo,hi")
        parser.add_argument("--len-a", dest="len_a", help="lo,hi")
        if not with_model:
            parser.add_argument("--d-l", dest="d_l", type=int)
            parser.add_argument("--d-v", dest="d_v", type=int)
            parser.add_argument("--d-a", dest="d_a", type=int)
    if with_train:
        parser.add_argument("--lr", type=float)
        parser.add_argument("--batch-size", dest="batch_size", type=int)
        parser.add_argument("--epochs", type=int)
        parser.add_argument("--grad-clip", dest="grad_clip")
        parser.add_argument("--clock", choices=("wall", "fixed"), default="wall")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmr-cbt",
        description="Cross-modal block transformer: data synthesis, training, "
                    "evaluation, gradient checking, parameter audit, ablations.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate seeded synthetic MMDS datasets")
    _add_common(p, with_synth=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on MMDS datasets")
    _add_common(p, with_model=True, with_train=True)
    p.add_argument("--data", required=True, help="directory with train.mmds/val.mmds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an MMDS file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="one MMDS file")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("scope", nargs="?", choices=("ops", "layers", "model", "all"),
                   default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter ledger and totals")
    _add_common(p, with_model=True)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ablate", help="train the ablation variants and tabulate")
    _add_common(p, with_model=True, with_synth=True, with_train=True)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LmrCbtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
