"""Named configuration presets.

``mosei``/``mosi``/``iemocap`` bind the published per-dataset hyperparameter
rows (width, heads, kernels, depth, optimizer settings) to the real feature
dims (300/35/74). The ``*-like`` profiles keep each row's model
hyperparameters but swap in synthetic feature dims so the whole pipeline is
exercisable at desk scale; ``tiny`` is the smoke-test size.
"""

from __future__ import annotations

from .errors import ConfigError

REAL_DIMS = {"d_l": 300, "d_v": 35, "d_a": 74}
SYNTH_DIMS = {"d_l": 24, "d_v": 16, "d_a": 20}

# published total-parameter claims (millions) for the real-dim profiles
PUBLISHED_PARAM_CLAIMS_M = {"mosei": 0.41, "mosi": 0.35, "iemocap": 0.34}

_MOSEI_MODEL = {"d_f": 40, "h": 8, "depth": 5, "k_v": 3, "k_a": 3,
                "d_out": 1, "task": "sentiment-scalar"}
_MOSI_MODEL = {"d_f": 30, "h": 10, "depth": 4, "k_v": 3, "k_a": 1,
               "d_out": 1, "task": "sentiment-scalar"}
_IEMOCAP_MODEL = {"d_f": 40, "h": 5, "depth": 5, "k_v": 3, "k_a": 5,
                  "d_out": 4, "task": "multilabel-4"}

_MOSEI_TRAIN = {"lr": 1e-3, "batch_size": 32, "epochs": 120}
_MOSI_TRAIN = {"lr": 2e-3, "batch_size": 8, "epochs": 100}
_IEMOCAP_TRAIN = {"lr": 1e-3, "batch_size": 32, "epochs": 60}

_SYNTH_COMMON = {
    "n_train": 500, "n_val": 100, "n_test": 200,
    "len_l": (5, 20), "len_v": (8, 30), "len_a": (10, 40),
    "w_l": 0.3, "w_v": 0.15, "w_a": 0.15, "w_cross": 0.4,
    "noise_sigma": 0.1, "margin": 0.3, "pattern_amp": 0.3, "ramp": 0.0,
}

PROFILES: dict[str, dict] = {
    "mosei": {
        "model": {**_MOSEI_MODEL, **REAL_DIMS, "max_len": 1024},
        "train": _MOSEI_TRAIN,
        "synth": {**_SYNTH_COMMON, **REAL_DIMS, "task": "sentiment-scalar"},
        "claim_m": PUBLISHED_PARAM_CLAIMS_M["mosei"],
    },
    "mosi": {
        "model": {**_MOSI_MODEL, **REAL_DIMS, "max_len": 1024},
        "train": _MOSI_TRAIN,
        "synth": {**_SYNTH_COMMON, **REAL_DIMS, "task": "sentiment-scalar"},
        "claim_m": PUBLISHED_PARAM_CLAIMS_M["mosi"],
    },
    "iemocap": {
        "model": {**_IEMOCAP_MODEL, **REAL_DIMS, "max_len": 1024},
        "train": _IEMOCAP_TRAIN,
        "synth": {**_SYNTH_COMMON, **REAL_DIMS, "task": "multilabel-4"},
        "claim_m": PUBLISHED_PARAM_CLAIMS_M["iemocap"],
    },
    "mosei-like": {
        "model": {**_MOSEI_MODEL, **SYNTH_DIMS, "max_len": 64},
        "train": _MOSEI_TRAIN,
        "synth": {**_SYNTH_COMMON, **SYNTH_DIMS, "task": "sentiment-scalar"},
        "claim_m": None,
    },
    "mosi-like": {
        "model": {**_MOSI_MODEL, **SYNTH_DIMS, "max_len": 64},
        "train": _MOSI_TRAIN,
        "synth": {**_SYNTH_COMMON, **SYNTH_DIMS, "task": "sentiment-scalar"},
        "claim_m": None,
    },
    "iemocap-like": {
        "model": {**_IEMOCAP_MODEL, **SYNTH_DIMS, "max_len": 64},
        "train": _IEMOCAP_TRAIN,
        "synth": {**_SYNTH_COMMON, **SYNTH_DIMS, "task": "multilabel-4"},
        "claim_m": None,
    },
    "tiny": {
        "model": {"d_f": 8, "h": 2, "depth": 1, "k_v": 3, "k_a": 3, "d_out": 1,
                  "task": "sentiment-scalar", "d_l": 6, "d_v": 5, "d_a": 7,
                  "max_len": 48},
        "train": {"lr": 1e-3, "batch_size": 8, "epochs": 30},
        "synth": {"n_train": 100, "n_val": 40, "n_test": 60,
                  "len_l": (4, 10), "len_v": (4, 12), "len_a": (4, 14),
                  "d_l": 6, "d_v": 5, "d_a": 7, "task": "sentiment-scalar",
                  "w_l": 0.3, "w_v": 0.15, "w_a": 0.15, "w_cross": 0.4,
                  "noise_sigma": 0.05, "margin": 0.3, "pattern_amp": 0.3,
                  "ramp": 0.0},
        "claim_m": None,
    },
}


def get_profile(name: str) -> dict:
    if name not in PROFILES:
        raise ConfigError(
            f"unknown profile {name!r}; available: {', '.join(sorted(PROFILES))}")
    return PROFILES[name]
