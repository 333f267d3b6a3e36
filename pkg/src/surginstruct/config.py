"""Run configuration: nested JSON with optional provenance annotations.

A leaf may be a bare value or ``{"value": v, "paper_value": p}``; the
annotation records the published full-scale setting next to the value
actually used.  :func:`resolve` strips annotations.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

DESK = {
    "data": {
        "source": "synthetic",
        "n": 2000,
        "noise": 0.1,
        "n_regions": {"value": 16, "paper_value": 196},
        "feature_dim": {"value": 32, "paper_value": 2048},
        "split": {"value": [0.8, 0.1, 0.1], "paper_value": [13094, 1646, 1673]},
        "min_count": {"value": 5, "paper_value": 5},
        "max_tokens": {"value": 16, "paper_value": 16},
    },
    "transformer": {
        "d_model": {"value": 64, "paper_value": 512},
        "n_heads": {"value": 4, "paper_value": 8},
        "n_enc_blocks": {"value": 2, "paper_value": 6},
        "n_dec_blocks": {"value": 2, "paper_value": 6},
        "d_ff": {"value": 128, "paper_value": 2048},
        "dropout_p": 0.1,
        "encoder_pe": True,
    },
    "lstm": {
        "hidden": {"value": 64, "paper_value": 512},
        "dropout_p": 0.1,
    },
    "train": {
        "epochs_xe": {"value": 10, "paper_value": 30},
        "epochs_scst": {"value": 10, "paper_value": 30},
        "batch_size": {"value": 5, "paper_value": 5},
        "peak_lr_xe": {"value": 1e-3, "paper_value": 3e-4},
        "warmup_steps": {"value": None, "paper_value": 20000},
        "warmup_fraction": 0.05,
        "lr_scst": {"value": 3e-4, "paper_value": 1e-5},
        "clip_norm": 5.0,
    },
    "decode": {"beam": 3, "alpha": 0.7, "max_len": 17},
    "experiment": {
        "regimes": ["LSTM", "LSTM+rl", "LSTM+attn", "LSTM+attn+rl", "Transformer", "Transformer+rl"],
    },
}


def _full_leaf(v):
    if isinstance(v, dict) and "paper_value" in v:
        return {"value": v["paper_value"], "paper_value": v["paper_value"]}
    return v


def full_config() -> dict:
    """Every annotated leaf set to its published value."""
    cfg = copy.deepcopy(DESK)
    for section in cfg.values():
        for k, v in section.items():
            section[k] = _full_leaf(v)
    cfg["data"]["split"] = {"value": [13094 / 16413, 1646 / 16413, 1673 / 16413],
                            "paper_value": [13094, 1646, 1673]}
    cfg["data"]["source"] = "files"
    return cfg


def resolve(cfg: dict) -> dict:
    """Strip ``value``/``paper_value`` annotations, leaving plain values."""
    out = {}
    for k, v in cfg.items():
        if isinstance(v, dict) and "value" in v and set(v) <= {"value", "paper_value", "note"}:
            out[k] = v["value"]
        elif isinstance(v, dict):
            out[k] = resolve(v)
        else:
            out[k] = v
    return out


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and "value" not in v:
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None) -> dict:
    """Desk defaults overlaid with the JSON file at ``path``; returns resolved values."""
    cfg = DESK
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
        unknown = set(user) - set(DESK)
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)} in {path}")
        cfg = merge(DESK, user)
    return resolve(cfg)


def write_config(path, cfg: dict) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
