"""Run configuration: defaults, JSON loading, and strict merging.

One nested config drives every command.  Unknown keys are rejected with
their full dotted path; command-line flags override file values; the merged
result is echoed into each command's output directory for auditability.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, ColorJitterConfig
from .errors import ConfigError
from .pipeline import SuccessCriteria
from .scorenet import TrainConfig
from .sim2d import WorkspaceConfig

ENV_CONFIG_PATH = "SE2DIFF_CONFIG"

DEFAULTS = {
    "seed": 0,
    "task": "l-shape",
    "workspace": {
        "width": 96,
        "height": 96,
        "bg_color": [38, 42, 48],
        "margin_frac": 0.12,
        "supersample": 4,
    },
    "data": {"count": 100},
    "schedule": {
        "coarse": {"sigma_min": 0.01, "sigma_max": 2.0, "levels": 100},
        "fine": {"sigma_min": 0.01, "sigma_max": 1.0, "levels": 100},
        "eps0_factor": 0.1,
        "steps_per_level": 1,
        "final_denoise": True,
    },
    "model": {
        "coarse": {
            "image_size": 96,
            "channels": [16, 32, 64, 128],
            "d_t": 64,
            "hidden": [256, 256],
            "coord_channels": True,
        },
        "fine": {
            "image_size": 48,
            "roi_scale": 1.0,
            "channels": [16, 32, 64, 128],
            "d_t": 64,
            "hidden": [256, 256],
            "coord_channels": True,
        },
    },
    "train": {
        "steps": 20000,
        "lr_init": 1e-4,
        "lr_final": 1e-5,
        "batch": 10,
        "pool_size": 2500,
        "augment": True,
        "aux_pose_weight": 0.0,
    },
    "augment": {
        "coarse_range_frac": 1.0,
        "fine_sigma_t_px": 3.0,
        "fine_sigma_r_deg": 5.0,
        "fine_clip_t_px": 8.0,
        "fine_clip_r_deg": 15.0,
        "color_enabled": True,
        "color": {"brightness": 0.2, "contrast": 0.2, "hue_deg": 10.0, "noise_std": 2.0},
    },
    "eval": {"trans_px": 5.0, "rot_deg": 5.0, "batched": True},
}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = {}
    for key, base in defaults.items():
        here = f"{path}.{key}" if path else key
        if key in override:
            val = override[key]
            if isinstance(base, dict):
                if not isinstance(val, dict):
                    raise ConfigError(f"config key {here!r} must be a mapping")
                out[key] = _merge(base, val, here)
            else:
                out[key] = val
        else:
            out[key] = copy.deepcopy(base)
    for key in override:
        if key not in defaults:
            here = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {here!r}")
    return out


def load_config(path=None) -> dict:
    """Defaults merged with an optional JSON file (path argument wins over
    the SE2DIFF_CONFIG environment variable)."""
    if path is None:
        path = os.environ.get(ENV_CONFIG_PATH) or None
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    return _merge(DEFAULTS, user)


def echo_config(cfg: dict, out_dir, invocation: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"config": cfg, "invocation": invocation}
    (out / "effective-config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def derive_seed(*parts) -> int:
    """Stable derived seed for independent RNG streams."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# Typed views
# ---------------------------------------------------------------------------


def workspace_config(cfg: dict) -> WorkspaceConfig:
    ws = cfg["workspace"]
    try:
        return WorkspaceConfig(
            width=ws["width"],
            height=ws["height"],
            bg_color=tuple(ws["bg_color"]),
            margin_frac=ws["margin_frac"],
            supersample=ws["supersample"],
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def augment_config(cfg: dict) -> AugmentConfig:
    a = cfg["augment"]
    try:
        return AugmentConfig(
            coarse_range_frac=a["coarse_range_frac"],
            fine_sigma_t_px=a["fine_sigma_t_px"],
            fine_sigma_r_deg=a["fine_sigma_r_deg"],
            fine_clip_t_px=a["fine_clip_t_px"],
            fine_clip_r_deg=a["fine_clip_r_deg"],
            color_enabled=a["color_enabled"],
            color=ColorJitterConfig(**a["color"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def success_criteria(cfg: dict) -> SuccessCriteria:
    return SuccessCriteria(trans_px=cfg["eval"]["trans_px"], rot_deg=cfg["eval"]["rot_deg"])


def train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(
            steps=t["steps"], lr_init=t["lr_init"], lr_final=t["lr_final"],
            batch=t["batch"], seed=seed, aux_pose_weight=t["aux_pose_weight"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
