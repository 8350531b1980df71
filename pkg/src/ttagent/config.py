"""Structured configuration: defaults, YAML overrides, typed views and a stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import yaml

from .ballistics import ContactParams, FlightParams, TableGeometry
from .optimizer import PRESETS, EsConfig

CONFIG_ENV = "TTAGENT_CONFIG"

DEFAULTS = {
    "seed": 0,
    "flight": {
        "air_density": 1.225,
        "viscosity": 1.8e-5,
        "blunt_drag": 0.235,
        "slender_drag": 0.25,
        "angular_drag": 0.0,
        "kutta_lift": 1.0,
        "magnus_lift": 1.0,
        "wind": [0.0, 0.0, 0.0],
        "gravity": 9.81,
        "ball_radius": 0.02,
        "ball_mass": 0.0027,
        "dt": 0.001,
    },
    "contact": {
        "table_restitution_normal": 0.9,
        "table_friction": 0.1,
        "table_spin_coupling": 1.0,
        "paddle_restitution_topspin": 0.85,
        "paddle_restitution_underspin": 0.6,
        "paddle_friction": 1.5,
        "paddle_spin_transfer": 1.0,
        "spin_dependent_paddle": True,
    },
    # recorded for reference only; the impulse contact model has no analog
    "solver_reference": {
        "solref": [-103.0, 0.0],
        "solimp": [0.9, 0.95, 0.001],
        "solreffriction": [0.0, 0.0],
    },
    "table": {
        "length": 2.74,
        "width": 1.525,
        "net_height": 0.1525,
        "net_overhang": 0.1525,
        "high_ball_ceiling": 2.0,
    },
    "style": {"band": 0.2, "forehand_sign": 1.0},
    "dataset": {
        "hit_threshold": 2.0,
        "hit_window": 3,
        "min_segment_samples": 10,
        "perturbation": {"position": 0.005, "velocity": 0.05, "spin": 2.0},
        "epsilon": 0.05,
        "max_attempts": 100,
        "fit_residual_ceiling": 0.02,
        "fit_restarts": 4,
    },
    "optimizer": {
        "presets": {name: cfg.to_dict() for name, cfg in PRESETS.items()},
        "fit": {"step_size": 0.02, "perturbation_std": 0.05, "num_perturbations": 16,
                "rollouts_per_perturbation": 1, "keep_fraction": 0.5, "iterations": 30},
    },
    "skills": {
        "hit_plane_y": -1.6,
        "paddle_radius": 0.075,
        "max_speed": 3.0,
        "max_accel": 25.0,
        "max_angular_speed": 12.0,
        "home_position": [0.0, -1.75, 0.25],
        "home_normal": [0.0, 1.0, 0.0],
        "forehand_reach": [-0.35, 1.2],
        "backhand_reach": [-1.2, 0.3],
        "observation_noise": {"position": 0.004, "velocity": 0.06},
        "reference_pose": {"forehand": [0.35, -1.75, 0.25], "backhand": [-0.35, -1.75, 0.25]},
    },
    "hlc": {
        "alpha": 0.1,
        "shortlist_m": 3,
        "shortlist_n": 5,
        "land_rate_threshold": 0.8,
        "overall_hit_rate_threshold": 0.75,
        "r_scale": 1.0,
        "query_k": 25,
        "update_k": 25,
        "refresh_each_shot": False,
    },
    "latency_ms": {
        "ball_obs": [40.0, 8.2],
        "paddle_obs": [31.0, 2.0],
        "action": [71.0, 5.0],
    },
    "randomization": {
        "table_damping": [-1.0, 5.0],
        "paddle_damping": [-5.0, -1.0],
        "paddle_friction": [-0.29, 0.29],
        "table_friction": [-0.05, 0.05],
        "restitution_per_damping": -0.01,
    },
    "match": {
        "variant": "main",
        "max_lets_per_point": 20,
        "protective_stop_probability": 0.0,
        "games": 3,
    },
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides=None):
    """Defaults merged with a YAML file (explicit path, else $TTAGENT_CONFIG) and overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        with open(Path(path)) as fh:
            cfg = _merge(cfg, yaml.safe_load(fh) or {})
    return _merge(cfg, overrides)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def flight_params(cfg):
    return FlightParams(**cfg["flight"])


def contact_params(cfg):
    return ContactParams(**cfg["contact"])


def table_geometry(cfg):
    return TableGeometry(**cfg["table"])


def es_preset(cfg, name):
    presets = cfg["optimizer"]["presets"]
    if name not in presets:
        raise KeyError(f"unknown optimizer preset {name!r}")
    return EsConfig(**presets[name])


def dump_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
