"""Experiment configuration: versioned YAML schema, defaults, overrides.

The config file is a single YAML document; CLI flags override file keys and
unknown keys are rejected with the offending path.  Shipped defaults follow
the experiment protocol: f = 2 GHz, BW = 0.02 f, a 3x3 UPA (M = 9),
dt = 1 ms, delay of 3 steps, thresholds (120, 150, 210, 270, 360) Mbps and
the two stage-specific PPO hyperparameter sets.
"""

from dataclasses import dataclass, field
import copy
import math
import os

import yaml

from .channel import RadioConfig
from .env import EnvParams, RewardThresholds
from .ppo import PpoHyperParams

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Configuration file or override rejected; maps to exit code 2."""


DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "mode": "dsppo",  # dsppo | ippo
    "seed": 0,
    "episodes": 150,
    "rollout_length": 512,
    "checkpoint_every": 50,
    "log_steps": True,
    "cluster_dump": False,
    "channel_dump": False,
    "out_root": "runs",
    "cluster": {
        "size": 4,
        "users": 2,
        "delay_steps": 3,
        "dt_s": 0.001,
        "coverage_lat_deg": 54.526,
        "coverage_lon_deg": -3.3,
        "coverage_radius_km": 50.0,
        "min_elevation_deg": 30.0,
        "candidate_extra": 6,
        "candidate_margin_deg": 2.0,
    },
    "radio": {
        "f_hz": 2.0e9,
        "bw_hz": None,  # null -> 0.02 * f
        "m_x": 3,
        "m_y": 3,
        "tx_gain_dbi": 30.0,
        "rx_gain_dbi": 0.0,
        "system_temp_k": 290.0,
        "noise_power_w": None,  # null -> k_B * T_sys * BW
        "per_sat_power_w": 1.0,
        "rician_k_db": 10.0,
        "csi_scale": 1.0e6,
        "phase_ref_center": True,
    },
    "thresholds_mbps": [120.0, 150.0, 210.0, 270.0, 360.0],
    "shells": [
        {"count": 1584, "altitude_km": 550.0, "inclination_deg": 53.0, "planes": 72},
        {"count": 1584, "altitude_km": 540.0, "inclination_deg": 53.2, "planes": 72},
        {"count": 720, "altitude_km": 570.0, "inclination_deg": 70.0, "planes": 36},
        {"count": 348, "altitude_km": 560.0, "inclination_deg": 97.6, "planes": 6},
    ],
    "ppo_stage1": {
        "gamma": 0.99,
        "gae_lambda": 0.95,
        "learning_rate": 0.003,
        "minibatches": 32,
        "clip_eps": 0.1,
        "max_grad_norm": 1.0,
        "vf_coef": 0.1,
        "entropy_coef": 0.001,
        "epochs": 30,
        "normalize_advantages": True,
    },
    "ppo_stage2": {
        "gamma": 0.95,
        "gae_lambda": 0.9,
        "learning_rate": 0.004,
        "minibatches": 6,
        "clip_eps": 0.01,
        "max_grad_norm": 0.6,
        "vf_coef": 0.01,
        "entropy_coef": 0.1,
        "epochs": 10,
        "normalize_advantages": True,
    },
}


@dataclass
class ExperimentConfig:
    """Resolved, validated experiment configuration."""

    mode: str
    seed: int
    episodes: int
    rollout_length: int
    checkpoint_every: int
    log_steps: bool
    cluster_dump: bool
    channel_dump: bool
    out_root: str
    env: EnvParams
    ppo_stage1: PpoHyperParams
    ppo_stage2: PpoHyperParams
    resolved: dict = field(repr=False, default_factory=dict)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    """Deep merge rejecting keys absent from the schema."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, here)
        elif isinstance(base[key], dict) and value is not None:
            raise ConfigError(f"{here}: expected a mapping, got {type(value).__name__}")
        else:
            out[key] = value
    return out


def apply_set_overrides(resolved: dict, assignments: list[str]) -> dict:
    """Apply ``--set a.b.c=value`` style overrides (value parsed as YAML)."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value, got {item!r}")
        keypath, raw = item.split("=", 1)
        keys = keypath.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
        node = resolved
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown config key: {keypath}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key: {keypath}")
        node[keys[-1]] = value
    return resolved


def load_config(
    path: str | None = None,
    set_overrides: list[str] | None = None,
    flag_overrides: dict | None = None,
) -> ExperimentConfig:
    """Load, merge and validate a configuration.

    Precedence: shipped defaults < config file < --set overrides < CLI flags.
    """
    resolved = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping at top level")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
        resolved = _merge(resolved, data)
    if set_overrides:
        resolved = apply_set_overrides(resolved, set_overrides)
    for key, value in (flag_overrides or {}).items():
        if value is None:
            continue
        node = resolved
        keys = key.split(".")
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    return build_config(resolved)


def build_config(resolved: dict) -> ExperimentConfig:
    """Construct the typed config from a resolved dict, validating fields."""
    try:
        radio_d = dict(resolved["radio"])
        csi_scale = float(radio_d.pop("csi_scale"))
        phase_ref = bool(radio_d.pop("phase_ref_center"))
        radio = RadioConfig(**radio_d)
        xs = [float(x) for x in resolved["thresholds_mbps"]]
        if len(xs) != 5:
            raise ConfigError("thresholds_mbps must list exactly five values")
        thresholds = RewardThresholds(*xs)
        shells = [
            {
                "count": int(s["count"]),
                "altitude": float(s["altitude_km"]) * 1e3,
                "inclination": math.radians(float(s["inclination_deg"])),
                "planes": int(s["planes"]),
            }
            for s in resolved["shells"]
        ]
        cl = resolved["cluster"]
        env = EnvParams(
            radio=radio,
            thresholds=thresholds,
            cluster_size=int(cl["size"]),
            n_users=int(cl["users"]),
            delay_steps=int(cl["delay_steps"]),
            dt=float(cl["dt_s"]),
            coverage_lat_deg=float(cl["coverage_lat_deg"]),
            coverage_lon_deg=float(cl["coverage_lon_deg"]),
            coverage_radius_m=float(cl["coverage_radius_km"]) * 1e3,
            min_elevation_deg=float(cl["min_elevation_deg"]),
            candidate_extra=int(cl["candidate_extra"]),
            candidate_margin_deg=float(cl["candidate_margin_deg"]),
            csi_scale=csi_scale,
            phase_ref_center=phase_ref,
            shell_specs=shells,
        )
        T = int(resolved["rollout_length"])
        hp1 = PpoHyperParams(**resolved["ppo_stage1"], rollout_length=T)
        hp2 = PpoHyperParams(**resolved["ppo_stage2"], rollout_length=T)
        mode = str(resolved["mode"])
        if mode not in ("dsppo", "ippo"):
            raise ConfigError(f"mode must be 'dsppo' or 'ippo', got {mode!r}")
        if env.delay_steps < 0:
            raise ConfigError("delay_steps must be nonnegative")
        if env.dt < 0:
            raise ConfigError("dt_s must be nonnegative")
        out_root = os.environ.get("DSPPO_RUN_ROOT", str(resolved["out_root"]))
        return ExperimentConfig(
            mode=mode,
            seed=int(resolved["seed"]),
            episodes=int(resolved["episodes"]),
            rollout_length=T,
            checkpoint_every=int(resolved["checkpoint_every"]),
            log_steps=bool(resolved["log_steps"]),
            cluster_dump=bool(resolved["cluster_dump"]),
            channel_dump=bool(resolved["channel_dump"]),
            out_root=out_root,
            env=env,
            ppo_stage1=hp1,
            ppo_stage2=hp2,
            resolved=resolved,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def dump_config(resolved: dict, path: str) -> None:
    """Write the resolved config snapshot atomically."""
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=False)
    os.replace(tmp, path)
