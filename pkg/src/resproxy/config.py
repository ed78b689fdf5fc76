"""Flat dotted-key JSON configuration shared by the command-line tools."""
from __future__ import annotations

import json
from pathlib import Path

from .datagen import GenConfig, NoiseConfig, ScheduleGenParams
from .history import HMConfig
from .surrogate import SurrogateConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_gen = GenConfig()
_train = TrainConfig()
_model = SurrogateConfig()
_hm = HMConfig()

DEFAULTS = {
    "seed": 7,
    "twin.seed": 20240611,
    "twin.injection_m3_day": 800.0,
    "gen.n_scenarios": 20,
    "gen.jobs": 1,
    "gen.max_dt_days": _gen.max_dt_days,
    "gen.injection_m3_day": list(_gen.injection),
    **{f"gen.noise.{k}": v for k, v in vars(NoiseConfig()).items()},
    **{f"gen.schedule.{k}": (list(v) if isinstance(v, tuple) else v)
       for k, v in ScheduleGenParams().to_dict().items()},
    "train.epochs": _train.epochs,
    "train.rollout_length": _train.rollout_length,
    "train.lr": _train.lr,
    "train.weight_decay": _train.weight_decay,
    "train.channel_weights": list(_train.channel_weights),
    "train.val_fraction": _train.val_fraction,
    "train.bn_warmup_epochs": _train.bn_warmup_epochs,
    "model.latent_channels": _model.latent_channels,
    "model.latent_static_channels": _model.latent_static_channels,
    "model.latent_control_channels": _model.latent_control_channels,
    "model.encoder_channels": list(_model.encoder_channels),
    "model.encoder_strides": list(_model.encoder_strides),
    "model.g_hidden": _model.g_hidden,
    "model.decoder_channels": list(_model.decoder_channels),
    "model.dt_days": _model.dt_days,
    "model.time_unit_days": _model.time_unit_days,
    "model.inference_dtype": _model.inference_dtype,
    "simulate.engine": "surrogate",
    "simulate.steps": 24,
    "hm.lr": _hm.lr,
    "hm.weight_decay": _hm.weight_decay,
    "hm.factor": _hm.factor,
    "hm.init_std": _hm.init_std,
    "hm.max_iter": _hm.max_iter,
    "hm.plateau_window": _hm.plateau_window,
    "hm.plateau_tol": _hm.plateau_tol,
    "hm.time_weighting": _hm.time_weighting,
    "hm.q_ref": _hm.q_ref,
    "hm.chunk_steps": _hm.chunk_steps,
    "hm.mode": "joint",
    "hm.adapt_steps": 16,
    "hm.forecast_steps": 8,
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load(path=None, overrides=()) -> dict:
    """Defaults, then the JSON file, then ``key=value`` overrides (JSON-parsed values)."""
    cfg = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold one JSON object with dotted keys")
        _merge(cfg, data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        _merge(cfg, {key.strip(): _parse_value(value)})
    return cfg


def _merge(cfg: dict, data: dict) -> None:
    for key, value in data.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        default = DEFAULTS[key]
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key} expects a number, got {value!r}")
            if isinstance(default, int) and not isinstance(default, bool) and value != int(value):
                raise ConfigError(f"{key} expects an integer, got {value!r}")
            value = type(default)(value)
        if isinstance(default, list) and (not isinstance(value, list) or len(value) != len(default)):
            raise ConfigError(f"{key} expects a list of {len(default)} values, got {value!r}")
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        cfg[key] = value


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=1, sort_keys=True)


def _section(cfg: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def gen_config(cfg: dict) -> GenConfig:
    sched = _section(cfg, "gen.schedule")
    return GenConfig(NoiseConfig(**_section(cfg, "gen.noise")), ScheduleGenParams.from_dict(sched),
                     tuple(cfg["gen.injection_m3_day"]), cfg["gen.max_dt_days"])


def train_config(cfg: dict) -> TrainConfig:
    t = _section(cfg, "train")
    t["channel_weights"] = tuple(t["channel_weights"])
    return TrainConfig(seed=cfg["seed"], **t)


def model_config(cfg: dict) -> SurrogateConfig:
    m = _section(cfg, "model")
    for k in ("encoder_channels", "encoder_strides", "decoder_channels"):
        m[k] = tuple(m[k])
    return SurrogateConfig(**m)


def hm_config(cfg: dict) -> HMConfig:
    h = _section(cfg, "hm")
    mode = h.pop("mode")
    h.pop("adapt_steps")
    h.pop("forecast_steps")
    if mode not in ("joint", "rock", "conn"):
        raise ConfigError(f"hm.mode must be joint, rock or conn, got {mode!r}")
    return HMConfig(adapt_rock=mode in ("joint", "rock"), adapt_conn=mode in ("joint", "conn"),
                    seed=cfg["seed"], **h)
