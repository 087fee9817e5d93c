"""Run configuration files (JSON) and their validation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

from .economy.multi import MultiAssetConfig
from .economy.single import ConfigError, SingleAssetConfig
from .trainer import DEFAULT_PERCENTILES, TrainRun

MODELS = {"single": SingleAssetConfig, "multi": MultiAssetConfig}
SHIPPED = ("single_asset", "multi_asset_homotopy", "single_reduced", "multi_reduced")


@dataclass(frozen=True)
class HomotopyOptions:
    stock_steps: int = 10
    house_steps: int = 20
    initial_episodes: int = 512
    episodes: int = 256


@dataclass(frozen=True)
class EvalOptions:
    states: int = 8192
    periods: int = 256
    percentiles: tuple[float, ...] = DEFAULT_PERCENTILES


@dataclass(frozen=True)
class RunConfig:
    model: str
    economy: SingleAssetConfig | MultiAssetConfig
    hidden: tuple[int, ...]
    train: TrainRun
    homotopy: HomotopyOptions = field(default_factory=HomotopyOptions)
    evaluation: EvalOptions = field(default_factory=EvalOptions)
    seed: int = 0

    @property
    def dims(self) -> list[int]:
        return [self.economy.input_dim, *self.hidden, self.economy.output_dim]

    def with_overrides(self, seed: int | None = None, mode: str | None = None,
                       episodes: int | None = None, deterministic: bool | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if mode is not None:
            cfg = replace(cfg, economy=_build(type(cfg.economy), {**_economy_dict(cfg.economy), "mode": mode},
                                              "economy"))
        train = replace(cfg.train, seed=cfg.seed)
        if episodes is not None:
            if episodes < 0:
                raise ConfigError("training.episodes", "must be nonnegative")
            train = replace(train, episodes=episodes)
            if cfg.model == "multi":
                cfg = replace(cfg, homotopy=replace(cfg.homotopy, episodes=episodes, initial_episodes=episodes))
        if deterministic is not None:
            train = replace(train, deterministic=deterministic)
        return replace(cfg, train=train)


def _economy_dict(econ) -> dict[str, Any]:
    d = asdict(econ)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _build(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
    try:
        return cls(**data)
    except ConfigError as exc:
        raise ConfigError(f"{section}.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


def parse_config(data: dict) -> RunConfig:
    """Build and validate a :class:`RunConfig` from a decoded JSON document."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    allowed = {"model", "economy", "network", "training", "homotopy", "evaluation", "seed"}
    for key in data:
        if key not in allowed:
            raise ConfigError(key, "unknown key")
    model = data.get("model")
    if model not in MODELS:
        raise ConfigError("model", f"must be one of {sorted(MODELS)}")
    economy = _build(MODELS[model], dict(data.get("economy", {})), "economy")
    hidden = data.get("network", {}).get("hidden", [400, 400])
    if (not isinstance(hidden, list) or not hidden
            or not all(isinstance(h, int) and not isinstance(h, bool) and h > 0 for h in hidden)):
        raise ConfigError("network.hidden", "must be a nonempty list of positive integers")
    for key in data.get("network", {}):
        if key != "hidden":
            raise ConfigError(f"network.{key}", "unknown key")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed", "must be a nonnegative integer")
    tr = dict(data.get("training", {}))
    for key in ("seed", "mode", "deterministic"):
        if key in tr:
            raise ConfigError(f"training.{key}", "set this at the top level or on the command line")
    train = _build(TrainRun, {"episodes": 0, "trajectories": 1, **tr, "seed": seed}, "training")
    hom = _build(HomotopyOptions, dict(data.get("homotopy", {})), "homotopy")
    ev = dict(data.get("evaluation", {}))
    if "percentiles" in ev:
        ev["percentiles"] = tuple(float(p) for p in ev["percentiles"])
    evaluation = _build(EvalOptions, ev, "evaluation")
    if any(not 0 <= p <= 100 for p in evaluation.percentiles):
        raise ConfigError("evaluation.percentiles", "must lie in [0, 100]")
    return RunConfig(model, economy, tuple(hidden), train, hom, evaluation, seed)


def to_dict(cfg: RunConfig) -> dict:
    tr = asdict(cfg.train)
    for key in ("seed", "mode", "deterministic"):
        tr.pop(key)
    ev = asdict(cfg.evaluation)
    ev["percentiles"] = list(ev["percentiles"])
    return {
        "model": cfg.model,
        "economy": _economy_dict(cfg.economy),
        "network": {"hidden": list(cfg.hidden)},
        "training": tr,
        "homotopy": asdict(cfg.homotopy),
        "evaluation": ev,
        "seed": cfg.seed,
    }


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def load_config(path_or_name: str | Path) -> RunConfig:
    """Load a config file, or one of the shipped configs by name."""
    name = str(path_or_name)
    if name in SHIPPED:
        text = resources.files("olgclear.configs").joinpath(f"{name}.json").read_text()
        source = name
    else:
        try:
            text = Path(name).read_text()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {name}: {exc.strerror}") from None
        source = name
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{source}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_config(data)
