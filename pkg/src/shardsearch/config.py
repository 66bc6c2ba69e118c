"""YAML experiment configuration with strict key checking.

A config file has up to seven sections: ``model`` and ``hardware`` (required)
plus ``action_space``, ``simulation``, ``reward``, ``ppo`` and ``sa`` (each
optional, falling back to package defaults). Unknown keys anywhere are hard
errors naming the full dotted path, so typos never silently revert a knob to
its default.

YAML's number grammar treats exponent literals without a dot or sign (for
example ``989e12``) as strings; float fields therefore accept strings and
convert them, so datasheet-style notation works either way.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from .baselines import SaConfig
from .env import RewardConfig
from .model import HardwareSpec, ModelSpec
from .ppo import PpoConfig
from .strategy import ActionSpaceSpec, AxisChoice, canonical_fused_ops


class ConfigError(ValueError):
    """Configuration file cannot be used; the message names the bad key."""


@dataclass(frozen=True)
class SimulationSettings:
    """Workload knobs shared by every simulator call of an experiment."""

    context_len: int
    slo_tpot: float = 0.050

    def __post_init__(self) -> None:
        if self.context_len < 1:
            raise ValueError(f"simulation.context_len must be >= 1, got {self.context_len}")
        if self.slo_tpot <= 0:
            raise ValueError(f"simulation.slo_tpot must be positive, got {self.slo_tpot}")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    hardware: HardwareSpec
    space: ActionSpaceSpec
    simulation: SimulationSettings
    reward: RewardConfig
    ppo: PpoConfig
    sa: SaConfig


def _as_int(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path} must be an integer, got {value!r}")
    return value


def _as_float(value: Any, path: str) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"{path} must be a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{path} must be a number, got {value!r}") from None
    raise ConfigError(f"{path} must be a number, got {value!r}")


def _as_bool(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{path} must be a boolean, got {value!r}")
    return value


def _as_str(value: Any, path: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{path} must be a string, got {value!r}")
    return value


def _as_int_tuple(value: Any, path: str) -> tuple[int, ...]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path} must be a list of integers, got {value!r}")
    return tuple(_as_int(v, f"{path}[{i}]") for i, v in enumerate(value))


_AXIS_NAMES = {
    "unsharded": AxisChoice.UNSHARDED,
    "dim0": AxisChoice.DIM0,
    "dim1": AxisChoice.DIM1,
}


def _as_axis(value: Any, path: str) -> AxisChoice:
    if not isinstance(value, str) or value not in _AXIS_NAMES:
        raise ConfigError(
            f"{path} must be one of {sorted(_AXIS_NAMES)}, got {value!r}"
        )
    return _AXIS_NAMES[value]


def _mapping_section(data: Mapping[str, Any], name: str) -> dict[str, Any]:
    section = data.get(name)
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"section '{name}' must be a mapping, got {section!r}")
    return section


def _check_keys(mapping: Mapping[str, Any], path: str, allowed: Mapping[str, Any]) -> None:
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        listed = ", ".join(f"'{path}.{key}'" for key in unknown)
        raise ConfigError(f"unknown key {listed}; allowed keys: {sorted(allowed)}")


def _build_kwargs(
    mapping: Mapping[str, Any],
    path: str,
    fields: Mapping[str, Callable[[Any, str], Any]],
    required: tuple[str, ...] = (),
) -> dict[str, Any]:
    _check_keys(mapping, path, fields)
    for key in required:
        if key not in mapping:
            raise ConfigError(f"missing key '{path}.{key}'")
    return {
        key: coerce(mapping[key], f"{path}.{key}")
        for key, coerce in fields.items()
        if key in mapping
    }


_MODEL_FIELDS: dict[str, Callable[[Any, str], Any]] = {
    "name": _as_str,
    "num_layers": _as_int,
    "hidden_dim": _as_int,
    "num_heads": _as_int,
    "head_dim": _as_int,
    "num_kv_heads": _as_int,
    "ffn_dim": _as_int,
    "num_experts": _as_int,
    "experts_per_token": _as_int,
    "has_shared_expert": _as_bool,
    "vocab_size": _as_int,
    "dtype_bytes": _as_int,
}

_HARDWARE_FIELDS: dict[str, Callable[[Any, str], Any]] = {
    "name": _as_str,
    "peak_flops": _as_float,
    "hbm_bandwidth": _as_float,
    "hbm_capacity": _as_float,
    "intra_node_bw": _as_float,
    "inter_node_bw": _as_float,
    "node_size": _as_int,
    "device_budget": _as_int,
    "kernel_overhead": _as_float,
    "per_collective_latency": _as_float,
}

_SIMULATION_FIELDS = {"context_len": _as_int, "slo_tpot": _as_float}

_REWARD_FIELDS = {"alpha": _as_float, "beta": _as_float, "invalid_penalty": _as_float}

_PPO_FIELDS: dict[str, Callable[[Any, str], Any]] = {
    "budget": _as_int,
    "chunks": _as_int,
    "n_steps": _as_int,
    "epochs_per_update": _as_int,
    "lr_initial": _as_float,
    "clip_eps": _as_float,
    "value_coef": _as_float,
    "entropy_coef": _as_float,
    "tau": _as_float,
    "history_len": _as_int,
    "width": _as_int,
    "ffn_width": _as_int,
}

_SA_FIELDS = {"t_initial": _as_float, "neighbor_moves": _as_int}

_SPACE_KEYS = ("tp", "ep", "pp", "batch", "ops", "pins")

_TOP_LEVEL = ("model", "hardware", "action_space", "simulation", "reward", "ppo", "sa")


def _parse_space(section: Mapping[str, Any], model: ModelSpec) -> ActionSpaceSpec:
    _check_keys(section, "action_space", {k: None for k in _SPACE_KEYS})
    kwargs: dict[str, Any] = {}
    for key, field in (("tp", "tp_domain"), ("ep", "ep_domain"), ("pp", "pp_domain"), ("batch", "batch_domain")):
        if key in section:
            kwargs[field] = _as_int_tuple(section[key], f"action_space.{key}")

    known_ops = [op.name for op in canonical_fused_ops(model)]
    if "ops" in section:
        raw_ops = section["ops"]
        if raw_ops == "all":
            ops = tuple(known_ops)
        elif isinstance(raw_ops, list):
            ops = tuple(_as_str(v, f"action_space.ops[{i}]") for i, v in enumerate(raw_ops))
        else:
            raise ConfigError(
                f"action_space.ops must be 'all' or a list of operator names, got {raw_ops!r}"
            )
        for name in ops:
            if name not in known_ops:
                raise ConfigError(
                    f"action_space.ops names unknown operator '{name}'; known: {known_ops}"
                )
        kwargs["op_names"] = ops

    if "pins" in section:
        raw_pins = section["pins"]
        if not isinstance(raw_pins, dict):
            raise ConfigError(f"action_space.pins must be a mapping, got {raw_pins!r}")
        pins = []
        for name, axis in raw_pins.items():
            if name not in known_ops:
                raise ConfigError(
                    f"action_space.pins names unknown operator '{name}'; known: {known_ops}"
                )
            pins.append((name, _as_axis(axis, f"action_space.pins.{name}")))
        kwargs["pinned"] = tuple(pins)

    try:
        return ActionSpaceSpec(**kwargs)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def parse_config(data: Any, source: str = "<config>") -> ExperimentConfig:
    """Validate a parsed YAML document into an ExperimentConfig."""
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    _check_keys(data, source, {k: None for k in _TOP_LEVEL})
    for required in ("model", "hardware", "simulation"):
        if required not in data:
            raise ConfigError(f"{source}: missing section '{required}'")

    try:
        model = ModelSpec(
            **_build_kwargs(
                _mapping_section(data, "model"),
                "model",
                _MODEL_FIELDS,
                required=tuple(k for k in _MODEL_FIELDS if k != "dtype_bytes"),
            )
        )
        hardware = HardwareSpec(
            **_build_kwargs(
                _mapping_section(data, "hardware"),
                "hardware",
                _HARDWARE_FIELDS,
                required=tuple(_HARDWARE_FIELDS),
            )
        )
        simulation = SimulationSettings(
            **_build_kwargs(
                _mapping_section(data, "simulation"),
                "simulation",
                _SIMULATION_FIELDS,
                required=("context_len",),
            )
        )
        space = _parse_space(_mapping_section(data, "action_space"), model)
        reward = RewardConfig(
            **_build_kwargs(_mapping_section(data, "reward"), "reward", _REWARD_FIELDS)
        )
        ppo = PpoConfig(
            **_build_kwargs(_mapping_section(data, "ppo"), "ppo", _PPO_FIELDS)
        )
        sa = SaConfig(**_build_kwargs(_mapping_section(data, "sa"), "sa", _SA_FIELDS))
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from None

    return ExperimentConfig(
        model=model,
        hardware=hardware,
        space=space,
        simulation=simulation,
        reward=reward,
        ppo=ppo,
        sa=sa,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate one YAML config file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: invalid YAML: {err}") from None
    return parse_config(data, source=str(path))


def packaged_config_path(name: str) -> Path:
    """Path of a config shipped inside the package, by stem name."""
    root = Path(str(resources.files("shardsearch").joinpath("configs")))
    candidate = root / f"{name}.yaml"
    if not candidate.is_file():
        available = sorted(p.stem for p in root.glob("*.yaml"))
        raise ConfigError(f"no packaged config named '{name}'; available: {available}")
    return candidate


def resolve_config_path(spec: str) -> Path:
    """Interpret a CLI config argument: a filesystem path or a packaged name."""
    path = Path(spec)
    if path.is_file():
        return path
    if "/" not in spec and not spec.endswith(".yaml"):
        return packaged_config_path(spec)
    raise ConfigError(f"config file not found: {spec}")
