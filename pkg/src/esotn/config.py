"""Run configuration: flat key-value files, CLI overrides, echo for provenance.

Format: ``key = value`` per line, ``#`` comments, dotted prefixes as
sections. Parsing fails closed: unknown keys and uncastable values are
errors that name the offending key. The effective configuration is echoed
into the run directory in the same format, and that echo is what worker
processes load, so every participant reconstructs identical state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

from .es import ESConfig, make_fitness_evaluator
from .env import EnvConfig
from .policy import PolicyConfig, PolicyParams, build_manifest, init_params
from .runtime import DEFAULT_ITER_TIMEOUT, TrainingSetup
from .topology import (
    Topology,
    bundled_topology_names,
    compute_candidate_paths,
    load_bundled_topology,
    load_topology,
)


class ConfigError(ValueError):
    """Bad configuration file or override."""


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_float_list(raw: str) -> tuple[float, ...]:
    return tuple(float(part) for part in raw.split(",") if part.strip())


def _parse_str_list(raw: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in raw.split(",") if part.strip())


def _parse_opt_int(raw: str) -> int | None:
    return None if raw.strip().lower() in ("none", "unbounded") else int(raw)


def _parse_opt_float(raw: str) -> float | None:
    return None if raw.strip().lower() in ("none", "auto") else float(raw)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float) and value == int(value):
        return str(int(value))
    return str(value)


# key -> (default as text, caster)
_SCHEMA: dict[str, tuple[str, Callable[[str], object]]] = {
    "topology.files": ("nsfnet", _parse_str_list),
    "topology.k_paths": ("4", int),
    "env.link_capacity": ("none", _parse_opt_float),
    "env.demand_bandwidths": ("8,32,64", _parse_float_list),
    "env.demand_seed": ("0", int),
    "env.max_episode_steps": ("1000", _parse_opt_int),
    "policy.hidden_dim": ("16", int),
    "policy.message_passing_steps": ("4", int),
    "policy.action_noise": ("0.05", float),
    "policy.feasibility_masking": ("false", _parse_bool),
    "es.alpha": ("0.05", float),
    "es.sigma": ("0.05", float),
    "es.mutations": ("64", int),
    "es.mirrored": ("true", _parse_bool),
    "es.episodes_per_eval": ("3", int),
    "es.iterations": ("300", int),
    "es.seed": ("0", int),
    "es.failure_fitness": ("auto", _parse_opt_float),
    "run.mode": ("inproc", str),
    "run.workers": ("1", int),
    "run.out": ("runs/default", str),
    "run.checkpoint_interval": ("50", int),
    "run.iter_timeout_secs": (str(int(DEFAULT_ITER_TIMEOUT)), float),
}


@dataclass(frozen=True)
class RunConfig:
    topology_files: tuple[str, ...]
    k_paths: int
    link_capacity: float | None
    demand_bandwidths: tuple[float, ...]
    demand_seed: int
    max_episode_steps: int | None
    policy: PolicyConfig
    es: ESConfig
    mode: str
    workers: int
    out_dir: str
    checkpoint_interval: int
    iter_timeout_secs: float

    def as_items(self) -> list[tuple[str, str]]:
        """The effective configuration as echo-format key/value text pairs."""
        values = {
            "topology.files": self.topology_files,
            "topology.k_paths": self.k_paths,
            "env.link_capacity": self.link_capacity,
            "env.demand_bandwidths": self.demand_bandwidths,
            "env.demand_seed": self.demand_seed,
            "env.max_episode_steps": self.max_episode_steps,
            "policy.hidden_dim": self.policy.hidden_dim,
            "policy.message_passing_steps": self.policy.message_passing_steps,
            "policy.action_noise": self.policy.action_noise_epsilon,
            "policy.feasibility_masking": self.policy.feasibility_masking,
            "es.alpha": self.es.alpha,
            "es.sigma": self.es.sigma,
            "es.mutations": self.es.num_mutations,
            "es.mirrored": self.es.mirrored,
            "es.episodes_per_eval": self.es.episodes_per_eval,
            "es.iterations": self.es.iterations,
            "es.seed": self.es.global_seed,
            "es.failure_fitness": self.es.failure_fitness,
            "run.mode": self.mode,
            "run.workers": self.workers,
            "run.out": self.out_dir,
            "run.checkpoint_interval": self.checkpoint_interval,
            "run.iter_timeout_secs": self.iter_timeout_secs,
        }
        return [(key, _fmt(values[key])) for key in _SCHEMA]


def parse_config_text(text: str, origin: str = "config") -> dict[str, str]:
    """Raw key -> value text, rejecting malformed lines and unknown keys."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{origin} line {lineno}: expected 'key = value', got {stripped!r}")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{origin} line {lineno}: unknown key {key!r}")
        raw[key] = value.split("#", 1)[0].strip()
    return raw


def load_run_config(
    path: str | Path | None, overrides: dict[str, str] | None = None
) -> RunConfig:
    """Merge file values over defaults, then CLI overrides over both."""
    merged = {key: default for key, (default, _) in _SCHEMA.items()}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        merged.update(parse_config_text(text, origin=str(path)))
    for key, value in (overrides or {}).items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown override key {key!r}")
        merged[key] = value

    typed: dict[str, object] = {}
    for key, raw in merged.items():
        caster = _SCHEMA[key][1]
        try:
            typed[key] = caster(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"key {key}: cannot parse {raw!r}: {exc}") from None

    if typed["run.mode"] not in ("inproc", "proc"):
        raise ConfigError(f"run.mode must be 'inproc' or 'proc', got {typed['run.mode']!r}")
    if typed["run.workers"] < 1:
        raise ConfigError(f"run.workers must be >= 1, got {typed['run.workers']}")
    if not typed["topology.files"]:
        raise ConfigError("topology.files must list at least one topology")

    try:
        policy = PolicyConfig(
            hidden_dim=typed["policy.hidden_dim"],
            message_passing_steps=typed["policy.message_passing_steps"],
            action_noise_epsilon=typed["policy.action_noise"],
            feasibility_masking=typed["policy.feasibility_masking"],
        )
        es = ESConfig(
            alpha=typed["es.alpha"],
            sigma=typed["es.sigma"],
            num_mutations=typed["es.mutations"],
            mirrored=typed["es.mirrored"],
            episodes_per_eval=typed["es.episodes_per_eval"],
            iterations=typed["es.iterations"],
            global_seed=typed["es.seed"],
            failure_fitness=typed["es.failure_fitness"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    return RunConfig(
        topology_files=typed["topology.files"],
        k_paths=typed["topology.k_paths"],
        link_capacity=typed["env.link_capacity"],
        demand_bandwidths=typed["env.demand_bandwidths"],
        demand_seed=typed["env.demand_seed"],
        max_episode_steps=typed["env.max_episode_steps"],
        policy=policy,
        es=es,
        mode=typed["run.mode"],
        workers=typed["run.workers"],
        out_dir=typed["run.out"],
        checkpoint_interval=typed["run.checkpoint_interval"],
        iter_timeout_secs=typed["run.iter_timeout_secs"],
    )


def write_config_echo(config: RunConfig, path: str | Path) -> None:
    lines = ["# effective configuration"]
    lines += [f"{key} = {value}" for key, value in config.as_items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve_topology(entry: str, link_capacity: float | None) -> Topology:
    """A config topology entry is either a file path or a bundled name."""
    path = Path(entry)
    if path.exists():
        topo = load_topology(path.read_text(encoding="utf-8"), name=path.stem)
    elif entry in bundled_topology_names():
        topo = load_bundled_topology(entry)
    else:
        raise ConfigError(
            f"topology {entry!r} is neither a file nor a bundled name "
            f"({', '.join(bundled_topology_names())})"
        )
    if link_capacity is not None:
        topo = replace(
            topo, links=tuple((a, b, float(link_capacity)) for a, b, _ in topo.links)
        )
    return topo


def build_env_configs(config: RunConfig) -> list[EnvConfig]:
    envs = []
    for entry in config.topology_files:
        topo = resolve_topology(entry, config.link_capacity)
        paths = compute_candidate_paths(topo, config.k_paths)
        envs.append(
            EnvConfig(
                topology=topo,
                paths=paths,
                demand_bandwidths=config.demand_bandwidths,
                demand_rng_seed=config.demand_seed,
                max_episode_steps=config.max_episode_steps,
            )
        )
    return envs


def build_training_setup(config: RunConfig) -> tuple[TrainingSetup, PolicyParams]:
    """Construct the runtime bundle plus the seed-derived initial parameters.

    Workers rebuild this from the config echo, so nothing but seeds has to
    be shared for all parties to agree on the starting point.
    """
    env_configs = build_env_configs(config)
    setup = TrainingSetup(
        es=config.es,
        manifest=build_manifest(config.policy),
        evaluator=make_fitness_evaluator(env_configs, config.policy),
        iter_timeout=config.iter_timeout_secs,
    )
    theta0 = init_params(config.policy, config.es.global_seed)
    return setup, theta0
