"""Evolution-strategies core: seed-derived Gaussian perturbations with
mirrored sampling, rank-based fitness shaping, and the natural-gradient-style
parameter update.

Perturbations are never stored or transmitted: every consumer re-derives
them from (seed, sign), one vector at a time, so memory stays O(total_dim)
no matter how many mutations an iteration uses.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .env import EnvConfig, episode_return
from .policy import (
    ParamManifest,
    PolicyConfig,
    PolicyContext,
    PolicyParams,
    make_agent,
    training_variant,
)
from .seeds import TAG_EPISODE, TAG_PERTURBATION, derive_key, standard_normal

log = logging.getLogger(__name__)

# Evaluator contract: (candidate params, episode seeds) -> raw return.
Evaluator = Callable[[PolicyParams, Sequence[int]], float]


class ProtocolError(RuntimeError):
    """An iteration's mutation records are incomplete or inconsistent."""


@dataclass(frozen=True)
class ESConfig:
    alpha: float = 0.01
    sigma: float = 0.05
    num_mutations: int = 64
    mirrored: bool = True
    episodes_per_eval: int = 1
    iterations: int = 300
    global_seed: int = 0
    failure_fitness: float | None = None  # None: worst finite return minus one
    shaping: str = "rank"  # "centered" is a diagnostic mode for estimator tests

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.sigma <= 0:
            raise ValueError("alpha and sigma must be positive")
        if self.num_mutations < 1:
            raise ValueError("num_mutations must be positive")
        if self.mirrored and self.num_mutations % 2:
            raise ValueError(
                f"mirrored sampling needs an even mutation count, got {self.num_mutations}"
            )
        if self.episodes_per_eval < 1 or self.iterations < 1:
            raise ValueError("episodes_per_eval and iterations must be positive")
        if self.shaping not in ("rank", "centered"):
            raise ValueError(f"unknown shaping mode {self.shaping!r}")


@dataclass
class MutationRecord:
    """One perturbation's identity and measured fitness."""

    iteration: int
    index: int
    seed: int
    sign: int
    raw_return: float = math.nan


@dataclass(frozen=True)
class ShapedFitness:
    utilities: np.ndarray


def pair_index(j: int, mirrored: bool) -> int:
    return j // 2 if mirrored else j


def mutation_seed_sign(config: ESConfig, t: int, j: int) -> tuple[int, int]:
    """Mirrored partners share a seed and differ only in sign."""
    seed = derive_key(TAG_PERTURBATION, config.global_seed, t, pair_index(j, config.mirrored))
    sign = -1 if config.mirrored and j % 2 else 1
    return seed, sign


def episode_seeds(config: ESConfig, t: int) -> list[int]:
    """Common evaluation seeds shared by every mutation of iteration t."""
    return [
        derive_key(TAG_EPISODE, config.global_seed, t, e)
        for e in range(config.episodes_per_eval)
    ]


def derive_perturbation(manifest: ParamManifest, seed: int, sign: int) -> np.ndarray:
    """sign * (total_dim i.i.d. standard normals keyed by seed)."""
    values = standard_normal(seed, manifest.total_dim)
    return values if sign >= 0 else -values


def mutate(theta: PolicyParams, epsilon: np.ndarray, sigma: float) -> PolicyParams:
    """theta + sigma * epsilon as a new parameter object; input untouched."""
    if epsilon.shape != theta.values.shape:
        raise ValueError(
            f"perturbation shape {epsilon.shape} does not match parameters {theta.values.shape}"
        )
    return PolicyParams(manifest=theta.manifest, values=theta.values + sigma * epsilon)


def evaluate_mutation(
    params: PolicyParams,
    policy_config: PolicyConfig,
    env_configs: Sequence[EnvConfig],
    seeds: Sequence[int],
    contexts: Sequence[PolicyContext] | None = None,
) -> float:
    """Mean episode return over the given seeds, NaN on evaluation failure.

    Multiple environments interleave round-robin across the episode seeds
    (mixed-topology training). Failures are logged and surface as NaN, which
    the iteration later resolves to the configured failure fitness.
    """
    if contexts is None:
        contexts = [PolicyContext.for_env(cfg) for cfg in env_configs]
    try:
        total = 0.0
        for i, seed in enumerate(seeds):
            env_config = env_configs[i % len(env_configs)]
            agent = make_agent(params, policy_config, env_config, seed, contexts[i % len(contexts)])
            total += episode_return(agent, env_config, seed)
        return total / len(seeds)
    except Exception:
        log.exception("mutation evaluation failed; scoring with failure fitness")
        return math.nan


def make_fitness_evaluator(
    env_configs: Sequence[EnvConfig], policy_config: PolicyConfig
) -> Evaluator:
    """Fitness function for training: stochastic rollouts over the envs."""
    contexts = [PolicyContext.for_env(cfg) for cfg in env_configs]
    rollout_config = training_variant(policy_config)

    def evaluate(params: PolicyParams, seeds: Sequence[int]) -> float:
        return evaluate_mutation(params, rollout_config, env_configs, seeds, contexts)

    return evaluate


def evaluate_assignment(
    theta: PolicyParams,
    config: ESConfig,
    t: int,
    indices: Sequence[int],
    evaluator: Evaluator,
) -> list[MutationRecord]:
    """Evaluate the given mutation indices of iteration t."""
    seeds = episode_seeds(config, t)
    records: list[MutationRecord] = []
    for j in indices:
        seed, sign = mutation_seed_sign(config, t, j)
        epsilon = derive_perturbation(theta.manifest, seed, sign)
        candidate = mutate(theta, epsilon, config.sigma)
        try:
            raw = float(evaluator(candidate, seeds))
        except Exception:
            log.exception("evaluator raised for mutation %d of iteration %d", j, t)
            raw = math.nan
        if not math.isfinite(raw):
            raw = math.nan
        records.append(MutationRecord(iteration=t, index=j, seed=seed, sign=sign, raw_return=raw))
    return records


def resolve_failures(raw_returns: np.ndarray, config: ESConfig) -> np.ndarray:
    """Replace NaN failure sentinels with the configured failure fitness.

    The default ranks failed mutations strictly last (worst finite return
    minus one) without distorting the utilities of the survivors.
    """
    out = np.asarray(raw_returns, dtype=np.float64).copy()
    failed = np.isnan(out)
    if not failed.any():
        return out
    if config.failure_fitness is not None:
        out[failed] = config.failure_fitness
    elif failed.all():
        out[:] = 0.0
    else:
        out[failed] = out[~failed].min() - 1.0
    return out


def shape_fitness(raw_returns: np.ndarray, method: str = "rank") -> ShapedFitness:
    """Zero-sum utilities from raw returns.

    "rank": log-rank utilities that depend only on the return ordering
    (rank 1 is the best return; ties broken by mutation index).
    "centered": mean-centered raw returns, used only to check the update
    against the smoothed-gradient identity.
    """
    returns = np.asarray(raw_returns, dtype=np.float64)
    k = returns.shape[0]
    if k < 2:
        raise ValueError("fitness shaping needs at least two returns")
    if not np.all(np.isfinite(returns)):
        raise ValueError("shape_fitness expects finite returns; resolve failures first")
    if method == "centered":
        return ShapedFitness(utilities=returns - returns.mean())
    if method != "rank":
        raise ValueError(f"unknown shaping method {method!r}")
    order = np.lexsort((np.arange(k), -returns))  # best first, ties by index
    ranks = np.empty(k, dtype=np.float64)
    ranks[order] = np.arange(1, k + 1)
    u = np.maximum(0.0, np.log(k / 2 + 1) - np.log(ranks))
    return ShapedFitness(utilities=u / u.sum() - 1.0 / k)


def compute_update(
    records: Sequence[MutationRecord],
    shaped: ShapedFitness,
    config: ESConfig,
    manifest: ParamManifest,
) -> np.ndarray:
    """alpha / (k * sigma) * sum_j utilities[j] * epsilon_j.

    Perturbations are re-derived from each record's (seed, sign) and
    consumed one at a time. Mirrored partners are adjacent in index order
    and share a seed, so a one-element cache halves the derivations without
    changing the floating-point accumulation order.
    """
    k = config.num_mutations
    if len(records) != k:
        raise ProtocolError(f"iteration needs {k} records, got {len(records)}")
    by_index = sorted(records, key=lambda r: r.index)
    if [r.index for r in by_index] != list(range(k)):
        raise ProtocolError(
            f"mutation indices {sorted(r.index for r in records)} do not cover 0..{k - 1}"
        )
    if shaped.utilities.shape != (k,):
        raise ProtocolError("utilities length does not match mutation count")
    acc = np.zeros(manifest.total_dim, dtype=np.float64)
    cached_seed: int | None = None
    cached_base: np.ndarray | None = None
    for record in by_index:
        if record.seed != cached_seed:
            cached_base = derive_perturbation(manifest, record.seed, 1)
            cached_seed = record.seed
        acc += (shaped.utilities[record.index] * record.sign) * cached_base
    return (config.alpha / (k * config.sigma)) * acc


@dataclass
class IterationStats:
    t: int
    best_return: float
    mean_return: float
    worst_return: float
    eval_seconds: float
    update_seconds: float
    wall_seconds: float
    theta_l2_norm: float


def train_iteration(
    theta: PolicyParams, config: ESConfig, t: int, evaluator: Evaluator
) -> tuple[PolicyParams, IterationStats]:
    """One full sequential iteration: evaluate all mutations, then update."""
    wall_start = time.perf_counter()
    records = evaluate_assignment(theta, config, t, range(config.num_mutations), evaluator)
    eval_seconds = time.perf_counter() - wall_start

    update_start = time.perf_counter()
    returns = resolve_failures(np.array([r.raw_return for r in records]), config)
    for record, value in zip(records, returns):
        record.raw_return = float(value)
    shaped = shape_fitness(returns, config.shaping)
    delta = compute_update(records, shaped, config, theta.manifest)
    new_theta = PolicyParams(manifest=theta.manifest, values=theta.values + delta)
    update_seconds = time.perf_counter() - update_start

    stats = IterationStats(
        t=t,
        best_return=float(returns.max()),
        mean_return=float(returns.mean()),
        worst_return=float(returns.min()),
        eval_seconds=eval_seconds,
        update_seconds=update_seconds,
        wall_seconds=time.perf_counter() - wall_start,
        theta_l2_norm=float(np.linalg.norm(new_theta.values)),
    )
    return new_theta, stats


def toy_config(**overrides) -> ESConfig:
    """Small defaults for synthetic-fitness experiments and tests."""
    base = ESConfig(alpha=0.05, sigma=0.1, num_mutations=32, mirrored=True,
                    episodes_per_eval=1, iterations=500)
    return replace(base, **overrides)
