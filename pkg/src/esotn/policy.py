"""Forward-only message-passing policy scoring candidate paths.

Links are the entities: each link embeds [residual/capacity,
capacity/max_capacity, on-path indicator], exchanges messages with links it
shares an endpoint with, and a per-path readout (path-link sum plus a demand
embedding) produces one score per candidate. All weights are shared across
links, so a single parameter vector drives topologies of any size.

No autodiff anywhere: the evolution-strategies trainer only ever calls this
forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .env import EnvConfig, EnvState, feasible_actions
from .seeds import TAG_ACTION, TAG_INIT, derive_key, rng_from_key
from .topology import Topology

LINK_FEATURES = 3


class EvaluationError(RuntimeError):
    """A policy evaluation produced a non-finite value."""


@dataclass(frozen=True)
class ParamManifest:
    """Fixed (name, shape) layout of the flat parameter vector."""

    tensors: tuple[tuple[str, tuple[int, ...]], ...]

    @cached_property
    def total_dim(self) -> int:
        return sum(math.prod(shape) for _, shape in self.tensors)

    @cached_property
    def slots(self) -> dict[str, tuple[int, int, tuple[int, ...]]]:
        out: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in self.tensors:
            size = math.prod(shape)
            out[name] = (offset, offset + size, shape)
            offset += size
        return out


@dataclass(frozen=True)
class PolicyParams:
    """A manifest plus the flat value vector it describes."""

    manifest: ParamManifest
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != (self.manifest.total_dim,):
            raise ValueError(
                f"parameter vector has length {self.values.shape}, "
                f"manifest requires ({self.manifest.total_dim},)"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite values")

    def tensor(self, name: str) -> np.ndarray:
        start, stop, shape = self.manifest.slots[name]
        return self.values[start:stop].reshape(shape)


@dataclass(frozen=True)
class PolicyConfig:
    hidden_dim: int = 16
    message_passing_steps: int = 4
    action_noise_epsilon: float = 0.05
    deterministic_eval: bool = True
    feasibility_masking: bool = False

    def __post_init__(self) -> None:
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be positive, got {self.hidden_dim}")
        if self.message_passing_steps < 0:
            raise ValueError("message_passing_steps must be nonnegative")
        if not 0.0 <= self.action_noise_epsilon < 1.0:
            raise ValueError(
                f"action_noise_epsilon must be in [0, 1), got {self.action_noise_epsilon}"
            )


def build_manifest(config: PolicyConfig) -> ParamManifest:
    h = config.hidden_dim
    tensors: list[tuple[str, tuple[int, ...]]] = [
        ("link_embed.w", (LINK_FEATURES, h)),
        ("link_embed.b", (h,)),
    ]
    for step in range(config.message_passing_steps):
        tensors.append((f"message.{step}.w", (h, h)))
        tensors.append((f"message.{step}.b", (h,)))
    tensors += [
        ("demand_embed.w", (1, h)),
        ("demand_embed.b", (h,)),
        ("readout.w", (h, 1)),
        ("readout.b", (1,)),
    ]
    return ParamManifest(tensors=tuple(tensors))


def init_params(config: PolicyConfig, init_seed: int) -> PolicyParams:
    """Fan-scaled uniform weights, zero biases, deterministic in the seed."""
    manifest = build_manifest(config)
    rng = rng_from_key(derive_key(TAG_INIT, init_seed))
    values = np.zeros(manifest.total_dim, dtype=np.float64)
    for name, (start, stop, shape) in manifest.slots.items():
        if len(shape) != 2:
            continue  # biases stay zero
        fan_in, fan_out = shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        values[start:stop] = rng.uniform(-limit, limit, size=stop - start)
    return PolicyParams(manifest=manifest, values=values)


def flatten(params: PolicyParams) -> np.ndarray:
    return params.values.copy()


def unflatten(manifest: ParamManifest, vector: np.ndarray) -> PolicyParams:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (manifest.total_dim,):
        raise ValueError(
            f"vector of length {vector.shape} does not match manifest "
            f"dimension {manifest.total_dim}"
        )
    return PolicyParams(manifest=manifest, values=vector)


@dataclass(frozen=True)
class PolicyContext:
    """Per-topology constants the forward pass needs."""

    capacities: np.ndarray
    link_adjacency: np.ndarray
    max_capacity: float
    max_bandwidth: float

    @staticmethod
    def build(topology: Topology, max_bandwidth: float) -> "PolicyContext":
        caps = topology.capacities
        n_links = len(topology.links)
        adj = np.zeros((n_links, n_links), dtype=np.float64)
        for i in range(n_links):
            a_i, b_i = topology.link_endpoints(i)
            for j in range(i + 1, n_links):
                a_j, b_j = topology.link_endpoints(j)
                if {a_i, b_i} & {a_j, b_j}:
                    adj[i, j] = adj[j, i] = 1.0
        adj.setflags(write=False)
        return PolicyContext(
            capacities=caps,
            link_adjacency=adj,
            max_capacity=float(caps.max()),
            max_bandwidth=max_bandwidth,
        )

    @staticmethod
    def for_env(config: EnvConfig) -> "PolicyContext":
        return PolicyContext.build(config.topology, config.max_bandwidth)


def forward(
    params: PolicyParams,
    ctx: PolicyContext,
    state: EnvState,
    candidates: Sequence[np.ndarray],
) -> np.ndarray:
    """Probability vector over the candidate paths of the pending demand."""
    if not candidates:
        raise ValueError("forward() needs at least one candidate path")
    n_cand = len(candidates)
    n_links = ctx.capacities.shape[0]

    on_path = np.zeros((n_cand, n_links), dtype=np.float64)
    for i, links in enumerate(candidates):
        on_path[i, links] = 1.0

    w_in = params.tensor("link_embed.w")
    # Non-finite intermediates are caught below; silence numpy's overflow
    # chatter so failed mutations degrade quietly to their failure fitness.
    with np.errstate(over="ignore", invalid="ignore"):
        # Shared features (residual and capacity columns) embed once; the
        # candidate-specific on-path column adds its own weight row.
        base = (
            np.outer(state.residual / ctx.capacities, w_in[0])
            + np.outer(ctx.capacities / ctx.max_capacity, w_in[1])
            + params.tensor("link_embed.b")
        )
        hidden = np.tanh(base[None, :, :] + on_path[:, :, None] * w_in[2])

        adjacency = ctx.link_adjacency
        for step in range(_message_steps(params.manifest)):
            agg = np.einsum("lm,cmh->clh", adjacency, hidden)
            hidden = np.tanh(
                agg @ params.tensor(f"message.{step}.w") + params.tensor(f"message.{step}.b")
            )

        path_repr = np.einsum("cl,clh->ch", on_path, hidden)
        load = state.pending.bandwidth / ctx.max_bandwidth
        demand_emb = np.tanh(
            load * params.tensor("demand_embed.w")[0] + params.tensor("demand_embed.b")
        )
        # tanh on the readout pre-activation lets the (shared) demand
        # embedding interact with each path sum; a linear readout would
        # cancel it in the softmax.
        scores = np.tanh(path_repr + demand_emb) @ params.tensor("readout.w")[:, 0] + params.tensor(
            "readout.b"
        )[0]
    if not np.all(np.isfinite(scores)):
        raise EvaluationError(f"non-finite candidate scores: {scores}")
    scores = scores - scores.max()
    exp = np.exp(scores)
    return exp / exp.sum()


def _message_steps(manifest: ParamManifest) -> int:
    return sum(1 for name, _ in manifest.tensors if name.endswith(".w") and name.startswith("message."))


def sample_action(
    probs: np.ndarray, config: PolicyConfig, rng: np.random.Generator | None
) -> int:
    """Argmax when deterministic, else a draw from the noise-mixed distribution.

    The sampling distribution is (1 - eps) * probs + eps * uniform.
    """
    if config.deterministic_eval:
        return int(np.argmax(probs))
    if rng is None:
        raise ValueError("stochastic action sampling needs an rng")
    eps = config.action_noise_epsilon
    mixture = (1.0 - eps) * probs + eps / probs.shape[0]
    cdf = np.cumsum(mixture)
    draw = rng.random() * cdf[-1]
    return min(int(np.searchsorted(cdf, draw, side="right")), probs.shape[0] - 1)


def make_agent(
    params: PolicyParams,
    config: PolicyConfig,
    env_config: EnvConfig,
    episode_seed: int | None = None,
    ctx: PolicyContext | None = None,
) -> Callable[[EnvState], int]:
    """An EnvState -> action callable for one episode.

    Stochastic agents draw their action noise from a stream keyed by the
    episode seed, so rollouts are reproducible.
    """
    if ctx is None:
        ctx = PolicyContext.for_env(env_config)
    rng = None
    if not config.deterministic_eval:
        if episode_seed is None:
            raise ValueError("stochastic agents need an episode_seed for their noise stream")
        rng = rng_from_key(derive_key(TAG_ACTION, episode_seed))
    paths = env_config.paths

    def act(state: EnvState) -> int:
        candidates = paths.path_arrays(state.pending.src, state.pending.dst)
        probs = forward(params, ctx, state, candidates)
        if config.feasibility_masking:
            mask = feasible_actions(state, paths)
            if mask.any():
                probs = np.where(mask, probs, 0.0)
                probs = probs / probs.sum()
        return sample_action(probs, config, rng)

    return act


def training_variant(config: PolicyConfig) -> PolicyConfig:
    """The stochastic twin used for fitness rollouts during training."""
    return replace(config, deterministic_eval=False)
