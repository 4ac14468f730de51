"""Network topologies and precomputed candidate routing paths.

A topology is an undirected graph of nodes 0..N-1 whose links each carry a
single shared bandwidth pool. The candidate path table holds, for every
ordered (src, dst) pair, up to k loop-free paths ordered by hop count (ties
broken by the lexicographic link-id sequence); those paths are the discrete
action space of the allocation environment.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np


class TopologyError(ValueError):
    """Base class for topology file and validation failures."""


class TopologyParseError(TopologyError):
    """Raised when a topology file is malformed."""


class TopologyValidationError(TopologyError):
    """Raised when a parsed topology violates a structural invariant."""


@dataclass(frozen=True)
class Topology:
    """Immutable undirected graph with per-link capacities.

    Links are identified by their position in ``links``; paths elsewhere in
    the package are sequences of these link ids.
    """

    name: str
    node_count: int
    links: tuple[tuple[int, int, float], ...]

    @cached_property
    def capacities(self) -> np.ndarray:
        caps = np.array([c for _, _, c in self.links], dtype=np.float64)
        caps.setflags(write=False)
        return caps

    @cached_property
    def adjacency(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per node: (link id, neighbor node) pairs, sorted by link id."""
        per_node: list[list[tuple[int, int]]] = [[] for _ in range(self.node_count)]
        for link_id, (a, b, _) in enumerate(self.links):
            per_node[a].append((link_id, b))
            per_node[b].append((link_id, a))
        return tuple(tuple(sorted(n)) for n in per_node)

    def link_endpoints(self, link_id: int) -> tuple[int, int]:
        a, b, _ = self.links[link_id]
        return a, b


def validate_topology(topo: Topology) -> Topology:
    """Check all structural invariants, raising on the first violation.

    Error messages name the offending node, link, or capacity.
    """
    if topo.node_count < 1:
        raise TopologyValidationError(f"node count must be positive, got {topo.node_count}")
    seen: dict[tuple[int, int], int] = {}
    for link_id, (a, b, cap) in enumerate(topo.links):
        for node in (a, b):
            if not 0 <= node < topo.node_count:
                raise TopologyValidationError(
                    f"link {link_id} ({a}-{b}): node {node} outside [0, {topo.node_count})"
                )
        if a == b:
            raise TopologyValidationError(f"link {link_id} ({a}-{b}): self-loop")
        if cap <= 0:
            raise TopologyValidationError(
                f"link {link_id} ({a}-{b}): capacity {cap} is not positive"
            )
        key = (min(a, b), max(a, b))
        if key in seen:
            raise TopologyValidationError(
                f"link {link_id} ({a}-{b}): duplicates link {seen[key]}"
            )
        seen[key] = link_id
    unreached = _unreached_nodes(topo)
    if unreached:
        raise TopologyValidationError(
            f"graph is disconnected: node {unreached[0]} unreachable from node 0"
        )
    return topo


def _unreached_nodes(topo: Topology) -> list[int]:
    visited = [False] * topo.node_count
    visited[0] = True
    stack = [0]
    while stack:
        node = stack.pop()
        for _, nxt in topo.adjacency[node]:
            if not visited[nxt]:
                visited[nxt] = True
                stack.append(nxt)
    return [n for n, v in enumerate(visited) if not v]


def load_topology(source: str, name: str = "topology") -> Topology:
    """Parse and validate a topology from file content.

    Format: comment lines start with ``#``; the first data line is
    ``nodes <N>``; every following data line is ``link <a> <b> <capacity>``.
    """
    node_count: int | None = None
    links: list[tuple[int, int, float]] = []
    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if node_count is None:
            if tokens[0] != "nodes" or len(tokens) != 2:
                raise TopologyParseError(
                    f"line {lineno}: expected 'nodes <N>' first, got {line!r}"
                )
            try:
                node_count = int(tokens[1])
            except ValueError:
                raise TopologyParseError(f"line {lineno}: bad node count {tokens[1]!r}") from None
        elif tokens[0] == "link":
            if len(tokens) != 4:
                raise TopologyParseError(
                    f"line {lineno}: expected 'link <a> <b> <capacity>', got {line!r}"
                )
            try:
                a, b = int(tokens[1]), int(tokens[2])
                cap = float(tokens[3])
            except ValueError:
                raise TopologyParseError(f"line {lineno}: bad link fields in {line!r}") from None
            links.append((a, b, cap))
        else:
            raise TopologyParseError(f"line {lineno}: unknown directive {tokens[0]!r}")
    if node_count is None:
        raise TopologyParseError("file contains no 'nodes' line")
    return validate_topology(Topology(name=name, node_count=node_count, links=tuple(links)))


def bundled_topology_names() -> tuple[str, ...]:
    files = resources.files("esotn.data")
    return tuple(sorted(p.name[: -len(".txt")] for p in files.iterdir() if p.name.endswith(".txt")))


def load_bundled_topology(name: str) -> Topology:
    """Load one of the topologies shipped with the package (e.g. ``nsfnet``)."""
    try:
        text = resources.files("esotn.data").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise TopologyError(
            f"no bundled topology {name!r}; available: {', '.join(bundled_topology_names())}"
        ) from None
    return load_topology(text, name=name)


@dataclass(frozen=True)
class CandidatePathTable:
    """Up to k loop-free paths per ordered node pair, as link-id sequences.

    Path lists are ordered by (hop count, lexicographic link-id sequence),
    so identical inputs always produce identical tables.
    """

    k: int
    entries: dict[tuple[int, int], tuple[tuple[int, ...], ...]]
    _arrays: dict[tuple[int, int], tuple[np.ndarray, ...]] = field(
        default_factory=dict, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        for pair, paths in self.entries.items():
            self._arrays[pair] = tuple(np.array(p, dtype=np.intp) for p in paths)

    def paths_for(self, src: int, dst: int) -> tuple[tuple[int, ...], ...]:
        return self.entries[(src, dst)]

    def path_arrays(self, src: int, dst: int) -> tuple[np.ndarray, ...]:
        return self._arrays[(src, dst)]


def k_shortest_paths(topo: Topology, src: int, dst: int, k: int) -> list[tuple[int, ...]]:
    """The k hop-shortest loop-free paths from src to dst as link-id tuples.

    Best-first search over partial simple paths keyed by (hop count, link-id
    sequence). Because extending a partial path only increases its key,
    completed paths pop in exactly the table ordering. Returns fewer than k
    paths when the graph has fewer loop-free options.
    """
    found: list[tuple[int, ...]] = []
    # Heap entries: (hops, link sequence, current node, visited-node bitmask).
    heap: list[tuple[int, tuple[int, ...], int, int]] = [(0, (), src, 1 << src)]
    while heap and len(found) < k:
        hops, seq, node, visited = heapq.heappop(heap)
        if node == dst:
            found.append(seq)
            continue
        for link_id, nxt in topo.adjacency[node]:
            if visited >> nxt & 1:
                continue
            heapq.heappush(heap, (hops + 1, seq + (link_id,), nxt, visited | (1 << nxt)))
    return found


def compute_candidate_paths(topo: Topology, k: int) -> CandidatePathTable:
    """Precompute the candidate path table for every ordered node pair."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    entries: dict[tuple[int, int], tuple[tuple[int, ...], ...]] = {}
    for src in range(topo.node_count):
        for dst in range(topo.node_count):
            if src == dst:
                continue
            entries[(src, dst)] = tuple(k_shortest_paths(topo, src, dst, k))
    return CandidatePathTable(k=k, entries=entries)
