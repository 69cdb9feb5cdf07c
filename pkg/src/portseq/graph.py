"""Port vocabulary, the directed service graph and exact-h-step reachability.

Port indices are 1-based (``1..n``); the sentinel index ``n + 1`` stands for
unknown or padding entries and never carries an edge.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)


class VocabularyEmptyError(ValueError):
    pass


@dataclass(frozen=True)
class PortVocabulary:
    names: tuple[str, ...]
    index_of: dict[str, int] = field(repr=False, compare=False)

    @property
    def sentinel(self) -> int:
        return len(self.names) + 1

    def __len__(self):
        return len(self.names)

    def index(self, name: str | None) -> int:
        """Index for ``name``; ``None`` and unknown names map to the sentinel."""
        if name is None:
            return self.sentinel
        return self.index_of.get(name, self.sentinel)

    def name(self, index: int) -> str | None:
        if index == self.sentinel:
            return None
        if not 1 <= index <= len(self.names):
            raise IndexError(f"port index {index} outside 1..{len(self.names)}")
        return self.names[index - 1]


def build_vocabulary(port_names: Iterable[str]) -> PortVocabulary:
    names = tuple(sorted(set(port_names)))
    if not names:
        raise VocabularyEmptyError("cannot build a port vocabulary from no names")
    return PortVocabulary(names, {n: i + 1 for i, n in enumerate(names)})


@dataclass(frozen=True)
class ReachabilityMask:
    origin: int
    step: int
    bits: np.ndarray  # bool, length n; bits[k - 1] is port k
    fallback: bool = False

    def ports(self) -> frozenset[int]:
        return frozenset((np.flatnonzero(self.bits) + 1).tolist())

    def __len__(self):
        return int(self.bits.sum())


class AdjacencyGraph:
    """Directed 0/1 adjacency over ports ``1..size`` with a reachability cache."""

    def __init__(self, size: int, edges: Iterable[tuple[int, int]] = (), cache_horizon: int = 3):
        self.size = size
        self.cache_horizon = cache_horizon
        pairs = sorted(set(edges))
        for i, j in pairs:
            if not (1 <= i <= size and 1 <= j <= size):
                raise IndexError(f"edge ({i}, {j}) outside ports 1..{size}")
        rows = np.array([i - 1 for i, _ in pairs], dtype=np.int64)
        cols = np.array([j - 1 for _, j in pairs], dtype=np.int64)
        self.edges = sparse.csr_array(
            (np.ones(len(pairs), dtype=bool), (rows, cols)), shape=(size, size)
        )
        self.skipped = 0
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def sentinel(self):
        return self.size + 1

    def edge_list(self) -> list[tuple[int, int]]:
        coo = self.edges.tocoo()
        return sorted(zip((coo.row + 1).tolist(), (coo.col + 1).tolist()))

    def dense(self) -> np.ndarray:
        return self.edges.toarray()

    def successors(self, port: int) -> np.ndarray:
        """0-based column indices of the successors of 1-based ``port``."""
        lo, hi = self.edges.indptr[port - 1], self.edges.indptr[port]
        return self.edges.indices[lo:hi]

    def exact_reach(self, origin: int, h: int, use_cache: bool = True) -> np.ndarray:
        """Boolean vector of ports reachable by a walk of exactly ``h`` edges."""
        if not 1 <= origin <= self.size:
            raise IndexError(f"origin {origin} outside ports 1..{self.size}")
        if h < 1:
            raise ValueError(f"step must be >= 1, got {h}")
        key = (origin, h)
        if use_cache and key in self._cache:
            return self._cache[key]
        frontier = np.zeros(self.size, dtype=bool)
        frontier[origin - 1] = True
        for _ in range(h):
            nxt = np.zeros(self.size, dtype=bool)
            for node in np.flatnonzero(frontier):
                nxt[self.successors(node + 1)] = True
            frontier = nxt
            if not frontier.any():
                break
        frontier.flags.writeable = False
        if use_cache and h <= self.cache_horizon:
            self._cache[key] = frontier
        return frontier


def build_adjacency(pairs: Iterable[tuple[int, int]], vocab: PortVocabulary,
                    cache_horizon: int = 3) -> AdjacencyGraph:
    """Graph with an edge for every observed (origin, destination) pair.

    Pairs touching the sentinel are skipped and counted in ``graph.skipped``.
    """
    kept, skipped = [], 0
    for i, j in pairs:
        if i == vocab.sentinel or j == vocab.sentinel:
            skipped += 1
            continue
        kept.append((int(i), int(j)))
    graph = AdjacencyGraph(len(vocab), kept, cache_horizon=cache_horizon)
    graph.skipped = skipped
    if skipped:
        logger.warning("build_adjacency: skipped %d pair(s) touching the sentinel", skipped)
    return graph


def reachable_set(graph: AdjacencyGraph, origin: int, h: int) -> ReachabilityMask:
    """Feasible ports at decoding step ``h``.

    When no walk of length ``h`` exists the mask falls back to every port and
    a warning is logged, so decoding always has a non-empty support.
    """
    bits = graph.exact_reach(origin, h)
    if bits.any():
        return ReachabilityMask(origin, h, bits)
    logger.warning("no %d-step successor for port %d; using all ports", h, origin)
    return ReachabilityMask(origin, h, np.ones(graph.size, dtype=bool), fallback=True)


def save_edgelist(graph: AdjacencyGraph, path):
    lines = [f"#ports={graph.size}"] + [f"{i}\t{j}" for i, j in graph.edge_list()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_edgelist(path, cache_horizon: int = 3) -> AdjacencyGraph:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#ports="):
        raise ValueError(f"{path}: missing '#ports=<n>' header")
    size = int(lines[0].split("=", 1)[1])
    edges = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{ln}: expected 'origin<TAB>dest'")
        edges.append((int(parts[0]), int(parts[1])))
    return AdjacencyGraph(size, edges, cache_horizon=cache_horizon)
