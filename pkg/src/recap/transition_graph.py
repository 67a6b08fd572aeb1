"""Training transition graph: counts, row-normalized adjacency, propagation.

The graph records how often one POI is followed by another inside training
trajectories. Its row-normalized adjacency drives multi-hop propagation of
the POI embedding table, producing the source-specific evidence behind the
graph token. The same counts back the head/tail split and the hop
coverage / signal-to-noise diagnostics.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import TRAIN, UNKNOWN_POI, UserSequences


@dataclass
class TransitionStore:
    """Sparse source->destination counts over training trajectories."""
    num_pois: int
    counts: dict[tuple[int, int], int] = field(default_factory=dict)

    def count(self, source: int, dest: int) -> int:
        return self.counts.get((source, dest), 0)

    @property
    def out_degree_mass(self) -> dict[int, int]:
        mass: dict[int, int] = defaultdict(int)
        for (s, _d), m in self.counts.items():
            mass[s] += m
        return dict(mass)

    def warm_edges(self) -> set[tuple[int, int]]:
        """Edges observed at least twice (head / warm transitions)."""
        return {edge for edge, m in self.counts.items() if m >= 2}

    def successors(self) -> dict[int, list[int]]:
        """Adjacency lists over edges with positive count."""
        adj: dict[int, list[int]] = defaultdict(list)
        for (s, d) in self.counts:
            adj[s].append(d)
        for s in adj:
            adj[s].sort()
        return dict(adj)


def count_transitions(sequences: UserSequences, num_pois: int,
                      across_trajectories: bool = False) -> TransitionStore:
    """Count ordered consecutive POI pairs within training trajectories.

    With ``across_trajectories`` every consecutive pair of a user's training
    check-ins is counted regardless of trajectory boundaries.
    """
    counts: dict[tuple[int, int], int] = {}
    for user in range(sequences.num_users):
        sl = sequences.user_slice(user)
        pois = sequences.poi[sl]
        spl = sequences.split[sl]
        traj = sequences.traj[sl]
        for i in range(1, len(pois)):
            if spl[i] != TRAIN or spl[i - 1] != TRAIN:
                continue
            if not across_trajectories and traj[i] != traj[i - 1]:
                continue
            s, d = int(pois[i - 1]), int(pois[i])
            if s == UNKNOWN_POI or d == UNKNOWN_POI:
                continue
            counts[(s, d)] = counts.get((s, d), 0) + 1
    return TransitionStore(num_pois=num_pois, counts=counts)


def count_transitions_from_pairs(pairs, num_pois: int) -> TransitionStore:
    """Build a store directly from an iterable of (source, dest) pairs."""
    counts: dict[tuple[int, int], int] = {}
    for s, d in pairs:
        counts[(int(s), int(d))] = counts.get((int(s), int(d)), 0) + 1
    return TransitionStore(num_pois=num_pois, counts=counts)


@dataclass
class TransitionMatrix:
    """Row-stochastic sparse adjacency; zero out-degree rows stay zero."""
    matrix: torch.Tensor  # sparse_coo (P, P) float32

    @property
    def num_pois(self) -> int:
        return self.matrix.shape[0]

    def row_sums(self) -> torch.Tensor:
        return torch.sparse.sum(self.matrix, dim=1).to_dense()


def normalize(store: TransitionStore) -> TransitionMatrix:
    """Divide each row of the count matrix by its total outgoing mass."""
    n = store.num_pois
    if not store.counts:
        empty = torch.sparse_coo_tensor(torch.empty((2, 0), dtype=torch.long),
                                        torch.empty(0), (n, n)).coalesce()
        return TransitionMatrix(matrix=empty)

    mass = store.out_degree_mass
    rows, cols, vals = [], [], []
    for (s, d), m in sorted(store.counts.items()):
        rows.append(s)
        cols.append(d)
        vals.append(m / mass[s])
    indices = torch.tensor([rows, cols], dtype=torch.long)
    values = torch.tensor(vals, dtype=torch.float32)
    matrix = torch.sparse_coo_tensor(indices, values, (n, n)).coalesce()
    return TransitionMatrix(matrix=matrix)


def propagate(embeddings: torch.Tensor, matrix: TransitionMatrix, hops: int) -> torch.Tensor:
    """Apply ``hops`` left-multiplications by the adjacency.

    Gradients flow through to the embedding table, so the graph token can
    train the POI embeddings. Propagation is recomputed per forward pass
    for exactly that reason.
    """
    if hops < 0:
        raise ValueError("hops must be >= 0")
    if embeddings.shape[0] != matrix.num_pois:
        raise ValueError(
            f"embedding rows ({embeddings.shape[0]}) != POI count ({matrix.num_pois})"
        )
    out = embeddings
    for _ in range(hops):
        out = torch.sparse.mm(matrix.matrix, out)
    return out


class GraphTokenHead(torch.nn.Module):
    """Map a propagated source row to a hidden-dim token: LN(MLP(row))."""

    def __init__(self, poi_dim: int, hidden_dim: int, dropout: float = 0.1):
        super().__init__()
        self.proj = torch.nn.Sequential(
            torch.nn.Linear(poi_dim, hidden_dim),
            torch.nn.GELU(),
            torch.nn.Linear(hidden_dim, hidden_dim),
        )
        self.norm = torch.nn.LayerNorm(hidden_dim)
        self.dropout = torch.nn.Dropout(dropout)

    def forward(self, propagated_rows: torch.Tensor) -> torch.Tensor:
        return self.dropout(self.norm(self.proj(propagated_rows)))


# ---------------------------------------------------------------------------
# Hop coverage / SNR diagnostics
# ---------------------------------------------------------------------------

@dataclass
class HopRecord:
    hops: int
    avg_candidates: float
    covered: int            # unseen test transitions whose target is reachable
    coverage: float
    candidate_total: int
    snr: float              # covered / (candidates - covered); inf when equal


@dataclass
class HopAnalysis:
    num_unseen: int
    num_sources: int
    records: list[HopRecord]


def hop_candidates(store: TransitionStore, source: int, hops: int,
                   adjacency: dict[int, list[int]] | None = None) -> set[int]:
    """Cumulative set of destinations reachable in 1..hops steps.

    Breadth-first over positive-count edges; the source itself is included
    only when a cycle of length <= hops returns to it.
    """
    if hops < 1:
        raise ValueError("hops must be >= 1")
    adj = adjacency if adjacency is not None else store.successors()
    reached: set[int] = set()
    frontier = {source}
    for _ in range(hops):
        nxt: set[int] = set()
        for node in frontier:
            for succ in adj.get(node, ()):
                if succ not in reached:
                    nxt.add(succ)
        if not nxt:
            break
        reached |= nxt
        frontier = nxt
    return reached


def coverage_snr(unseen_transitions: set[tuple[int, int]], store: TransitionStore,
                 hop_values: list[int]) -> HopAnalysis:
    """Coverage and SNR of cumulative hop candidate sets.

    ``unseen_transitions`` are the evaluated test transitions with zero
    training count. Candidate totals aggregate over the distinct sources of
    those transitions.
    """
    sources = sorted({s for s, _d in unseen_transitions})
    adjacency = store.successors()
    records = []
    prev_cover = -1.0
    for hops in sorted(hop_values):
        candidate_sets = {s: hop_candidates(store, s, hops, adjacency) for s in sources}
        covered = sum(1 for (s, d) in unseen_transitions if d in candidate_sets[s])
        total = sum(len(c) for c in candidate_sets.values())
        coverage = covered / len(unseen_transitions) if unseen_transitions else 0.0
        noise = total - covered
        snr = covered / noise if noise > 0 else float("inf")
        if coverage < prev_cover:
            raise AssertionError("coverage must be non-decreasing in hop count")
        prev_cover = coverage
        records.append(HopRecord(
            hops=hops,
            avg_candidates=total / len(sources) if sources else 0.0,
            covered=covered,
            coverage=coverage,
            candidate_total=total,
            snr=snr,
        ))
    return HopAnalysis(num_unseen=len(unseen_transitions),
                       num_sources=len(sources), records=records)


def unseen_test_pairs(test_sources: np.ndarray, test_targets: np.ndarray,
                      store: TransitionStore) -> set[tuple[int, int]]:
    """Unique evaluated test transitions absent from the training counts."""
    pairs = set(zip(test_sources.tolist(), test_targets.tolist()))
    return {(s, d) for (s, d) in pairs if store.count(s, d) == 0}
