"""Ranking metrics, head/tail transition analysis, frequency-bin reports.

Each evaluated instance has a single ground-truth POI, so NDCG uses the
one-relevant-item form 1/log2(rank+1). Ties in logits are broken by
ascending POI index to keep ranks reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .transition_graph import TransitionStore

FREQUENCY_BIN_CAP = 10  # exact counts 0..9, then a pooled 10+ bin


def rank_target(logits: np.ndarray, target: int) -> int:
    """1-based rank: strictly greater logits first, index breaks ties."""
    logits = np.asarray(logits)
    value = logits[target]
    greater = int(np.sum(logits > value))
    tied_before = int(np.sum(logits[:target] == value))
    return 1 + greater + tied_before


def rank_targets(logits: torch.Tensor, targets: torch.Tensor) -> np.ndarray:
    """Vectorized rank_target over a batch of logit rows."""
    values = logits.gather(1, targets.view(-1, 1))
    greater = (logits > values).sum(dim=1)
    idx = torch.arange(logits.shape[1], device=logits.device).unsqueeze(0)
    tied_before = ((logits == values) & (idx < targets.view(-1, 1))).sum(dim=1)
    return (1 + greater + tied_before).cpu().numpy()


def metrics(ranks, cutoff: int) -> dict[str, float | None]:
    """HR@K, NDCG@K, and MRR over a list of 1-based ranks."""
    ranks = np.asarray(list(ranks), dtype=np.float64)
    if ranks.size == 0:
        return {f"hr@{cutoff}": None, f"ndcg@{cutoff}": None, "mrr": None, "count": 0}
    hit = ranks <= cutoff
    ndcg = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
    return {
        f"hr@{cutoff}": float(hit.mean()),
        f"ndcg@{cutoff}": float(ndcg.mean()),
        "mrr": float((1.0 / ranks).mean()),
        "count": int(ranks.size),
    }


def metric_table(ranks, cutoffs=(1, 20)) -> dict:
    """Merge metrics at several cutoffs into one mapping."""
    ranks = np.asarray(list(ranks))
    out: dict = {"count": int(ranks.size)}
    for k in cutoffs:
        m = metrics(ranks, k)
        out[f"hr@{k}"] = m[f"hr@{k}"]
        out[f"ndcg@{k}"] = m[f"ndcg@{k}"]
    out["mrr"] = metrics(ranks, cutoffs[0])["mrr"] if ranks.size else None
    return out


def transition_counts(sources: np.ndarray, targets: np.ndarray,
                      store: TransitionStore) -> np.ndarray:
    """Training count of each evaluated (source, target) transition."""
    return np.asarray([store.count(int(s), int(d))
                       for s, d in zip(sources, targets)], dtype=np.int64)


def head_tail_split(sources: np.ndarray, targets: np.ndarray,
                    store: TransitionStore, tail_threshold: int = 1,
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks (head, tail); tail means train count <= threshold."""
    counts = transition_counts(sources, targets, store)
    tail = counts <= tail_threshold
    return ~tail, tail


def unique_pair_shares(sources: np.ndarray, targets: np.ndarray,
                       store: TransitionStore, tail_threshold: int = 1) -> dict:
    """Head/tail shares over unique evaluated (source, target) pairs."""
    pairs = sorted(set(zip(sources.tolist(), targets.tolist())))
    if not pairs:
        return {"unique_pairs": 0, "tail_share": None, "head_share": None}
    tail = sum(1 for s, d in pairs if store.count(s, d) <= tail_threshold)
    return {
        "unique_pairs": len(pairs),
        "tail_share": tail / len(pairs),
        "head_share": 1.0 - tail / len(pairs),
    }


def frequency_bin_report(ranks: np.ndarray, counts: np.ndarray,
                         cutoffs=(1, 20)) -> list[dict]:
    """Metrics per exact training-frequency bin 0..9 and pooled 10+."""
    ranks = np.asarray(ranks)
    counts = np.asarray(counts)
    bins = np.minimum(counts, FREQUENCY_BIN_CAP)
    rows = []
    for b in range(FREQUENCY_BIN_CAP + 1):
        mask = bins == b
        label = f"{b}" if b < FREQUENCY_BIN_CAP else f"{FREQUENCY_BIN_CAP}+"
        row = {"bin": label, **metric_table(ranks[mask], cutoffs)}
        rows.append(row)
    return rows


@dataclass
class EvalReport:
    """Overall, head/tail, and frequency-binned ranking quality."""
    overall: dict
    head: dict
    tail: dict
    pair_shares: dict
    bins: list[dict] = field(default_factory=list)
    tail_threshold: int = 1

    def to_dict(self) -> dict:
        return {
            "tail_threshold": self.tail_threshold,
            "overall": self.overall,
            "head": self.head,
            "tail": self.tail,
            "unique_pair_view": self.pair_shares,
            "frequency_bins": self.bins,
        }


def build_report(ranks: np.ndarray, sources: np.ndarray, targets: np.ndarray,
                 store: TransitionStore, tail_threshold: int = 1,
                 cutoffs=(1, 20)) -> EvalReport:
    ranks = np.asarray(ranks)
    head_mask, tail_mask = head_tail_split(sources, targets, store, tail_threshold)
    counts = transition_counts(sources, targets, store)
    return EvalReport(
        overall=metric_table(ranks, cutoffs),
        head=metric_table(ranks[head_mask], cutoffs),
        tail=metric_table(ranks[tail_mask], cutoffs),
        pair_shares=unique_pair_shares(sources, targets, store, tail_threshold),
        bins=frequency_bin_report(ranks, counts, cutoffs),
        tail_threshold=tail_threshold,
    )
