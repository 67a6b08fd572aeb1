"""Revisit evidence: per-candidate history statistics, prior, calibration.

For every POI a user has visited before, three statistics summarize the
revisit signal: total visit count, recency in check-in steps, and whether
the POI appears in the recent window. A clipped learnable combination of
those gives the revisit prior; a signed context gate rescales it using the
prediction state, query-time features, and last-visit temporal features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import RevisitConfig
from .dataset import UNKNOWN_POI, Instances, UserSequences


@dataclass
class RevisitStats:
    """Candidate statistics for one prediction step.

    Candidates are the distinct previously visited POIs, capped at the most
    recently visited ``cap`` of them, ordered most-recent first. Recency is
    measured in check-in steps: 1 means the candidate is the current source.
    """
    poi: np.ndarray         # (C,) int32
    count: np.ndarray       # (C,) int32, visits before the step
    last_step: np.ndarray   # (C,) int32, most recent visit position
    last_ts: np.ndarray     # (C,) int64, timestamp of that visit
    step: int
    window_len: int

    @property
    def recency(self) -> np.ndarray:
        return self.step - self.last_step

    @property
    def in_window(self) -> np.ndarray:
        return self.recency <= self.window_len

    def __len__(self) -> int:
        return len(self.poi)


def compute_history_stats(history_pois: np.ndarray, history_ts: np.ndarray,
                          window_len: int, cap: int) -> RevisitStats:
    """Scan one observed history and collect candidate statistics.

    ``history_pois`` holds the full prefix before the prediction step;
    entries equal to UNKNOWN_POI occupy positions but never become
    candidates.
    """
    step = len(history_pois)
    count: dict[int, int] = {}
    last_step: dict[int, int] = {}
    last_ts: dict[int, int] = {}
    for q in range(step):
        poi = int(history_pois[q])
        if poi == UNKNOWN_POI:
            continue
        count[poi] = count.get(poi, 0) + 1
        last_step[poi] = q
        last_ts[poi] = int(history_ts[q])

    order = sorted(count, key=lambda p: last_step[p], reverse=True)[:cap]
    return RevisitStats(
        poi=np.asarray(order, dtype=np.int32),
        count=np.asarray([count[p] for p in order], dtype=np.int32),
        last_step=np.asarray([last_step[p] for p in order], dtype=np.int32),
        last_ts=np.asarray([last_ts[p] for p in order], dtype=np.int64),
        step=step,
        window_len=window_len,
    )


@dataclass
class CandidateBlocks:
    """Ragged candidate statistics for every instance of a split."""
    offsets: np.ndarray     # (n+1,) int64
    poi: np.ndarray         # flat int32
    count: np.ndarray       # flat int32
    recency: np.ndarray     # flat int32
    last_ts: np.ndarray     # flat int64
    window_len: int

    def block(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def max_candidates(self, indices: np.ndarray) -> int:
        widths = self.offsets[indices + 1] - self.offsets[indices]
        return int(widths.max()) if len(widths) else 0


def build_candidate_blocks(sequences: UserSequences, instances: Instances,
                           window_len: int, cap: int) -> CandidateBlocks:
    """Precompute candidate statistics for all instances in one sweep.

    Statistics depend only on the data, so each user's sequence is walked
    once with a running per-POI state and snapshotted at every instance
    step. Results match ``compute_history_stats`` entry for entry.
    """
    n = len(instances)
    order = np.lexsort((instances.step, instances.user))
    poi_parts: list[np.ndarray] = [np.empty(0, dtype=np.int32)] * n
    count_parts: list[np.ndarray] = [np.empty(0, dtype=np.int32)] * n
    rec_parts: list[np.ndarray] = [np.empty(0, dtype=np.int32)] * n
    ts_parts: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * n

    i = 0
    while i < len(order):
        user = int(instances.user[order[i]])
        j = i
        while j < len(order) and int(instances.user[order[j]]) == user:
            j += 1

        sl = sequences.user_slice(user)
        pois = sequences.poi[sl]
        ts = sequences.ts[sl]
        count: dict[int, int] = {}
        last_step: dict[int, int] = {}
        last_ts: dict[int, int] = {}
        pos = 0
        for idx in order[i:j]:
            step = int(instances.step[idx])
            while pos < step:
                poi = int(pois[pos])
                if poi != UNKNOWN_POI:
                    count[poi] = count.get(poi, 0) + 1
                    last_step[poi] = pos
                    last_ts[poi] = int(ts[pos])
                pos += 1
            cands = sorted(count, key=lambda p: last_step[p], reverse=True)[:cap]
            poi_parts[idx] = np.asarray(cands, dtype=np.int32)
            count_parts[idx] = np.asarray([count[p] for p in cands], dtype=np.int32)
            rec_parts[idx] = np.asarray([step - last_step[p] for p in cands], dtype=np.int32)
            ts_parts[idx] = np.asarray([last_ts[p] for p in cands], dtype=np.int64)
        i = j

    widths = np.asarray([len(p) for p in poi_parts], dtype=np.int64)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(widths, out=offsets[1:])
    return CandidateBlocks(
        offsets=offsets,
        poi=np.concatenate(poi_parts) if n else np.empty(0, dtype=np.int32),
        count=np.concatenate(count_parts) if n else np.empty(0, dtype=np.int32),
        recency=np.concatenate(rec_parts) if n else np.empty(0, dtype=np.int32),
        last_ts=np.concatenate(ts_parts) if n else np.empty(0, dtype=np.int64),
        window_len=window_len,
    )


@dataclass
class CandidateBatch:
    """Padded per-batch candidate tensors. Padded slots have mask False."""
    poi: torch.Tensor            # (B, C) long, pad slots hold pad_poi
    count: torch.Tensor          # (B, C) float
    recency: torch.Tensor        # (B, C) float
    in_window: torch.Tensor      # (B, C) float
    last_hour: torch.Tensor      # (B, C) long
    last_dow: torch.Tensor       # (B, C) long
    last_tod_frac: torch.Tensor  # (B, C) float
    mask: torch.Tensor           # (B, C) bool
    query_tod_frac: torch.Tensor  # (B,) float
    query_dow: torch.Tensor       # (B,) long


def collate_candidates(blocks: CandidateBlocks, indices: np.ndarray,
                       query_times: np.ndarray, pad_poi: int) -> CandidateBatch:
    """Gather ragged blocks for a batch and pad to the widest instance."""
    batch = len(indices)
    width = max(blocks.max_candidates(indices), 1)
    poi = np.full((batch, width), pad_poi, dtype=np.int64)
    count = np.zeros((batch, width), dtype=np.float32)
    recency = np.ones((batch, width), dtype=np.float32)
    in_window = np.zeros((batch, width), dtype=np.float32)
    last_hour = np.zeros((batch, width), dtype=np.int64)
    last_dow = np.zeros((batch, width), dtype=np.int64)
    last_tod = np.zeros((batch, width), dtype=np.float32)
    mask = np.zeros((batch, width), dtype=bool)

    for row, idx in enumerate(indices):
        sl = blocks.block(int(idx))
        c = sl.stop - sl.start
        if c == 0:
            continue
        poi[row, :c] = blocks.poi[sl]
        count[row, :c] = blocks.count[sl]
        rec = blocks.recency[sl]
        recency[row, :c] = rec
        in_window[row, :c] = rec <= blocks.window_len
        ts = blocks.last_ts[sl]
        last_hour[row, :c] = (ts % 86400) // 3600
        last_dow[row, :c] = (ts // 86400 + 3) % 7
        last_tod[row, :c] = (ts % 86400) / 86400.0
        mask[row, :c] = True

    qt = np.asarray(query_times, dtype=np.int64)
    return CandidateBatch(
        poi=torch.from_numpy(poi),
        count=torch.from_numpy(count),
        recency=torch.from_numpy(recency),
        in_window=torch.from_numpy(in_window),
        last_hour=torch.from_numpy(last_hour),
        last_dow=torch.from_numpy(last_dow),
        last_tod_frac=torch.from_numpy(last_tod),
        mask=torch.from_numpy(mask),
        query_tod_frac=torch.from_numpy(((qt % 86400) / 86400.0).astype(np.float32)),
        query_dow=torch.from_numpy(((qt // 86400 + 3) % 7).astype(np.int64)),
    )


def query_time_features(tod_frac: torch.Tensor, dow: torch.Tensor) -> torch.Tensor:
    """Cyclic time-of-day plus one-hot day-of-week, (B, 9)."""
    angle = 2.0 * math.pi * tod_frac
    onehot = torch.nn.functional.one_hot(dow, num_classes=7).float()
    return torch.cat([torch.sin(angle).unsqueeze(-1),
                      torch.cos(angle).unsqueeze(-1), onehot], dim=-1)


class RevisitHead(nn.Module):
    """Learnable revisit prior and signed contextual calibration."""

    def __init__(self, hidden_dim: int, poi_dim: int, cfg: RevisitConfig):
        super().__init__()
        self.clip_max = cfg.prior_clip
        # Prior starts small and the correction starts as a no-op so the
        # curriculum hands off smoothly from the pure core scorer.
        self.lambda_prior = nn.Parameter(torch.tensor(0.1))
        self.w_count = nn.Parameter(torch.tensor(0.1))
        self.w_recency = nn.Parameter(torch.tensor(0.1))
        self.w_window = nn.Parameter(torch.tensor(0.1))
        self.log_recency_tau = nn.Parameter(torch.tensor(math.log(cfg.recency_tau_init)))
        self.lambda_corr = nn.Parameter(torch.tensor(0.0))

        t_dim = cfg.time_embedding_dim
        h_c = cfg.calibration_hidden
        self.tod_embedding = nn.Embedding(24, t_dim)
        self.dow_embedding = nn.Embedding(7, t_dim)
        self.hist_mlp = nn.Sequential(
            nn.Linear(3 + 2 * t_dim + 3, h_c), nn.GELU(), nn.Linear(h_c, h_c))
        self.query_mlp = nn.Sequential(
            nn.Linear(hidden_dim + 9, h_c), nn.GELU(), nn.Linear(h_c, h_c))
        self.cand_mlp = nn.Sequential(
            nn.Linear(poi_dim + h_c, h_c), nn.GELU(), nn.Linear(h_c, h_c))
        self.gate_mlp = nn.Sequential(
            nn.Linear(3 * h_c, h_c), nn.GELU(), nn.Linear(h_c, 1))

    @property
    def recency_tau(self) -> torch.Tensor:
        return torch.exp(self.log_recency_tau)

    def stat_vector(self, cands: CandidateBatch) -> torch.Tensor:
        """(B, C, 3): log-count, recency decay, window flag."""
        return torch.stack([
            torch.log1p(cands.count),
            torch.exp(-cands.recency / self.recency_tau),
            cands.in_window,
        ], dim=-1)

    def prior(self, cands: CandidateBatch) -> torch.Tensor:
        """Clipped revisit prior, (B, C); zero at padded slots."""
        stats = self.stat_vector(cands)
        raw = self.lambda_prior * (
            self.w_count * stats[..., 0]
            + self.w_recency * stats[..., 1]
            + self.w_window * stats[..., 2]
        )
        return torch.clamp(raw, 0.0, self.clip_max) * cands.mask.float()

    def history_feature(self, cands: CandidateBatch) -> torch.Tensor:
        """(B, C, h_c) representation of each candidate's visit history."""
        stats = self.stat_vector(cands)
        tod_diff = 2.0 * math.pi * (cands.query_tod_frac.unsqueeze(1) - cands.last_tod_frac)
        pair = torch.stack([
            torch.cos(tod_diff),
            torch.sin(tod_diff),
            (cands.query_dow.unsqueeze(1) == cands.last_dow).float(),
        ], dim=-1)
        feats = torch.cat([
            stats,
            self.tod_embedding(cands.last_hour),
            self.dow_embedding(cands.last_dow),
            pair,
        ], dim=-1)
        return self.hist_mlp(feats)

    def calibrate(self, state: torch.Tensor, cand_embeddings: torch.Tensor,
                  cands: CandidateBatch, priors: torch.Tensor,
                  ) -> tuple[torch.Tensor, torch.Tensor]:
        """Signed gate and correction, each (B, C).

        ``state`` and ``cand_embeddings`` may be detached views when the
        caller needs the correction path isolated from the backbone.
        """
        t_feat = query_time_features(cands.query_tod_frac, cands.query_dow)
        query = self.query_mlp(torch.cat([state, t_feat], dim=-1))
        cand_state = self.cand_mlp(
            torch.cat([cand_embeddings, self.history_feature(cands)], dim=-1))
        q = query.unsqueeze(1).expand_as(cand_state)
        gate = torch.tanh(
            self.gate_mlp(torch.cat([q, cand_state, q * cand_state], dim=-1))
        ).squeeze(-1)
        correction = self.lambda_corr * gate * priors
        return gate, correction
