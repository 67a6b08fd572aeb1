"""Full model: backbone + graph token + revisit calibration, plus batching.

The forward pass follows the staged component gates: the graph token is
scaled (or replaced by zeros), the revisit prior and the contextual
correction are added onto cloned core logits only at candidate positions,
so non-candidate logits stay bit-identical to the core scores. A separate
warm path rebuilds the auxiliary logits with the core scores and every
backbone input detached, leaving only revisit/calibration parameters
trainable through it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn

from .backbone import TrajectoryBackbone
from .config import ModelConfig, RevisitConfig
from .dataset import Instances, InstanceStore
from .revisit import CandidateBatch, CandidateBlocks, RevisitHead, collate_candidates
from .transition_graph import GraphTokenHead, TransitionMatrix, propagate

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class Batch:
    user: torch.Tensor      # (B,) long
    suffix: torch.Tensor    # (B, k) long
    source: torch.Tensor    # (B,) long
    target: torch.Tensor    # (B,) long
    cands: CandidateBatch

    def __len__(self) -> int:
        return len(self.user)


def collate_batch(instances: Instances, blocks: CandidateBlocks,
                  indices: np.ndarray, pad_poi: int) -> Batch:
    indices = np.asarray(indices)
    return Batch(
        user=torch.from_numpy(instances.user[indices].astype(np.int64)),
        suffix=torch.from_numpy(instances.suffix[indices].astype(np.int64)),
        source=torch.from_numpy(instances.source[indices].astype(np.int64)),
        target=torch.from_numpy(instances.target[indices].astype(np.int64)),
        cands=collate_candidates(blocks, indices, instances.query_time[indices], pad_poi),
    )


def select_candidates(cands: CandidateBatch, indices: torch.Tensor) -> CandidateBatch:
    return replace(
        cands,
        poi=cands.poi[indices], count=cands.count[indices],
        recency=cands.recency[indices], in_window=cands.in_window[indices],
        last_hour=cands.last_hour[indices], last_dow=cands.last_dow[indices],
        last_tod_frac=cands.last_tod_frac[indices], mask=cands.mask[indices],
        query_tod_frac=cands.query_tod_frac[indices], query_dow=cands.query_dow[indices],
    )


@dataclass
class ModelOutput:
    state: torch.Tensor        # (B, hidden)
    core_logits: torch.Tensor  # (B, P)
    final_logits: torch.Tensor  # (B, P)
    prior: torch.Tensor        # (B, C)
    gate: torch.Tensor         # (B, C)
    correction: torch.Tensor   # (B, C)


def _add_at_candidates(base: torch.Tensor, cands: CandidateBatch,
                       amounts: torch.Tensor) -> torch.Tensor:
    """Clone ``base`` and add ``amounts`` at real candidate POI columns only."""
    out = base.clone()
    rows, cols = cands.mask.nonzero(as_tuple=True)
    if rows.numel():
        out.index_put_((rows, cands.poi[rows, cols]), amounts[rows, cols],
                       accumulate=True)
    return out


class RecapModel(nn.Module):
    def __init__(self, num_pois: int, num_users: int, num_categories: int,
                 suffix_len: int, model_cfg: ModelConfig, revisit_cfg: RevisitConfig,
                 poi_coords: torch.Tensor, poi_categories: torch.Tensor):
        super().__init__()
        self.cfg = model_cfg
        self.num_pois = num_pois
        self.graph_hops = model_cfg.graph_hops
        self.backbone = TrajectoryBackbone(
            num_pois, num_users, num_categories, suffix_len, model_cfg,
            poi_coords, poi_categories)
        self.graph_head = GraphTokenHead(
            model_cfg.poi_dim, model_cfg.hidden_dim, model_cfg.graph_dropout)
        self.revisit = RevisitHead(model_cfg.hidden_dim, model_cfg.poi_dim, revisit_cfg)
        self.transition_matrix: TransitionMatrix | None = None

    def attach_graph(self, matrix: TransitionMatrix) -> None:
        self.transition_matrix = matrix

    # Parameter groups: the holdout loss must not touch the first group, and
    # the late-curriculum learning-rate scale applies to it alone.
    def backbone_parameters(self):
        yield from self.backbone.parameters()
        yield from self.graph_head.parameters()

    def revisit_parameters(self):
        yield from self.revisit.parameters()

    def graph_token(self, source: torch.Tensor, scale: float) -> torch.Tensor:
        """Source-specific token from hop-propagated embeddings, or zeros."""
        batch = source.shape[0]
        hidden = self.cfg.hidden_dim
        if not self.cfg.use_graph or scale <= 0.0:
            return torch.zeros(batch, hidden, device=source.device)
        if self.transition_matrix is None:
            raise RuntimeError("transition matrix not attached; call attach_graph()")
        table = self.backbone.poi_embedding.weight[:self.num_pois]
        propagated = propagate(table, self.transition_matrix, self.graph_hops)
        return self.graph_head(propagated[source]) * scale

    def forward(self, batch: Batch, graph_scale: float = 1.0,
                prior_active: bool = True, corr_active: bool = True) -> ModelOutput:
        tokens = self.backbone.tokenize(batch.suffix)
        pad_mask = batch.suffix == self.backbone.pad_poi
        g = self.graph_token(batch.source, graph_scale)
        state = self.backbone.encode(batch.user, tokens, pad_mask, g)
        core = self.backbone.core_score(state)

        cands = batch.cands
        zeros = torch.zeros_like(cands.count)
        history_on = self.cfg.use_history and prior_active and cands.mask.any()
        if not history_on:
            return ModelOutput(state=state, core_logits=core, final_logits=core,
                               prior=zeros, gate=zeros, correction=zeros)

        prior = self.revisit.prior(cands)
        if corr_active:
            cand_emb = self.backbone.poi_embedding(cands.poi)
            gate, correction = self.revisit.calibrate(state, cand_emb, cands, prior)
        else:
            gate, correction = zeros, zeros
        final = _add_at_candidates(core, cands, prior + correction)
        return ModelOutput(state=state, core_logits=core, final_logits=final,
                           prior=prior, gate=gate, correction=correction)

    def warm_logits(self, output: ModelOutput, batch: Batch,
                    warm_indices: torch.Tensor, corr_active: bool) -> torch.Tensor:
        """Auxiliary logits for the warm subset with a frozen core path.

        The core scores are detached, and the calibration gate is recomputed
        from detached prediction states and candidate embeddings, so this
        path carries gradient only into the revisit/calibration parameters.
        """
        core = output.core_logits[warm_indices].detach()
        if not (self.cfg.use_history and output.prior.shape[1] > 0):
            return core
        sub = select_candidates(batch.cands, warm_indices)
        prior = output.prior[warm_indices]
        if corr_active:
            cand_emb = self.backbone.poi_embedding(sub.poi).detach()
            _, correction = self.revisit.calibrate(
                output.state[warm_indices].detach(), cand_emb, sub, prior)
        else:
            correction = torch.zeros_like(prior)
        return _add_at_candidates(core, sub, prior + correction)


def build_model(store: InstanceStore, model_cfg: ModelConfig,
                revisit_cfg: RevisitConfig) -> RecapModel:
    vocab = store.vocab
    coords = torch.from_numpy(vocab.standardized_coords().astype(np.float32))
    categories = torch.from_numpy(vocab.poi_category.astype(np.int64))
    return RecapModel(
        num_pois=vocab.num_pois,
        num_users=vocab.num_users,
        num_categories=vocab.num_categories,
        suffix_len=store.meta["suffix_len"],
        model_cfg=model_cfg,
        revisit_cfg=revisit_cfg,
        poi_coords=coords,
        poi_categories=categories,
    )


class CheckpointError(RuntimeError):
    """Unreadable or incompatible checkpoint container."""


def save_checkpoint(path, model: RecapModel, fingerprint: str, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "fingerprint": fingerprint,
        "state_dict": model.state_dict(),
    }
    payload.update(extra or {})
    torch.save(payload, path)


def load_checkpoint(path, expected_fingerprint: str | None = None) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format: {payload.get('format_version')!r}")
    if expected_fingerprint is not None and payload["fingerprint"] != expected_fingerprint:
        raise CheckpointError(
            "checkpoint fingerprint mismatch: "
            f"config {expected_fingerprint} vs checkpoint {payload['fingerprint']}")
    return payload
