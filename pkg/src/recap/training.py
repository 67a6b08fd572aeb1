"""Losses, staged curriculum, and the optimization loop.

Components activate in stages: the graph token ramps in first, then the
revisit prior, then contextual calibration together with the warm-holdout
loss (whose weight ramps to its maximum). After calibration starts the
backbone learning rate is scaled down while revisit/calibration parameters
keep the base rate. The best checkpoint is selected by validation MRR.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig, TrainingConfig
from .dataset import Instances, InstanceStore
from .evaluation import rank_targets
from .model import RecapModel, collate_batch
from .revisit import CandidateBlocks, build_candidate_blocks
from .transition_graph import TransitionStore, count_transitions, normalize

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last epoch that completed."""

    def __init__(self, message: str, last_good_epoch: int):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch


def main_loss(final_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-softmax of the target over the batch."""
    return F.cross_entropy(final_logits, targets)


def warm_loss(warm_logits: torch.Tensor, warm_targets: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over the warm subset; the logits must already carry a
    detached core so only revisit/calibration parameters see this loss."""
    return F.cross_entropy(warm_logits, warm_targets)


def warm_holdout_weight(epoch: int, cfg: TrainingConfig) -> float:
    """Piecewise-linear weight: 0 before the warm stage, then a linear ramp
    to ``warm_weight_max`` over ``warm_ramp_epochs``."""
    start = cfg.resolved_warm_start()
    if epoch < start:
        return 0.0
    if cfg.warm_ramp_epochs <= 0:
        return cfg.warm_weight_max
    frac = min((epoch - start) / cfg.warm_ramp_epochs, 1.0)
    return cfg.warm_weight_max * frac


def total_loss(main: torch.Tensor, warm: torch.Tensor | None, epoch: int,
               cfg: TrainingConfig) -> torch.Tensor:
    weight = warm_holdout_weight(epoch, cfg)
    if warm is None or weight == 0.0:
        return main
    return main + weight * warm


@dataclass
class CurriculumState:
    epoch: int
    graph_scale: float
    prior_active: bool
    corr_active: bool
    warm_active: bool
    warm_weight: float
    backbone_lr_scale: float


def curriculum_state(epoch: int, cfg: TrainingConfig) -> CurriculumState:
    if cfg.graph_ramp_epochs > 0:
        graph_scale = min(max((epoch - cfg.graph_start_epoch) / cfg.graph_ramp_epochs, 0.0), 1.0)
    else:
        graph_scale = 1.0 if epoch >= cfg.graph_start_epoch else 0.0
    warm_start = cfg.resolved_warm_start()
    return CurriculumState(
        epoch=epoch,
        graph_scale=graph_scale,
        prior_active=epoch >= cfg.prior_start_epoch,
        corr_active=epoch >= cfg.corr_start_epoch,
        warm_active=epoch >= warm_start,
        warm_weight=warm_holdout_weight(epoch, cfg),
        backbone_lr_scale=cfg.backbone_lr_scale if epoch >= cfg.corr_start_epoch else 1.0,
    )


def warm_instance_flags(instances: Instances, store: TransitionStore) -> np.ndarray:
    """True where the instance's (source, target) is a warm training edge."""
    warm = store.warm_edges()
    return np.asarray(
        [(int(s), int(d)) in warm
         for s, d in zip(instances.source, instances.target)],
        dtype=bool,
    )


@torch.no_grad()
def predict_ranks(model: RecapModel, instances: Instances, blocks: CandidateBlocks,
                  pad_poi: int, stage: CurriculumState, batch_size: int = 1024,
                  ) -> np.ndarray:
    """Rank of every instance's target under the current component gates."""
    model.eval()
    ranks = np.empty(len(instances), dtype=np.int64)
    for lo in range(0, len(instances), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(instances)))
        batch = collate_batch(instances, blocks, idx, pad_poi)
        out = model(batch, graph_scale=stage.graph_scale,
                    prior_active=stage.prior_active, corr_active=stage.corr_active)
        ranks[idx] = rank_targets(out.final_logits, batch.target)
    return ranks


FULLY_ACTIVE = CurriculumState(epoch=-1, graph_scale=1.0, prior_active=True,
                               corr_active=True, warm_active=True,
                               warm_weight=0.5, backbone_lr_scale=1.0)


@dataclass
class FitResult:
    best_state: dict
    best_epoch: int
    best_val_mrr: float
    best_stage: CurriculumState
    history: list[dict]
    transition_store: TransitionStore


def fit(store: InstanceStore, model: RecapModel, cfg: RunConfig,
        log_path: str | Path | None = None,
        transition_store: TransitionStore | None = None) -> FitResult:
    """Train with the staged curriculum and keep the best-validation model."""
    tcfg = cfg.training
    vocab = store.vocab
    if transition_store is None:
        transition_store = count_transitions(
            store.sequences, vocab.num_pois,
            across_trajectories=cfg.graph.count_across_trajectories)
    model.attach_graph(normalize(transition_store))

    train = store.train
    if len(train) == 0:
        raise TrainingDiverged("no training instances", last_good_epoch=0)
    train_blocks = build_candidate_blocks(
        store.sequences, train, cfg.revisit.window_len, cfg.revisit.candidate_cap)
    val_blocks = build_candidate_blocks(
        store.sequences, store.val, cfg.revisit.window_len, cfg.revisit.candidate_cap)
    warm_flags = warm_instance_flags(train, transition_store)

    optimizer = torch.optim.Adam(
        [
            {"params": list(model.backbone_parameters()), "lr": tcfg.learning_rate},
            {"params": list(model.revisit_parameters()), "lr": tcfg.learning_rate},
        ],
        lr=tcfg.learning_rate,
        weight_decay=tcfg.weight_decay,
    )
    shuffler = torch.Generator().manual_seed(cfg.seed)

    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    history: list[dict] = []
    best_state: dict = {}
    best_epoch = 0
    best_val_mrr = float("-inf")
    best_stage = curriculum_state(1, tcfg)

    try:
        for epoch in range(1, tcfg.epochs + 1):
            stage = curriculum_state(epoch, tcfg)
            optimizer.param_groups[0]["lr"] = tcfg.learning_rate * stage.backbone_lr_scale

            model.train()
            perm = torch.randperm(len(train), generator=shuffler).numpy()
            main_sum, warm_sum, warm_batches = 0.0, 0.0, 0
            for lo in range(0, len(perm), tcfg.batch_size):
                idx = perm[lo:lo + tcfg.batch_size]
                batch = collate_batch(train, train_blocks, idx, vocab.pad_poi)
                out = model(batch, graph_scale=stage.graph_scale,
                            prior_active=stage.prior_active,
                            corr_active=stage.corr_active)
                loss_main = main_loss(out.final_logits, batch.target)

                loss_warm = None
                if stage.warm_active and stage.warm_weight > 0.0:
                    warm_idx = torch.from_numpy(np.flatnonzero(warm_flags[idx]))
                    if warm_idx.numel():
                        logits = model.warm_logits(out, batch, warm_idx, stage.corr_active)
                        loss_warm = warm_loss(logits, batch.target[warm_idx])

                loss = total_loss(loss_main, loss_warm, epoch, tcfg)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}", last_good_epoch=epoch - 1)
                optimizer.zero_grad()
                loss.backward()
                if tcfg.grad_clip_norm > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip_norm)
                optimizer.step()

                main_sum += float(loss_main.detach())
                if loss_warm is not None:
                    warm_sum += float(loss_warm.detach())
                    warm_batches += 1

            num_batches = max(1, int(np.ceil(len(perm) / tcfg.batch_size)))
            val_ranks = predict_ranks(model, store.val, val_blocks, vocab.pad_poi, stage)
            val_mrr = float((1.0 / val_ranks).mean()) if len(val_ranks) else 0.0
            val_hr1 = float((val_ranks <= 1).mean()) if len(val_ranks) else 0.0

            record = {
                "epoch": epoch,
                "loss_main": main_sum / num_batches,
                "loss_warm": warm_sum / warm_batches if warm_batches else None,
                "warm_weight": stage.warm_weight,
                "graph_scale": stage.graph_scale,
                "prior_active": stage.prior_active,
                "corr_active": stage.corr_active,
                "val_hr1": val_hr1,
                "val_mrr": val_mrr,
            }
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            logger.info("epoch %d: loss %.4f val_mrr %.4f", epoch,
                        record["loss_main"], val_mrr)

            if val_mrr > best_val_mrr:
                best_val_mrr = val_mrr
                best_epoch = epoch
                best_stage = stage
                best_state = {k: v.detach().cpu().clone()
                              for k, v in model.state_dict().items()}
    finally:
        if log_fh:
            log_fh.close()

    return FitResult(best_state=best_state, best_epoch=best_epoch,
                     best_val_mrr=best_val_mrr, best_stage=best_stage,
                     history=history, transition_store=transition_store)
