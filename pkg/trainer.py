# trainer.py

"""BPR training loop shared by the package-graph models.

Patient i's own package graph is the positive; packages of other training
patients j != i are the negatives, scored under patient i's embedding. The
loop keeps the parameters of the epoch with the lowest validation BPR loss.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from config import TrainConfig
from corpus import Corpus
from embedding import PatientEncoder, bpr_term, patient_tensors
from errors import SamplingError
from graph import GraphBatch, PackageGraph, collate_graphs
from layers import l2_penalty

logger = logging.getLogger(__name__)

# training patients used for the fixed-negative progress monitor
MONITOR_SIZE = 256


class PackageModel(nn.Module):
    """Scores (patient, package graph) pairs.

    Subclasses own a fine-tuned ``encoder`` and implement ``score``; models
    with an extra supervised term override ``auxiliary_loss``.
    """

    encoder: PatientEncoder

    def score(self, u: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
        """One score per graph; row g of ``u`` conditions graph g."""
        raise NotImplementedError

    def auxiliary_loss(self, batch: GraphBatch, positive: torch.Tensor) -> Tuple[torch.Tensor, Dict[str, float]]:
        """Extra loss per patient, computed on the graphs flagged ``positive``."""
        return torch.zeros((), dtype=next(self.parameters()).dtype), {}


class PatientSampler:
    """Uniform negative patients from a pool, never the patient itself."""

    def __init__(self, pool: Sequence[int], seed: int):
        self.pool = np.asarray(pool, dtype=np.int64)
        if len(self.pool) < 2:
            raise SamplingError("need at least two training patients to draw negatives")
        self.rng = np.random.default_rng(seed)

    def sample(self, patients: np.ndarray, k: int) -> np.ndarray:
        patients = np.asarray(patients, dtype=np.int64)
        draws = self.pool[self.rng.integers(0, len(self.pool), size=(len(patients), k))]
        bad = draws == patients[:, None]
        while bad.any():
            draws[bad] = self.pool[self.rng.integers(0, len(self.pool), size=int(bad.sum()))]
            bad = draws == patients[:, None]
        return draws


def package_batch_loss(
    model: PackageModel,
    corpus: Corpus,
    graphs: Sequence[Optional[PackageGraph]],
    patients: np.ndarray,
    negatives: np.ndarray,
) -> Tuple[torch.Tensor, torch.Tensor, Dict[str, float]]:
    """Mean BPR term and the model's auxiliary term for one batch.

    Returns ``(bpr, auxiliary, logs)``; the L2 term is added by the caller.
    """
    k = negatives.shape[1]
    selected: List[PackageGraph] = []
    for i, row in zip(patients, negatives):
        selected.append(graphs[i])
        selected.extend(graphs[j] for j in row)
    batch = collate_graphs(selected)
    u = model.encoder(*patient_tensors(corpus, patients))
    u_rows = u.repeat_interleave(k + 1, dim=0)
    scores = model.score(u_rows, batch).view(len(patients), k + 1)
    bpr = bpr_term(scores[:, :1], scores[:, 1:]).mean()
    positive = torch.arange(len(selected)) % (k + 1) == 0
    auxiliary, logs = model.auxiliary_loss(batch, positive)
    return bpr, auxiliary, logs


@torch.no_grad()
def evaluate_loss(
    model: PackageModel,
    corpus: Corpus,
    graphs: Sequence[Optional[PackageGraph]],
    patients: np.ndarray,
    negatives: np.ndarray,
    batch_size: int,
) -> Dict[str, float]:
    model.eval()
    totals: Dict[str, float] = {}
    for start in range(0, len(patients), batch_size):
        sl = slice(start, start + batch_size)
        n = len(patients[sl])
        bpr, auxiliary, logs = package_batch_loss(model, corpus, graphs, patients[sl], negatives[sl])
        for key, value in {"bpr": float(bpr), "aux": float(auxiliary), **logs}.items():
            totals[key] = totals.get(key, 0.0) + value * n
    return {key: value / max(len(patients), 1) for key, value in totals.items()}


@dataclass
class TrainResult:
    model: PackageModel
    best_epoch: int
    history: List[Dict[str, float]] = field(default_factory=list)


def usable_patients(indices: Sequence[int], graphs: Sequence[Optional[PackageGraph]]) -> np.ndarray:
    return np.asarray([i for i in indices if graphs[i] is not None], dtype=np.int64)


def train_package_model(
    model: PackageModel,
    corpus: Corpus,
    graphs: Sequence[Optional[PackageGraph]],
    cfg: TrainConfig,
    name: str = "package model",
) -> TrainResult:
    """Adam on ``BPR + auxiliary + l2 * ||theta||^2`` with early stopping.

    History row 0 holds the losses before the first update. ``monitor_bpr`` is
    the BPR loss on a fixed slice of training patients with fixed negatives.
    """
    train = usable_patients(corpus.split.train, graphs)
    valid = usable_patients(corpus.split.valid, graphs)
    if len(valid) == 0:
        valid = train
    sampler = PatientSampler(train, cfg.seed)
    valid_neg = PatientSampler(train, cfg.seed + 1).sample(valid, cfg.negative_ratio)
    monitor = train[:MONITOR_SIZE]
    monitor_neg = PatientSampler(train, cfg.seed + 2).sample(monitor, cfg.negative_ratio)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=cfg.lr)

    def snapshot(epoch: int, train_logs: Dict[str, float]) -> Dict[str, float]:
        valid_logs = evaluate_loss(model, corpus, graphs, valid, valid_neg, cfg.graph_batch_size)
        monitor_logs = evaluate_loss(model, corpus, graphs, monitor, monitor_neg, cfg.graph_batch_size)
        row = {"epoch": epoch, **{f"train_{k}": v for k, v in train_logs.items()}}
        row.update({f"valid_{k}": v for k, v in valid_logs.items()})
        row["monitor_bpr"] = monitor_logs["bpr"]
        return row

    history = [snapshot(0, {})]
    best_loss, best_epoch, stale = history[0]["valid_bpr"], 0, 0
    best_state = copy.deepcopy(model.state_dict())
    logger.info("%s epoch 0: valid bpr %.4f", name, best_loss)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(train)
        totals: Dict[str, float] = {}
        for start in range(0, len(order), cfg.graph_batch_size):
            patients = order[start:start + cfg.graph_batch_size]
            negatives = sampler.sample(patients, cfg.negative_ratio)
            bpr, auxiliary, logs = package_batch_loss(model, corpus, graphs, patients, negatives)
            objective = bpr + auxiliary + cfg.l2 * l2_penalty(model)
            optimizer.zero_grad()
            objective.backward()
            optimizer.step()
            for key, value in {"bpr": float(bpr), "aux": float(auxiliary), **logs}.items():
                totals[key] = totals.get(key, 0.0) + value * len(patients)
        row = snapshot(epoch, {k: v / len(order) for k, v in totals.items()})
        history.append(row)
        extra = "".join(f", {k} {v:.4f}" for k, v in row.items() if k.startswith("train_") and k not in ("train_bpr", "train_aux"))
        logger.info(
            "%s epoch %d: train bpr %.4f%s, valid bpr %.4f",
            name, epoch, row["train_bpr"], extra, row["valid_bpr"],
        )
        if row["valid_bpr"] < best_loss:
            best_loss, best_epoch, stale = row["valid_bpr"], epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("Early stopping %s after epoch %d (best %d)", name, epoch, best_epoch)
                break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model=model, best_epoch=best_epoch, history=history)
