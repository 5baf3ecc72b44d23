# embedding.py

"""Patient encoder, drug embeddings and NCF/BPR pre-training.

A patient embedding is the concatenation of an MLP over the disease document
and the last hidden state of a peephole LSTM over the admission-note tokens.
Drugs get a free embedding row each. A matching MLP scores (patient, drug)
pairs and everything is trained with a BPR loss against sampled negatives.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from config import TrainConfig
from corpus import PAD_ID, Corpus, PatientDescription
from errors import ConfigurationError, SamplingError
from layers import kaiming_init, l2_penalty, mlp

logger = logging.getLogger(__name__)

# training pairs used for the fixed-negative progress monitor
MONITOR_PAIRS = 2048


class PeepholeLSTM(nn.Module):
    """LSTM whose gates also read the cell state.

    Steps where ``mask`` is False (padding) leave the state unchanged, so the
    final state is the state after the last real token.
    """

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        # gate order: input, forget, cell, output
        self.W_x = nn.Linear(input_dim, 4 * hidden_dim)
        self.W_h = nn.Linear(hidden_dim, 4 * hidden_dim, bias=False)
        self.W_ci = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.W_cf = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.W_co = nn.Linear(hidden_dim, hidden_dim, bias=False)

    def step(self, x: torch.Tensor, h: torch.Tensor, c: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        gx_i, gx_f, gx_c, gx_o = self.W_x(x).chunk(4, dim=-1)
        gh_i, gh_f, gh_c, gh_o = self.W_h(h).chunk(4, dim=-1)
        i = torch.sigmoid(gx_i + gh_i + self.W_ci(c))
        f = torch.sigmoid(gx_f + gh_f + self.W_cf(c))
        c_new = f * c + i * torch.tanh(gx_c + gh_c)
        o = torch.sigmoid(gx_o + gh_o + self.W_co(c_new))
        return o * torch.tanh(c_new), c_new

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        batch, steps, _ = x.shape
        h = x.new_zeros(batch, self.hidden_dim)
        c = x.new_zeros(batch, self.hidden_dim)
        for t in range(steps):
            h_new, c_new = self.step(x[:, t], h, c)
            keep = mask[:, t].unsqueeze(-1)
            h = torch.where(keep, h_new, h)
            c = torch.where(keep, c_new, c)
        return h


class PatientEncoder(nn.Module):
    def __init__(self, p: int, vocab_size: int, cfg: TrainConfig):
        super().__init__()
        self.p = p
        self.vocab_size = vocab_size
        self.disease_mlp = mlp(p, cfg.disease_dim, cfg.hidden_dim)
        self.token_embedding = nn.Embedding(vocab_size, cfg.token_dim, padding_idx=PAD_ID)
        self.lstm = PeepholeLSTM(cfg.token_dim, cfg.lstm_hidden)
        self.out_dim = cfg.disease_dim + cfg.lstm_hidden

    def forward(self, disease: torch.Tensor, notes: torch.Tensor) -> torch.Tensor:
        m_w = self.disease_mlp(disease.to(self.token_embedding.weight.dtype))
        h_q = self.lstm(self.token_embedding(notes), notes != PAD_ID)
        return torch.cat([m_w, h_q], dim=-1)


class NcfModel(nn.Module):
    """Patient encoder, drug embedding table and matching head."""

    def __init__(self, p: int, vocab_size: int, n_drugs: int, cfg: TrainConfig):
        super().__init__()
        self.encoder = PatientEncoder(p, vocab_size, cfg)
        self.drug_embedding = nn.Embedding(n_drugs, cfg.drug_dim)
        self.head = mlp(self.encoder.out_dim + cfg.drug_dim, 1, cfg.hidden_dim)
        kaiming_init(self)

    @property
    def n_drugs(self) -> int:
        return self.drug_embedding.num_embeddings

    def score(self, u: torch.Tensor, drugs: torch.Tensor) -> torch.Tensor:
        """Score drugs for patients; ``u`` broadcasts over the trailing drug axis."""
        d = self.drug_embedding(drugs)
        u = u.unsqueeze(-2).expand(*d.shape[:-1], u.shape[-1]) if drugs.dim() == u.dim() else u
        return self.head(torch.cat([u, d], dim=-1)).squeeze(-1)

    def score_all(self, u: torch.Tensor) -> torch.Tensor:
        """(B, M) scores of every drug for each patient row."""
        drugs = torch.arange(self.n_drugs).expand(u.shape[0], -1)
        return self.score(u, drugs)


def patient_tensors(corpus: Corpus, indices: Sequence[int]) -> Tuple[torch.Tensor, torch.Tensor]:
    idx = np.asarray(indices, dtype=np.int64)
    disease = torch.from_numpy(corpus.disease_matrix()[idx])
    notes = torch.from_numpy(corpus.note_matrix()[idx])
    return disease, notes


def description_tensors(desc: PatientDescription, encoder: PatientEncoder) -> Tuple[torch.Tensor, torch.Tensor]:
    if len(desc.disease.bits) != encoder.p:
        raise ConfigurationError(
            f"disease document has {len(desc.disease.bits)} bits, encoder expects {encoder.p}"
        )
    if any(t < 0 or t >= encoder.vocab_size for t in desc.note.tokens):
        raise ConfigurationError("note token id outside the encoder vocabulary")
    dtype = next(encoder.parameters()).dtype
    disease = torch.tensor([desc.disease.bits], dtype=dtype)
    notes = torch.tensor([desc.note.tokens], dtype=torch.long)
    return disease, notes


def encode_patient(desc: PatientDescription, encoder: PatientEncoder) -> torch.Tensor:
    """Embedding ``u = [MLP(W) || h_q]`` of one patient description."""
    with torch.no_grad():
        return encoder(*description_tensors(desc, encoder))[0]


@torch.no_grad()
def encode_patients(encoder: PatientEncoder, corpus: Corpus, indices: Sequence[int], batch: int = 512) -> torch.Tensor:
    parts = []
    for start in range(0, len(indices), batch):
        parts.append(encoder(*patient_tensors(corpus, indices[start:start + batch])))
    if not parts:
        return torch.zeros(0, encoder.out_dim)
    return torch.cat(parts)


def score_patient_drug(u: torch.Tensor, d: torch.Tensor, head: nn.Module) -> torch.Tensor:
    """Matching score ``MLP([u || d])`` for one patient and one drug row."""
    if u.dim() != 1 or d.dim() != 1:
        raise ConfigurationError("score_patient_drug expects 1-D embeddings")
    return head(torch.cat([u, d]).unsqueeze(0)).reshape(())


def bpr_term(pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    """Pairwise ranking term ``-ln sigmoid(pos - neg)``."""
    return -F.logsigmoid(pos - neg)


class NegativeSampler:
    """Uniform negatives drawn from outside each patient's package.

    Rejection sampling: draws that land inside the package are redrawn.
    """

    def __init__(self, packages: Sequence[frozenset], n_items: int, seed: int):
        self.n_items = n_items
        self.rng = np.random.default_rng(seed)
        self.in_package = np.zeros((len(packages), n_items), dtype=bool)
        for row, package in enumerate(packages):
            self.in_package[row, list(package)] = True

    def sample(self, rows: np.ndarray, k: int) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        if self.in_package[rows].all(axis=1).any():
            raise SamplingError("a package covers every drug; no negatives exist")
        draws = self.rng.integers(0, self.n_items, size=(len(rows), k))
        bad = self.in_package[rows[:, None], draws]
        while bad.any():
            draws[bad] = self.rng.integers(0, self.n_items, size=int(bad.sum()))
            bad = self.in_package[rows[:, None], draws]
        return draws


@dataclass
class PretrainResult:
    model: NcfModel
    best_epoch: int
    history: List[Dict[str, float]] = field(default_factory=list)
    skipped: List[int] = field(default_factory=list)


def _pairs(corpus: Corpus, indices: Sequence[int]) -> Tuple[np.ndarray, np.ndarray, List[int]]:
    patients, drugs, skipped = [], [], []
    for i in indices:
        package = corpus.packages[i]
        if len(package) >= corpus.M:
            logger.warning("Skipping patient %d: package covers all %d drugs", i, corpus.M)
            skipped.append(i)
            continue
        for d in sorted(package):
            patients.append(i)
            drugs.append(d)
    return np.asarray(patients, dtype=np.int64), np.asarray(drugs, dtype=np.int64), skipped


def pair_loss(
    model: NcfModel,
    corpus: Corpus,
    patients: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
) -> torch.Tensor:
    """Mean BPR term over (patient, positive, negatives) rows."""
    unique, inverse = np.unique(patients, return_inverse=True)
    u = model.encoder(*patient_tensors(corpus, unique))[torch.from_numpy(inverse)]
    pos = model.score(u, torch.from_numpy(positives).unsqueeze(-1))
    neg = model.score(u, torch.from_numpy(negatives))
    return bpr_term(pos, neg).mean()


@torch.no_grad()
def _batched_pair_loss(model, corpus, patients, positives, negatives, batch: int) -> float:
    total, count = 0.0, 0
    for start in range(0, len(patients), batch):
        sl = slice(start, start + batch)
        n = len(patients[sl])
        total += float(pair_loss(model, corpus, patients[sl], positives[sl], negatives[sl])) * n
        count += n
    return total / max(count, 1)


def pretrain(corpus: Corpus, cfg: TrainConfig) -> PretrainResult:
    """Train encoder, drug table and matching head with BPR and Adam.

    Returns the parameters of the epoch with the lowest validation BPR loss;
    stops after ``cfg.patience`` epochs without improvement.
    """
    torch.manual_seed(cfg.seed)
    model = NcfModel(corpus.p, len(corpus.token_vocab), corpus.M, cfg)
    sampler = NegativeSampler(corpus.packages, corpus.M, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    train_p, train_d, skipped = _pairs(corpus, corpus.split.train)
    if len(train_p) == 0:
        raise SamplingError("no usable training pairs")
    valid_p, valid_d, _ = _pairs(corpus, corpus.split.valid or corpus.split.train)
    valid_neg = NegativeSampler(corpus.packages, corpus.M, cfg.seed + 1).sample(valid_p, cfg.negative_ratio)
    monitor_p, monitor_d = train_p[:MONITOR_PAIRS], train_d[:MONITOR_PAIRS]
    monitor_neg = NegativeSampler(corpus.packages, corpus.M, cfg.seed + 2).sample(monitor_p, cfg.negative_ratio)

    def monitor() -> float:
        return _batched_pair_loss(model, corpus, monitor_p, monitor_d, monitor_neg, cfg.batch_size)

    model.eval()
    best_loss = _batched_pair_loss(model, corpus, valid_p, valid_d, valid_neg, cfg.batch_size)
    best_epoch, best_state, stale = 0, copy.deepcopy(model.state_dict()), 0
    history: List[Dict[str, float]] = [{"epoch": 0, "valid_bpr": best_loss, "monitor_bpr": monitor()}]
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(train_p))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            negatives = sampler.sample(train_p[batch], cfg.negative_ratio)
            loss = pair_loss(model, corpus, train_p[batch], train_d[batch], negatives)
            objective = loss + cfg.l2 * l2_penalty(model)
            optimizer.zero_grad()
            objective.backward()
            optimizer.step()
            total += float(loss) * len(batch)
            count += len(batch)
        model.eval()
        valid_loss = _batched_pair_loss(model, corpus, valid_p, valid_d, valid_neg, cfg.batch_size)
        history.append({"epoch": epoch, "train_bpr": total / count, "valid_bpr": valid_loss, "monitor_bpr": monitor()})
        logger.info("pretrain epoch %d: train bpr %.4f, valid bpr %.4f", epoch, total / count, valid_loss)
        if valid_loss < best_loss:
            best_loss, best_epoch, stale = valid_loss, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("Early stopping after epoch %d (best %d)", epoch, best_epoch)
                break
    model.load_state_dict(best_state)
    model.eval()
    return PretrainResult(model=model, best_epoch=best_epoch, history=history, skipped=skipped)
