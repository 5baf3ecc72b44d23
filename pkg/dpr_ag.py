# dpr_ag.py

"""DPR on attributed package graphs.

Edges carry learned attribute vectors ``e_vu = MLP([d_v || d_u])``, modulated
by a patient mask. Messages are linear images of the masked attributes. A
transfer matrix Q maps the unmasked attributes of labeled edges to the three
interaction classes, and that cross-entropy term is added to the BPR loss.
"""

import copy
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from config import AgConfig, GraphConfig, TrainConfig
from corpus import Corpus, InteractionClass
from dpr_wg import GatedReadout, wg_score
from embedding import NcfModel, PatientEncoder, patient_tensors
from errors import ConfigurationError
from graph import GraphBatch, MessagePassing, PackageGraph, collate_graphs, corpus_graphs
from layers import kaiming_init, l2_penalty, mlp
from trainer import PackageModel, TrainResult, package_batch_loss, train_package_model

logger = logging.getLogger(__name__)

N_CLASSES = 3


def edge_attribute(d_v: torch.Tensor, d_u: torch.Tensor, edge_mlp: nn.Module) -> torch.Tensor:
    return edge_mlp(torch.cat([d_v, d_u], dim=-1))


def mask_edge_attribute(u: torch.Tensor, e: torch.Tensor, mask_mlp: nn.Module) -> torch.Tensor:
    """``sigmoid(MLP(u)) * e``; one mask per patient row, shared by its edges."""
    mask = torch.sigmoid(mask_mlp(u))
    if mask.shape[-1] != e.shape[-1]:
        raise ConfigurationError(
            f"mask width {mask.shape[-1]} does not match edge attribute width {e.shape[-1]}"
        )
    return mask * e


def classify_edge(e: torch.Tensor, Q: torch.Tensor) -> torch.Tensor:
    """Class probabilities ``softmax(e^T Q)``, columns ordered as InteractionClass."""
    return torch.softmax(e @ Q, dim=-1)


class AgLayer(MessagePassing):
    """``m_vu = W_1 e_hat_vu``, ``M_u = sum m_vu``, ``h_u' = MLP(W_0 h_u + M_u)``."""

    def __init__(self, dim: int, edge_dim: int, hidden_dim: int):
        super().__init__()
        self.W_0 = nn.Linear(dim, dim)
        self.W_1 = nn.Linear(edge_dim, dim)
        self.update_mlp = mlp(dim, dim, hidden_dim)

    def message(self, h_src, h_dst, edge_attr):
        return self.W_1(edge_attr)

    def update(self, aggregated, h):
        return self.update_mlp(self.W_0(h) + aggregated)


class DprAg(PackageModel):
    """Attributed-graph package scorer.

    ``use_mask=False`` feeds raw attributes to the messages; ``ce_weight=0``
    drops the classification term.
    """

    def __init__(
        self,
        encoder: PatientEncoder,
        drug_embedding: nn.Embedding,
        cfg: TrainConfig,
        edge_dim: Optional[int] = None,
        layers: int = 1,
        use_mask: bool = True,
        ce_weight: float = 1.0,
    ):
        super().__init__()
        dim = drug_embedding.embedding_dim
        edge_dim = edge_dim or dim
        self.encoder = encoder
        self.drug_embedding = drug_embedding
        self.use_mask = use_mask
        self.ce_weight = ce_weight
        self.edge_mlp = mlp(2 * dim, edge_dim, cfg.hidden_dim)
        fresh: List[nn.Module] = [self.edge_mlp]
        if use_mask:
            self.mask_mlp = mlp(encoder.out_dim, edge_dim, cfg.hidden_dim)
            fresh.append(self.mask_mlp)
        self.layers = nn.ModuleList(AgLayer(dim, edge_dim, cfg.hidden_dim) for _ in range(layers))
        self.readout = GatedReadout(dim, cfg.hidden_dim)
        self.head = mlp(encoder.out_dim + dim, 1, cfg.hidden_dim)
        self.Q = nn.Parameter(torch.empty(edge_dim, N_CLASSES))
        for module in [*fresh, self.layers, self.readout, self.head]:
            kaiming_init(module)
        nn.init.xavier_uniform_(self.Q)

    @classmethod
    def from_pretrained(cls, pretrained: NcfModel, cfg: TrainConfig, **options) -> "DprAg":
        drug_embedding = copy.deepcopy(pretrained.drug_embedding)
        drug_embedding.weight.requires_grad_(not cfg.freeze_embeddings)
        return cls(copy.deepcopy(pretrained.encoder), drug_embedding, cfg, **options)

    @property
    def edge_dim(self) -> int:
        return self.Q.shape[0]

    def edge_attributes(
        self, u: torch.Tensor, batch: GraphBatch, d: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Raw and masked attributes ``(e, e_hat)`` per edge."""
        if d is None:
            d = self.drug_embedding(batch.node_drug)
        e = edge_attribute(d[batch.edge_src], d[batch.edge_dst], self.edge_mlp)
        if not self.use_mask:
            return e, e
        return e, mask_edge_attribute(u[batch.edge_graph], e, self.mask_mlp)

    def package_embedding(self, u: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
        d = self.drug_embedding(batch.node_drug)
        _, e_hat = self.edge_attributes(u, batch, d)
        h = d
        for layer in self.layers:
            h = layer(h, batch.edge_src, batch.edge_dst, e_hat)
        return self.readout(d, h, batch.node_graph, batch.num_graphs)

    def score(self, u: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
        return wg_score(u, self.package_embedding(u, batch), self.head)

    def classification_loss(self, batch: GraphBatch, positive: torch.Tensor) -> torch.Tensor:
        """Summed ``-ln softmax(e^T Q)`` at the true class over labeled edges
        of the flagged graphs."""
        labeled = (batch.edge_relation != InteractionClass.UNKNOWN) & positive[batch.edge_graph]
        if not bool(labeled.any()):
            return self.Q.new_zeros(())
        d = self.drug_embedding(batch.node_drug)
        src, dst = batch.edge_src[labeled], batch.edge_dst[labeled]
        e = edge_attribute(d[src], d[dst], self.edge_mlp)
        return F.cross_entropy(e @ self.Q, batch.edge_relation[labeled], reduction="sum")

    def auxiliary_loss(self, batch, positive):
        if self.ce_weight == 0.0:
            return self.Q.new_zeros(()), {}
        ce = self.classification_loss(batch, positive) / max(int(positive.sum()), 1)
        return self.ce_weight * ce, {"ce": float(ce)}


def ag_loss(
    model: DprAg,
    corpus: Corpus,
    graphs: Sequence[Optional[PackageGraph]],
    patients,
    negatives,
    l2: float,
) -> torch.Tensor:
    """Hybrid objective for one batch: BPR + weighted classification + L2."""
    bpr, auxiliary, _ = package_batch_loss(model, corpus, graphs, patients, negatives)
    return bpr + auxiliary + l2 * l2_penalty(model)


def train_ag(
    corpus: Corpus,
    pretrained: NcfModel,
    cfg: TrainConfig,
    graph_cfg: Optional[GraphConfig] = None,
    ag_cfg: Optional[AgConfig] = None,
    graphs: Optional[Sequence[Optional[PackageGraph]]] = None,
    use_mask: bool = True,
) -> TrainResult:
    """Fine-tune a DPR-AG model (or one of its variants) from pre-training."""
    graph_cfg = graph_cfg or GraphConfig()
    ag_cfg = ag_cfg or AgConfig()
    if graphs is None:
        _, graphs = corpus_graphs(corpus, graph_cfg.threshold)
    torch.manual_seed(cfg.seed)
    model = DprAg.from_pretrained(
        pretrained, cfg,
        edge_dim=ag_cfg.edge_dim, layers=graph_cfg.layers,
        use_mask=use_mask, ce_weight=ag_cfg.ce_weight,
    )
    name = "dpr-ag" if use_mask and ag_cfg.ce_weight > 0 else f"dpr-ag(mask={use_mask}, ce={ag_cfg.ce_weight})"
    return train_package_model(model, corpus, graphs, cfg, name=name)


@torch.no_grad()
def export_edge_classes(
    model: DprAg,
    corpus: Corpus,
    graphs: Sequence[Optional[PackageGraph]],
    patients: Sequence[int],
) -> pd.DataFrame:
    """Both probability triples per labeled edge of each patient's own graph.

    ``p_raw_*`` come from the unmasked attribute, ``p_masked_*`` from the
    attribute under that patient's mask.
    """
    model.eval()
    names = [cls.name for cls in sorted(InteractionClass) if cls != InteractionClass.UNKNOWN]
    rows: List[Dict[str, object]] = []
    for i in patients:
        graph = graphs[i]
        if graph is None:
            continue
        labeled = graph.relation != InteractionClass.UNKNOWN
        if not labeled.any():
            continue
        u = model.encoder(*patient_tensors(corpus, [i]))
        e, e_hat = model.edge_attributes(u, collate_graphs([graph]))
        raw = classify_edge(e, model.Q)
        masked = classify_edge(e_hat, model.Q)
        for idx in labeled.nonzero()[0]:
            v, w = graph.drugs[graph.src[idx]], graph.drugs[graph.dst[idx]]
            row: Dict[str, object] = {
                "patient": corpus.record_ids[i],
                "drug_v": corpus.drug_names[v],
                "drug_u": corpus.drug_names[w],
                "true_class": InteractionClass(int(graph.relation[idx])).name,
            }
            row.update({f"p_raw_{n}": float(raw[idx, k]) for k, n in enumerate(names)})
            row.update({f"p_masked_{n}": float(masked[idx, k]) for k, n in enumerate(names)})
            row["predicted"] = names[int(raw[idx].argmax())]
            rows.append(row)
    columns = ["patient", "drug_v", "drug_u", "true_class"]
    columns += [f"p_raw_{n}" for n in names] + [f"p_masked_{n}" for n in names] + ["predicted"]
    return pd.DataFrame(rows, columns=columns)


def _pair_accuracy(model: DprAg, pairs: Dict[Tuple[int, int], int]) -> Tuple[float, int]:
    if not pairs:
        return 0.0, 0
    model.eval()
    keys = sorted(pairs)
    d = model.drug_embedding.weight
    v_idx = torch.tensor([k[0] for k in keys])
    u_idx = torch.tensor([k[1] for k in keys])
    predicted = classify_edge(edge_attribute(d[v_idx], d[u_idx], model.edge_mlp), model.Q).argmax(dim=-1)
    truth = torch.tensor([pairs[k] for k in keys])
    return float((predicted == truth).float().mean()), len(keys)


@torch.no_grad()
def edge_classification_accuracy(
    model: DprAg,
    graphs: Sequence[Optional[PackageGraph]],
    patients: Sequence[int],
) -> Tuple[float, int]:
    """Accuracy of ``argmax softmax(e^T Q)`` over distinct labeled directed pairs
    appearing in the given patients' graphs; returns (accuracy, pair count)."""
    pairs: Dict[Tuple[int, int], int] = {}
    for i in patients:
        graph = graphs[i]
        if graph is None:
            continue
        for e, (v, w) in enumerate(graph.edges()):
            if graph.relation[e] != InteractionClass.UNKNOWN:
                pairs[(v, w)] = int(graph.relation[e])
    return _pair_accuracy(model, pairs)


@torch.no_grad()
def heldout_edge_accuracy(
    model: DprAg,
    graphs: Sequence[Optional[PackageGraph]],
    patients: Sequence[int],
    hidden: Dict[Tuple[int, int], int],
) -> Tuple[float, int]:
    """Accuracy on edges whose label was hidden during training.

    ``graphs`` are built from the relation without the hidden labels, so these
    edges exist through co-occurrence alone. Counts distinct directed pairs.
    """
    pairs: Dict[Tuple[int, int], int] = {}
    for i in patients:
        graph = graphs[i]
        if graph is None:
            continue
        for v, w in graph.edges():
            if (v, w) in hidden:
                pairs[(v, w)] = hidden[(v, w)]
    return _pair_accuracy(model, pairs)
