# dpr_wg.py

"""DPR on weighted package graphs.

Every edge carries a signed scalar: +1 for synergism, -1 for antagonism and
the co-occurrence proportion otherwise. A patient-conditioned mask selects
drug-embedding features, and the masked embeddings of an edge's endpoints
produce a contextual factor in (-1, 1) that rescales the edge weight. Nodes
aggregate GRU outputs of the weighted messages, a gated readout sums the
nodes into a package embedding, and an MLP scores it against the patient.
"""

import copy
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from config import GraphConfig, TrainConfig
from corpus import Corpus, InteractionClass, RelationMatrix
from embedding import NcfModel, PatientEncoder, patient_tensors
from graph import (
    CooccurrenceStats,
    GraphBatch,
    MessagePassing,
    PackageGraph,
    collate_graphs,
    corpus_graphs,
    scatter_sum,
)
from layers import kaiming_init, mlp
from trainer import PackageModel, TrainResult, train_package_model

logger = logging.getLogger(__name__)


def init_edge_weights(graph: PackageGraph, R: RelationMatrix, stats: CooccurrenceStats) -> np.ndarray:
    """Initial scalar e_vu for every edge of ``graph``, in edge order."""
    weights = np.empty(graph.num_edges, dtype=np.float64)
    for e, (v, u) in enumerate(graph.edges()):
        cls = R.get(v, u)
        if cls == InteractionClass.SYNERGISM:
            weights[e] = 1.0
        elif cls == InteractionClass.ANTAGONISM:
            weights[e] = -1.0
        else:
            weights[e] = stats.p(v, u)
    return weights


def edge_weight_tensor(relation: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Batched form of ``init_edge_weights`` from stored relation and p values."""
    weights = p.clone()
    weights[relation == InteractionClass.SYNERGISM] = 1.0
    weights[relation == InteractionClass.ANTAGONISM] = -1.0
    return weights


def mask_vector(u: torch.Tensor, mask_mlp: nn.Module) -> torch.Tensor:
    return torch.sigmoid(mask_mlp(u))


def conditional_drug_embedding(u: torch.Tensor, d: torch.Tensor, mask_mlp: nn.Module) -> torch.Tensor:
    """``sigmoid(MLP(u)) * d``; ``u`` broadcasts against ``d``."""
    return mask_vector(u, mask_mlp) * d


def contextual_impact_factor(d_hat_u: torch.Tensor, d_hat_v: torch.Tensor, factor_mlp: nn.Module, a: torch.Tensor) -> torch.Tensor:
    """``tanh(a . MLP([d_hat_u || d_hat_v]))`` per row."""
    return torch.tanh(factor_mlp(torch.cat([d_hat_u, d_hat_v], dim=-1)) @ a)


class WgLayer(MessagePassing):
    """GRU-aggregated pass over scalar-weighted edges.

    ``m_vu = W_1 h_v``; each in-edge contributes ``GRU(e_vu * m_vu, h_u)`` and
    ``h_u' = MLP(W_0 h_u + M_u)``. The GRU input side is linear in ``e_vu``,
    so ``propagate`` projects once per node and only mixes gates per edge.
    """

    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.W_0 = nn.Linear(dim, dim)
        self.W_1 = nn.Linear(dim, dim)
        self.gru = nn.GRUCell(dim, dim)
        self.update_mlp = mlp(dim, dim, hidden_dim)

    def message(self, h_src, h_dst, edge_attr):
        weight = _edge_scalars(edge_attr, h_src)
        return self.gru(weight.unsqueeze(-1) * self.W_1(h_src), h_dst)

    def projected_message(self, h: torch.Tensor, src: torch.Tensor, dst: torch.Tensor, edge_attr) -> torch.Tensor:
        weight = _edge_scalars(edge_attr, h.new_zeros(len(src), 1))
        node_in = F.linear(self.W_1(h), self.gru.weight_ih)
        node_hidden = F.linear(h, self.gru.weight_hh, self.gru.bias_hh)
        gi = weight.unsqueeze(-1) * node_in[src] + self.gru.bias_ih
        gh = node_hidden[dst]
        i_r, i_z, i_n = gi.chunk(3, dim=-1)
        h_r, h_z, h_n = gh.chunk(3, dim=-1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        n = torch.tanh(i_n + r * h_n)
        return (1.0 - z) * n + z * h[dst]

    def update(self, aggregated, h):
        return self.update_mlp(self.W_0(h) + aggregated)

    def propagate(self, h, src, dst, edge_attr=None):
        messages = self.projected_message(h, src, dst, edge_attr)
        aggregated = self.aggregate(messages, None, edge_attr, dst, h.shape[0])
        return self.update(aggregated, h), messages, aggregated


def _edge_scalars(edge_attr: Optional[torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    if edge_attr is None:
        return like.new_ones(like.shape[0])
    return edge_attr.to(like.dtype)


class GatedReadout(nn.Module):
    """``g = sum_v sigmoid(gate([d_v || h_v])) * value([d_v || h_v])`` per graph."""

    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.gate = mlp(2 * dim, dim, hidden_dim)
        self.value = mlp(2 * dim, dim, hidden_dim)

    def forward(self, d: torch.Tensor, h: torch.Tensor, node_graph: torch.Tensor, num_graphs: int) -> torch.Tensor:
        x = torch.cat([d, h], dim=-1)
        return scatter_sum(torch.sigmoid(self.gate(x)) * self.value(x), node_graph, num_graphs)


def graph_readout(d: torch.Tensor, h: torch.Tensor, readout: GatedReadout) -> torch.Tensor:
    """Package embedding of a single graph from its node rows."""
    return readout(d, h, torch.zeros(d.shape[0], dtype=torch.long), 1)[0]


def wg_score(u: torch.Tensor, g: torch.Tensor, head: nn.Module) -> torch.Tensor:
    return head(torch.cat([u, g], dim=-1)).squeeze(-1)


class DprWg(PackageModel):
    """Weighted-graph package scorer.

    ``use_context=False`` keeps the initial edge weights (no mask, no factor);
    ``use_type=False`` sets every initial weight to 1. Both off is the plain
    GNN baseline.
    """

    def __init__(
        self,
        encoder: PatientEncoder,
        drug_embedding: nn.Embedding,
        cfg: TrainConfig,
        layers: int = 1,
        use_context: bool = True,
        use_type: bool = True,
    ):
        super().__init__()
        dim = drug_embedding.embedding_dim
        self.encoder = encoder
        self.drug_embedding = drug_embedding
        self.use_context = use_context
        self.use_type = use_type
        fresh: List[nn.Module] = []
        if use_context:
            self.mask_mlp = mlp(encoder.out_dim, dim, cfg.hidden_dim)
            self.factor_mlp = mlp(2 * dim, dim, cfg.hidden_dim)
            self.a = nn.Parameter(torch.empty(dim))
            fresh += [self.mask_mlp, self.factor_mlp]
        self.layers = nn.ModuleList(WgLayer(dim, cfg.hidden_dim) for _ in range(layers))
        self.readout = GatedReadout(dim, cfg.hidden_dim)
        self.head = mlp(encoder.out_dim + dim, 1, cfg.hidden_dim)
        for module in [*fresh, self.layers, self.readout, self.head]:
            kaiming_init(module)
        if use_context:
            nn.init.uniform_(self.a, -dim ** -0.5, dim ** -0.5)

    @classmethod
    def from_pretrained(cls, pretrained: NcfModel, cfg: TrainConfig, **flags) -> "DprWg":
        drug_embedding = copy.deepcopy(pretrained.drug_embedding)
        drug_embedding.weight.requires_grad_(not cfg.freeze_embeddings)
        return cls(copy.deepcopy(pretrained.encoder), drug_embedding, cfg, **flags)

    def edge_weights(
        self, u: torch.Tensor, batch: GraphBatch, d: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor], torch.Tensor]:
        """``(e, c, e_hat)`` per edge; ``c`` is None without the context path."""
        if d is None:
            d = self.drug_embedding(batch.node_drug)
        if self.use_type:
            e = edge_weight_tensor(batch.edge_relation, batch.edge_p).to(d.dtype)
        else:
            e = d.new_ones(len(batch.edge_src))
        if not self.use_context:
            return e, None, e
        d_hat = conditional_drug_embedding(u[batch.node_graph], d, self.mask_mlp)
        c = contextual_impact_factor(d_hat[batch.edge_dst], d_hat[batch.edge_src], self.factor_mlp, self.a)
        return e, c, c * e

    def package_embedding(self, u: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
        d = self.drug_embedding(batch.node_drug)
        _, _, e_hat = self.edge_weights(u, batch, d)
        h = d
        for layer in self.layers:
            h = layer(h, batch.edge_src, batch.edge_dst, e_hat)
        return self.readout(d, h, batch.node_graph, batch.num_graphs)

    def score(self, u: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
        return wg_score(u, self.package_embedding(u, batch), self.head)


def train_wg(
    corpus: Corpus,
    pretrained: NcfModel,
    cfg: TrainConfig,
    graph_cfg: Optional[GraphConfig] = None,
    graphs: Optional[Sequence[Optional[PackageGraph]]] = None,
    use_context: bool = True,
    use_type: bool = True,
) -> TrainResult:
    """Fine-tune a DPR-WG model (or one of its variants) from pre-training."""
    graph_cfg = graph_cfg or GraphConfig()
    if graphs is None:
        _, graphs = corpus_graphs(corpus, graph_cfg.threshold)
    torch.manual_seed(cfg.seed)
    model = DprWg.from_pretrained(
        pretrained, cfg, layers=graph_cfg.layers, use_context=use_context, use_type=use_type,
    )
    name = "dpr-wg" if use_context and use_type else f"dpr-wg(context={use_context}, type={use_type})"
    return train_package_model(model, corpus, graphs, cfg, name=name)


@torch.no_grad()
def export_impact_factors(
    model: DprWg,
    corpus: Corpus,
    graphs: Sequence[Optional[PackageGraph]],
    patients: Sequence[int],
) -> pd.DataFrame:
    """Initial weight, contextual factor and rescaled weight per own-package edge."""
    model.eval()
    rows = []
    for i in patients:
        graph = graphs[i]
        if graph is None or graph.num_edges == 0:
            continue
        u = model.encoder(*patient_tensors(corpus, [i]))
        e, c, e_hat = model.edge_weights(u, collate_graphs([graph]))
        c = c if c is not None else torch.full_like(e, float("nan"))
        for (v, w), rel, e0, cv, eh in zip(graph.edges(), graph.relation, e.tolist(), c.tolist(), e_hat.tolist()):
            rows.append({
                "patient": corpus.record_ids[i],
                "drug_v": corpus.drug_names[v],
                "drug_u": corpus.drug_names[w],
                "relation": InteractionClass(int(rel)).name,
                "e_init": e0,
                "c": cv,
                "e_hat": eh,
            })
    return pd.DataFrame(rows, columns=["patient", "drug_v", "drug_u", "relation", "e_init", "c", "e_hat"])
