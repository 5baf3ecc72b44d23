# graph.py

"""Package graphs and the message-passing contract.

A package graph has one node per drug in the package. A directed edge v -> u
exists when the pair is labeled in the relation matrix, or when the drugs
co-occur often enough in training packages. Messages travel along the stored
edge direction, so node u aggregates over its in-neighbours.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from corpus import Corpus, InteractionClass, RelationMatrix
from errors import ConfigurationError, GraphConstructionError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.01


class EdgeSource(str, Enum):
    LABELED = "LABELED"
    COOCCUR = "COOCCUR"


@dataclass
class CooccurrenceStats:
    """Package counts per drug and per drug pair.

    ``p(i, j) = num_ij / num_i``, defined as 0 when drug i never occurs.
    """
    counts: np.ndarray
    joint: np.ndarray
    proportions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        denom = self.counts[:, None].astype(np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            props = np.where(denom > 0, self.joint / np.maximum(denom, 1.0), 0.0)
        np.fill_diagonal(props, 0.0)
        self.proportions = props

    @property
    def M(self) -> int:
        return self.counts.shape[0]

    def p(self, i: int, j: int) -> float:
        return float(self.proportions[i, j])


def cooccurrence_stats(packages: Iterable[Iterable[int]], M: int) -> CooccurrenceStats:
    """Exact co-occurrence counts over (training) packages."""
    incidence = []
    for package in packages:
        row = np.zeros(M, dtype=np.int64)
        row[list(package)] = 1
        incidence.append(row)
    if incidence:
        X = np.stack(incidence)
        joint = X.T @ X
    else:
        joint = np.zeros((M, M), dtype=np.int64)
    counts = np.diag(joint).copy()
    np.fill_diagonal(joint, 0)
    return CooccurrenceStats(counts=counts, joint=joint)


@dataclass(frozen=True)
class PackageGraph:
    """Directed graph over one package; node i is ``drugs[i]``.

    Edge arrays are local node indices; ``relation[e]`` is R[v][u] and
    ``p_values[e]`` is p_vu for edge e = (v, u).
    """
    drugs: Tuple[int, ...]
    src: np.ndarray
    dst: np.ndarray
    sources: Tuple[EdgeSource, ...]
    relation: np.ndarray
    p_values: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.drugs)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    def edges(self) -> List[Tuple[int, int]]:
        """Edges as (drug_v, drug_u) pairs."""
        return [(self.drugs[v], self.drugs[u]) for v, u in zip(self.src.tolist(), self.dst.tolist())]

    def relabel(self, order: Sequence[int]) -> "PackageGraph":
        """Same graph with nodes listed in ``order`` (a permutation of local ids)."""
        position = np.empty(len(order), dtype=np.int64)
        position[np.asarray(order)] = np.arange(len(order))
        return PackageGraph(
            drugs=tuple(self.drugs[i] for i in order),
            src=position[self.src],
            dst=position[self.dst],
            sources=self.sources,
            relation=self.relation,
            p_values=self.p_values,
        )


def construct_package_graph(
    package: Iterable[int],
    R: RelationMatrix,
    stats: CooccurrenceStats,
    threshold: float = DEFAULT_THRESHOLD,
) -> PackageGraph:
    """Build the package graph; nodes are the package drugs in id order.

    Labeled pairs connect in their labeled direction. Co-occurrence edges are
    added in both directions when either proportion clears the threshold;
    pairs that never co-occur get no co-occurrence edge.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ConfigurationError(f"threshold must lie in [0, 1], got {threshold}")
    drugs = tuple(sorted(set(int(d) for d in package)))
    if len(drugs) < 2:
        raise GraphConstructionError(f"package {drugs} has fewer than two drugs")
    ids = np.asarray(drugs, dtype=np.int64)
    sub_R = R.R[np.ix_(ids, ids)]
    sub_p = stats.proportions[np.ix_(ids, ids)]
    labeled = sub_R != InteractionClass.UNKNOWN
    best = np.maximum(sub_p, sub_p.T)
    cooccur = (best > 0.0) & (best >= threshold)
    keep = labeled | cooccur
    np.fill_diagonal(keep, False)
    src, dst = np.nonzero(keep)
    return PackageGraph(
        drugs=drugs,
        src=src.astype(np.int64),
        dst=dst.astype(np.int64),
        sources=tuple(EdgeSource.LABELED if labeled[v, u] else EdgeSource.COOCCUR for v, u in zip(src, dst)),
        relation=sub_R[src, dst].astype(np.int64),
        p_values=sub_p[src, dst].astype(np.float64),
    )


def dump_graph(graph: PackageGraph, drug_names: Optional[Sequence[str]] = None) -> str:
    """Human-readable node and edge listing with provenance and raw p values."""
    name = (lambda d: drug_names[d]) if drug_names is not None else str
    lines = ["# nodes", *(f"{i}\t{d}\t{name(d)}" for i, d in enumerate(graph.drugs)), "# edges"]
    for e in range(graph.num_edges):
        v, u = graph.drugs[graph.src[e]], graph.drugs[graph.dst[e]]
        lines.append(
            f"{name(v)}\t{name(u)}\t{graph.sources[e].value}\t"
            f"{InteractionClass(int(graph.relation[e])).name}\t{graph.p_values[e]:.6f}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Batching

@dataclass
class GraphBatch:
    """Disjoint union of package graphs with global node indices."""
    node_drug: torch.Tensor
    node_graph: torch.Tensor
    edge_src: torch.Tensor
    edge_dst: torch.Tensor
    edge_graph: torch.Tensor
    edge_relation: torch.Tensor
    edge_p: torch.Tensor
    num_graphs: int

    @property
    def num_nodes(self) -> int:
        return int(self.node_drug.shape[0])


def collate_graphs(graphs: Sequence[PackageGraph]) -> GraphBatch:
    sizes = np.asarray([g.num_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]) if len(graphs) else np.zeros(0, dtype=np.int64)
    node_drug = np.concatenate([np.asarray(g.drugs, dtype=np.int64) for g in graphs]) if graphs else np.zeros(0, np.int64)
    node_graph = np.repeat(np.arange(len(graphs)), sizes)
    edge_counts = np.asarray([g.num_edges for g in graphs], dtype=np.int64)

    def cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype)

    src = cat([g.src + off for g, off in zip(graphs, offsets)], np.int64)
    dst = cat([g.dst + off for g, off in zip(graphs, offsets)], np.int64)
    return GraphBatch(
        node_drug=torch.from_numpy(node_drug),
        node_graph=torch.from_numpy(node_graph),
        edge_src=torch.from_numpy(src),
        edge_dst=torch.from_numpy(dst),
        edge_graph=torch.from_numpy(np.repeat(np.arange(len(graphs)), edge_counts)),
        edge_relation=torch.from_numpy(cat([g.relation for g in graphs], np.int64)),
        edge_p=torch.from_numpy(cat([g.p_values for g in graphs], np.float64)),
        num_graphs=len(graphs),
    )


# ---------------------------------------------------------------------------
# Message passing

def scatter_sum(values: torch.Tensor, index: torch.Tensor, size: int) -> torch.Tensor:
    out = values.new_zeros((size,) + tuple(values.shape[1:]))
    return out.index_add(0, index, values)


class MessagePassing(nn.Module):
    """One MESSAGE / AGGREGATION / UPDATE pass.

    Subclasses implement ``message`` and ``update``; the default aggregation
    is the plain sum of incoming messages (zero for isolated nodes).
    """

    def message(self, h_src: torch.Tensor, h_dst: torch.Tensor, edge_attr: Optional[torch.Tensor]) -> torch.Tensor:
        raise NotImplementedError

    def aggregate(
        self,
        messages: torch.Tensor,
        h_dst: torch.Tensor,
        edge_attr: Optional[torch.Tensor],
        dst: torch.Tensor,
        num_nodes: int,
    ) -> torch.Tensor:
        return scatter_sum(messages, dst, num_nodes)

    def update(self, aggregated: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def propagate(
        self, h: torch.Tensor, src: torch.Tensor, dst: torch.Tensor, edge_attr: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h_dst = h[dst]
        messages = self.message(h[src], h_dst, edge_attr)
        aggregated = self.aggregate(messages, h_dst, edge_attr, dst, h.shape[0])
        return self.update(aggregated, h), messages, aggregated

    def forward(self, h, src, dst, edge_attr=None) -> torch.Tensor:
        return self.propagate(h, src, dst, edge_attr)[0]


@dataclass
class MessageState:
    """Node states after every pass (``states[0]`` is the input) plus the
    last pass's per-edge messages and per-node aggregates."""
    states: List[torch.Tensor]
    messages: torch.Tensor
    aggregated: torch.Tensor

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1]


def run_message_passing(
    graph: PackageGraph,
    node_states: torch.Tensor,
    layer: Union[MessagePassing, Sequence[MessagePassing]],
    layers: int = 1,
    edge_attr: Optional[torch.Tensor] = None,
) -> MessageState:
    """Run ``layers`` passes over one package graph.

    ``layer`` is either one module reused for every pass or one module per
    pass. ``node_states`` row i is h^(0) of local node i.
    """
    if layers < 1:
        raise ConfigurationError("layers must be at least 1")
    stack = list(layer) if isinstance(layer, (list, tuple, nn.ModuleList)) else [layer] * layers
    if len(stack) != layers:
        raise ConfigurationError(f"{len(stack)} layer modules given for {layers} passes")
    src = torch.from_numpy(graph.src)
    dst = torch.from_numpy(graph.dst)
    states = [node_states]
    h = node_states
    messages = aggregated = node_states.new_zeros(0)
    for module in stack:
        h, messages, aggregated = module.propagate(h, src, dst, edge_attr)
        states.append(h)
    return MessageState(states=states, messages=messages, aggregated=aggregated)


def build_patient_graphs(
    packages: Sequence[Iterable[int]],
    R: RelationMatrix,
    stats: CooccurrenceStats,
    threshold: float = DEFAULT_THRESHOLD,
) -> List[Optional[PackageGraph]]:
    """One package graph per patient; ``None`` where the package is too small."""
    graphs: List[Optional[PackageGraph]] = []
    for i, package in enumerate(packages):
        try:
            graphs.append(construct_package_graph(package, R, stats, threshold))
        except GraphConstructionError as exc:
            logger.warning("No graph for patient %d: %s", i, exc)
            graphs.append(None)
    edges = [g.num_edges for g in graphs if g is not None]
    if edges:
        logger.info("Built %d package graphs, mean %.1f edges (threshold %.3f)", len(edges), float(np.mean(edges)), threshold)
    return graphs


def corpus_graphs(corpus: Corpus, threshold: float = DEFAULT_THRESHOLD) -> Tuple[CooccurrenceStats, List[Optional[PackageGraph]]]:
    """Training-split statistics and every patient's graph built from them."""
    stats = cooccurrence_stats(corpus.train_packages(), corpus.M)
    return stats, build_patient_graphs(corpus.packages, corpus.relation, stats, threshold)


def candidate_graph(
    package: Iterable[int],
    R: RelationMatrix,
    stats: CooccurrenceStats,
    threshold: float = DEFAULT_THRESHOLD,
) -> PackageGraph:
    """Graph for scoring a candidate; a single-drug candidate gets one node, no edges."""
    drugs = tuple(sorted(set(int(d) for d in package)))
    if len(drugs) != 1:
        return construct_package_graph(drugs, R, stats, threshold)
    empty = np.zeros(0, dtype=np.int64)
    return PackageGraph(drugs=drugs, src=empty, dst=empty, sources=(), relation=empty, p_values=np.zeros(0))
