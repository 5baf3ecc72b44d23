# genpkg.py

"""Heuristic generation of new candidate packages.

S1 are the packages of similar patients. S2 reshapes each S1 package with the
two rank lists: rarely shared drugs the patient model dislikes are removed,
and unpopular drugs it likes are added. S3 goes further using the relation
matrix and co-occurrence statistics. The final candidate set is the union.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
import torch

from config import HeuristicConfig
from corpus import InteractionClass, RelationMatrix
from embedding import NcfModel
from errors import ConfigurationError
from graph import CooccurrenceStats

logger = logging.getLogger(__name__)

MIN_PACKAGE_SIZE = 1


class Provenance(str, Enum):
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"


@dataclass(frozen=True)
class RuleFiring:
    stage: Provenance
    rule: str
    parent: int
    drug: int
    partner: Optional[int] = None


@dataclass
class Refinement:
    """Refined packages, the index of each one's input package, and the log."""
    packages: List[frozenset] = field(default_factory=list)
    parents: List[int] = field(default_factory=list)
    firings: List[RuleFiring] = field(default_factory=list)


@dataclass
class RankLists:
    L: List[int]
    l: List[int]

    def __post_init__(self):
        if sorted(self.L) != list(range(len(self.L))) or sorted(self.l) != sorted(self.L):
            raise ConfigurationError("rank lists must be permutations of the drug set")
        self.position = {d: k for k, d in enumerate(self.l)}

    def top_l(self, pct: float) -> Set[int]:
        return set(self.l[:_share(len(self.l), pct)])

    def bottom_l(self, pct: float) -> Set[int]:
        return set(self.l[len(self.l) - _share(len(self.l), pct):])

    def bottom_L(self, pct: float) -> Set[int]:
        return set(self.L[len(self.L) - _share(len(self.L), pct):])


def _share(n: int, pct: float) -> int:
    return int(math.ceil(n * pct / 100.0))


def frequency_rank(packages: Iterable[Iterable[int]], M: int) -> List[int]:
    """Drugs by descending package count, ties by drug id."""
    counts = Counter(d for package in packages for d in package)
    return sorted(range(M), key=lambda d: (-counts[d], d))


@torch.no_grad()
def personalized_rank(u: torch.Tensor, ncf: NcfModel) -> List[int]:
    """Drugs by descending matching score for patient embedding ``u``, ties by id."""
    scores = ncf.score_all(u.reshape(1, -1))[0].double().numpy()
    return np.lexsort((np.arange(len(scores)), -scores)).tolist()


def _keep(out: Refinement, stage: Provenance, parent: int, drugs: Set[int]) -> None:
    if len(drugs) < MIN_PACKAGE_SIZE:
        logger.warning("%s package from parent %d dropped: no drugs left", stage.value, parent)
        return
    out.packages.append(frozenset(drugs))
    out.parents.append(parent)


def _fire(out: Refinement, firing: RuleFiring) -> None:
    logger.debug("%s %s: drug %d (parent %d, partner %s)", firing.stage.value, firing.rule, firing.drug, firing.parent, firing.partner)
    out.firings.append(firing)


def refine_s2(S1: Sequence[frozenset], ranks: RankLists, cfg: HeuristicConfig) -> Refinement:
    """Rank-based reshaping of every S1 package.

    Deletes drugs found in at most ``rare_in_S1_count`` S1 packages that sit in
    the bottom ``low_l_percentile`` of l. Adds drugs from the bottom
    ``low_L_percentile`` of L that sit in the top ``high_l_percentile`` of l.
    """
    if not S1:
        raise ConfigurationError("S1 must not be empty")
    shared = Counter(d for package in S1 for d in package)
    low_l = ranks.bottom_l(cfg.low_l_percentile)
    high_l = ranks.top_l(cfg.high_l_percentile)
    additions = sorted(ranks.bottom_L(cfg.low_L_percentile) & high_l)
    out = Refinement()
    for k, package in enumerate(S1):
        drugs = set(package)
        for d in sorted(package):
            if shared[d] <= cfg.rare_in_S1_count and d in low_l:
                drugs.discard(d)
                _fire(out, RuleFiring(Provenance.S2, "delete-rare-unlikely", k, d))
        for d in additions:
            if d not in package:
                drugs.add(d)
                _fire(out, RuleFiring(Provenance.S2, "add-likely-unpopular", k, d))
        _keep(out, Provenance.S2, k, drugs)
    return out


def _synergy_partner(d: int, package: Sequence[int], R: np.ndarray) -> Optional[int]:
    for x in package:
        if R[d, x] == InteractionClass.SYNERGISM or R[x, d] == InteractionClass.SYNERGISM:
            return x
    return None


def _cooccurrence_partner(d: int, package: Sequence[int], stats: CooccurrenceStats, p_high: float) -> Optional[int]:
    for x in package:
        if stats.p(d, x) >= p_high:
            return x
    return None


def refine_s3(
    S2: Sequence[frozenset],
    ranks: RankLists,
    R: RelationMatrix,
    stats: CooccurrenceStats,
    cfg: HeuristicConfig,
) -> Refinement:
    """Interaction-based rules, applied once per package in this order:
    add on synergism, add on high co-occurrence, delete on antagonism.

    Addition rules look at the package as it entered the pass. For an
    antagonistic pair whose co-occurrence is below ``p_low`` both ways, the
    member ranked lower in l is removed; a pair whose member is already gone
    is skipped, and a drug that already won a pair is never removed.
    """
    high_l = sorted(ranks.top_l(cfg.high_l_percentile))
    out = Refinement()
    for k, package in enumerate(S2):
        start = sorted(package)
        drugs = set(package)
        for d in high_l:
            if d in package:
                continue
            partner = _synergy_partner(d, start, R.R)
            if partner is not None:
                drugs.add(d)
                _fire(out, RuleFiring(Provenance.S3, "add-synergism", k, d, partner))
        for d in high_l:
            if d in drugs:
                continue
            partner = _cooccurrence_partner(d, start, stats, cfg.p_high)
            if partner is not None:
                drugs.add(d)
                _fire(out, RuleFiring(Provenance.S3, "add-cooccurrence", k, d, partner))
        removed: Set[int] = set()
        winners: Set[int] = set()
        members = sorted(drugs)
        for i, a in enumerate(members):
            for b in members[i + 1:]:
                if a in removed or b in removed:
                    continue
                antagonistic = (R.R[a, b] == InteractionClass.ANTAGONISM or R.R[b, a] == InteractionClass.ANTAGONISM)
                if not antagonistic or stats.p(a, b) >= cfg.p_low or stats.p(b, a) >= cfg.p_low:
                    continue
                loser, winner = (b, a) if ranks.position[b] > ranks.position[a] else (a, b)
                if loser in winners:
                    continue
                removed.add(loser)
                winners.add(winner)
                _fire(out, RuleFiring(Provenance.S3, "delete-antagonism", k, loser, winner))
        _keep(out, Provenance.S3, k, drugs - removed)
    return out


def union_candidates(
    S1: Sequence[frozenset], S2: Sequence[frozenset], S3: Sequence[frozenset]
) -> List[Tuple[frozenset, Provenance]]:
    """``S1 + S2 + S3`` with duplicate packages removed, first occurrence kept."""
    seen: Set[frozenset] = set()
    merged: List[Tuple[frozenset, Provenance]] = []
    for tag, group in ((Provenance.S1, S1), (Provenance.S2, S2), (Provenance.S3, S3)):
        for package in group:
            if package not in seen:
                seen.add(package)
                merged.append((package, tag))
    return merged


@dataclass
class GenerationResult:
    candidates: List[Tuple[frozenset, Provenance]]
    s2: Refinement
    s3: Refinement
    ranks: RankLists


def generate_candidates(
    u: torch.Tensor,
    S1: Sequence[frozenset],
    ncf: NcfModel,
    L: List[int],
    R: RelationMatrix,
    stats: CooccurrenceStats,
    cfg: HeuristicConfig,
) -> GenerationResult:
    """Full heuristic for one patient embedding ``u`` (from the pre-trained encoder)."""
    ranks = RankLists(L=L, l=personalized_rank(u, ncf))
    s2 = refine_s2(S1, ranks, cfg)
    s3 = refine_s3(s2.packages, ranks, R, stats, cfg)
    candidates = union_candidates(S1, s2.packages, s3.packages)
    logger.debug("Generated %d candidates (S1 %d, S2 %d, S3 %d)", len(candidates), len(S1), len(s2.packages), len(s3.packages))
    return GenerationResult(candidates=candidates, s2=s2, s3=s3, ranks=ranks)


def audit_frame(patient: str, result: GenerationResult, drug_names: Sequence[str]) -> pd.DataFrame:
    rows: List[Dict[str, object]] = []
    for refinement in (result.s2, result.s3):
        for f in refinement.firings:
            rows.append({
                "patient": patient,
                "stage": f.stage.value,
                "rule": f.rule,
                "parent": f.parent,
                "drug": drug_names[f.drug],
                "partner": drug_names[f.partner] if f.partner is not None else "",
            })
    return pd.DataFrame(rows, columns=["patient", "stage", "rule", "parent", "drug", "partner"])


def candidates_frame(patient: str, result: GenerationResult, drug_names: Sequence[str]) -> pd.DataFrame:
    rows = [
        {"patient": patient, "rank": k, "provenance": tag.value, "drugs": " ".join(drug_names[d] for d in sorted(package))}
        for k, (package, tag) in enumerate(result.candidates)
    ]
    return pd.DataFrame(rows, columns=["patient", "rank", "provenance", "drugs"])
