# recommend.py

"""Candidate retrieval, package ranking, baselines and evaluation.

Candidates for a patient are the packages of the most similar training
patients, by cosine similarity of pre-trained patient embeddings. A package
model then scores each candidate under the patient's own fine-tuned
embedding and the best one is recommended.
"""

import copy
import logging
import os
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from checkpoint import ARTIFACTS, build_model, load_checkpoint, load_model
from config import MODEL_NAMES, VARIANTS, GraphConfig, HeuristicConfig, PipelineConfig
from corpus import (
    CORPUS_FILE,
    Corpus,
    LabResult,
    PatientDescription,
    build_disease_document,
    corpus_statistics,
    load_corpus,
    normalize_admission_note,
)
from dpr_ag import DprAg, train_ag
from dpr_wg import DprWg, mask_vector, train_wg
from embedding import NcfModel, description_tensors, encode_patients, patient_tensors
from errors import ConfigurationError, StageError, UnknownVariantError
from genpkg import GenerationResult, Provenance, frequency_rank, generate_candidates
from graph import DEFAULT_THRESHOLD, PackageGraph, candidate_graph, collate_graphs, cooccurrence_stats
from trainer import PackageModel

logger = logging.getLogger(__name__)


class CandidateSource(str, Enum):
    SIMILAR_PATIENT = "SIMILAR_PATIENT"
    GENERATED = "GENERATED"


@dataclass(frozen=True)
class ScoredCandidate:
    package: frozenset
    source: CandidateSource
    score: float
    provenance: str = Provenance.S1.value


@dataclass
class EvalReport:
    """Per-patient metrics; means are unweighted over patients."""
    name: str
    patients: List[str] = field(default_factory=list)
    precision: List[float] = field(default_factory=list)
    recall: List[float] = field(default_factory=list)
    f1: List[float] = field(default_factory=list)

    def add(self, patient: str, metrics: Tuple[float, float, float]) -> None:
        self.patients.append(patient)
        self.precision.append(metrics[0])
        self.recall.append(metrics[1])
        self.f1.append(metrics[2])

    @property
    def mean_precision(self) -> float:
        return float(np.mean(self.precision)) if self.precision else 0.0

    @property
    def mean_recall(self) -> float:
        return float(np.mean(self.recall)) if self.recall else 0.0

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.f1)) if self.f1 else 0.0

    def summary(self) -> Dict[str, float]:
        return {
            "precision": self.mean_precision,
            "recall": self.mean_recall,
            "f1": self.mean_f1,
            "patients": len(self.patients),
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "model": self.name,
            "patient": self.patients,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        })


def evaluate(recommended: frozenset, truth: frozenset) -> Tuple[float, float, float]:
    """Precision, recall and F1 of one recommended package."""
    if not truth:
        raise ConfigurationError("ground-truth package must not be empty")
    hits = len(set(recommended) & set(truth))
    precision = hits / len(recommended) if recommended else 0.0
    recall = hits / len(truth)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def cosine_similarity(u: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(embeddings, axis=1) * np.linalg.norm(u)
    dots = embeddings @ u
    return np.divide(dots, norms, out=np.zeros_like(dots, dtype=np.float64), where=norms > 0)


def candidate_set(
    u: np.ndarray, train_embeddings: np.ndarray, train_packages: Sequence[frozenset], k: int = 10
) -> List[frozenset]:
    """Packages of the ``k`` most similar training patients, most similar first.

    Ties go to the lower patient index; repeated packages keep their first
    occurrence.
    """
    sims = cosine_similarity(np.asarray(u, dtype=np.float64), np.asarray(train_embeddings, dtype=np.float64))
    order = np.lexsort((np.arange(len(sims)), -sims))[:k]
    seen, packages = set(), []
    for idx in order:
        package = train_packages[idx]
        if package not in seen:
            seen.add(package)
            packages.append(package)
    return packages


def rank_candidates(
    score_fn: Callable[[Sequence[frozenset]], Sequence[float]],
    candidates: Sequence[frozenset],
    sources: Optional[Sequence[CandidateSource]] = None,
    provenance: Optional[Sequence[str]] = None,
) -> List[ScoredCandidate]:
    """Candidates sorted by descending score; equal scores keep input order."""
    if not candidates:
        raise ConfigurationError("cannot rank an empty candidate list")
    scores = [float(s) for s in score_fn(candidates)]
    sources = sources or [CandidateSource.SIMILAR_PATIENT] * len(candidates)
    provenance = provenance or [Provenance.S1.value] * len(candidates)
    scored = [ScoredCandidate(p, src, s, tag) for p, src, s, tag in zip(candidates, sources, scores, provenance)]
    return sorted(scored, key=lambda c: -c.score)


@torch.no_grad()
def ncf_topk_baseline(u: torch.Tensor, ncf: NcfModel, K: int) -> frozenset:
    """The ``K`` drugs with the highest matching score, ties by drug id."""
    scores = ncf.score_all(u.reshape(1, -1))[0].double().numpy()
    order = np.lexsort((np.arange(len(scores)), -scores))
    return frozenset(int(d) for d in order[:K])


def nn_baseline(u: np.ndarray, train_embeddings: np.ndarray, train_packages: Sequence[frozenset]) -> frozenset:
    return candidate_set(u, train_embeddings, train_packages, k=1)[0]


def baseline_k(corpus: Corpus) -> int:
    """Mean training package size, rounded."""
    return max(1, int(round(float(np.mean([len(p) for p in corpus.train_packages()])))))


class Recommender:
    """Retrieval state built once from the training split and the pre-trained model."""

    def __init__(
        self,
        corpus: Corpus,
        ncf: NcfModel,
        threshold: float = DEFAULT_THRESHOLD,
        heuristic: Optional[HeuristicConfig] = None,
    ):
        self.corpus = corpus
        self.ncf = ncf
        self.threshold = threshold
        self.heuristic = heuristic or HeuristicConfig()
        self.train_embeddings = encode_patients(ncf.encoder, corpus, corpus.split.train).double().numpy()
        self.train_packages = corpus.train_packages()
        self.stats = cooccurrence_stats(self.train_packages, corpus.M)
        self.L = frequency_rank(self.train_packages, corpus.M)
        self.K = baseline_k(corpus)

    def with_threshold(self, threshold: float) -> "Recommender":
        other = copy.copy(self)
        other.threshold = threshold
        return other

    @torch.no_grad()
    def pretrained_embedding(self, disease: torch.Tensor, notes: torch.Tensor) -> torch.Tensor:
        return self.ncf.encoder(disease, notes)[0]

    def similar(self, u_pre: torch.Tensor, k: int) -> List[frozenset]:
        return candidate_set(u_pre.double().numpy(), self.train_embeddings, self.train_packages, k)

    def generate(self, u_pre: torch.Tensor, S1: Sequence[frozenset]) -> GenerationResult:
        return generate_candidates(u_pre, S1, self.ncf, self.L, self.corpus.relation, self.stats, self.heuristic)

    def graph_for(self, package: frozenset) -> PackageGraph:
        return candidate_graph(package, self.corpus.relation, self.stats, self.threshold)

    def scorer(self, model: PackageModel, disease: torch.Tensor, notes: torch.Tensor):
        """Score function over candidate packages under the model's own encoder."""

        @torch.no_grad()
        def score(candidates: Sequence[frozenset]) -> List[float]:
            model.eval()
            u = model.encoder(disease, notes)
            batch = collate_graphs([self.graph_for(p) for p in candidates])
            return model.score(u.expand(len(candidates), -1), batch).tolist()

        return score

    def recommend(
        self,
        name: str,
        model: Optional[PackageModel],
        disease: torch.Tensor,
        notes: torch.Tensor,
        k: int = 10,
        heuristic: bool = False,
    ) -> List[ScoredCandidate]:
        """Ranked recommendations for one patient; the first entry is the pick."""
        u_pre = self.pretrained_embedding(disease, notes)
        if name == "ncf":
            return [ScoredCandidate(ncf_topk_baseline(u_pre, self.ncf, self.K), CandidateSource.GENERATED, 0.0, "top-k")]
        S1 = self.similar(u_pre, k)
        if name == "nn":
            return [ScoredCandidate(S1[0], CandidateSource.SIMILAR_PATIENT, 0.0)]
        if model is None:
            raise ConfigurationError(f"no trained model for '{name}'")
        if not heuristic:
            return rank_candidates(self.scorer(model, disease, notes), S1)
        generated = self.generate(u_pre, S1)
        packages = [p for p, _ in generated.candidates]
        sources = [
            CandidateSource.SIMILAR_PATIENT if tag == Provenance.S1 else CandidateSource.GENERATED
            for _, tag in generated.candidates
        ]
        tags = [tag.value for _, tag in generated.candidates]
        return rank_candidates(self.scorer(model, disease, notes), packages, sources, tags)


def evaluate_models(
    recommender: Recommender,
    names: Sequence[str],
    models: Dict[str, PackageModel],
    k: int = 10,
    heuristic: bool = False,
    patients: Optional[Sequence[int]] = None,
) -> Dict[str, EvalReport]:
    """Macro-averaged metrics per model over the test split (or ``patients``).

    With ``heuristic`` every package model also ranks the generated set, as
    ``<name>+heuristic``, and the best achievable candidate F1 is reported for
    both candidate sets.
    """
    corpus = recommender.corpus
    patients = corpus.split.test if patients is None else patients
    reports: Dict[str, EvalReport] = {}

    def report(name: str) -> EvalReport:
        return reports.setdefault(name, EvalReport(name))

    for i in patients:
        truth = corpus.packages[i]
        pid = corpus.record_ids[i]
        disease, notes = patient_tensors(corpus, [i])
        u_pre = recommender.pretrained_embedding(disease, notes)
        S1 = recommender.similar(u_pre, k)
        generated = recommender.generate(u_pre, S1) if heuristic else None
        for name in names:
            if name == "ncf":
                report(name).add(pid, evaluate(ncf_topk_baseline(u_pre, recommender.ncf, recommender.K), truth))
            elif name == "nn":
                report(name).add(pid, evaluate(S1[0], truth))
            else:
                model = models[name]
                best = rank_candidates(recommender.scorer(model, disease, notes), S1)[0]
                report(name).add(pid, evaluate(best.package, truth))
                if generated is not None:
                    packages = [p for p, _ in generated.candidates]
                    best = rank_candidates(recommender.scorer(model, disease, notes), packages)[0]
                    report(f"{name}+heuristic").add(pid, evaluate(best.package, truth))
        if generated is not None:
            report("best-candidate").add(pid, max((evaluate(p, truth) for p in S1), key=lambda m: m[2]))
            report("best-candidate+heuristic").add(
                pid, max((evaluate(p, truth) for p, _ in generated.candidates), key=lambda m: m[2])
            )
    for name, rep in reports.items():
        logger.info("%s: P %.4f R %.4f F1 %.4f over %d patients", name, rep.mean_precision, rep.mean_recall, rep.mean_f1, len(rep.patients))
    return reports


def reports_frame(reports: Dict[str, EvalReport]) -> pd.DataFrame:
    rows = [{"model": name, **rep.summary()} for name, rep in reports.items()]
    return pd.DataFrame(rows, columns=["model", "precision", "recall", "f1", "patients"])


# ---------------------------------------------------------------------------
# Ablations and sweeps

VARIANT_OPTIONS: Dict[str, Tuple[str, Dict[str, object]]] = {
    "WG-Context": ("dpr-wg", {"use_context": False}),
    "WG-Type": ("dpr-wg", {"use_type": False}),
    "AG-Mask": ("dpr-ag", {"use_mask": False}),
    "AG-Type": ("dpr-ag", {"ce_weight": 0.0}),
    "GNN-plain": ("dpr-wg", {"use_context": False, "use_type": False}),
}


def variant_options(variant: str) -> Tuple[str, Dict[str, object]]:
    """Base model and the components a variant switches off."""
    if variant not in VARIANT_OPTIONS:
        raise UnknownVariantError(f"unknown variant '{variant}'; expected one of {', '.join(VARIANTS)}")
    family, options = VARIANT_OPTIONS[variant]
    return family, dict(options)


def train_variant(
    variant: str,
    corpus: Corpus,
    pretrained: NcfModel,
    config: PipelineConfig,
    graphs: Optional[Sequence[Optional[PackageGraph]]] = None,
) -> PackageModel:
    family, options = variant_options(variant)
    if family == "dpr-wg":
        return train_wg(corpus, pretrained, config.train, config.graph, graphs, **options).model
    ag_cfg = config.ag
    if "ce_weight" in options:
        ag_cfg = ag_cfg.model_copy(update={"ce_weight": options.pop("ce_weight")})
    return train_ag(corpus, pretrained, config.train, config.graph, ag_cfg, graphs, **options).model


def run_ablation(
    variant: str,
    corpus: Corpus,
    pretrained: NcfModel,
    config: PipelineConfig,
    recommender: Optional[Recommender] = None,
    graphs: Optional[Sequence[Optional[PackageGraph]]] = None,
) -> EvalReport:
    """Train one simplified variant and evaluate it on the test split."""
    model = train_variant(variant, corpus, pretrained, config, graphs)
    recommender = recommender or Recommender(corpus, pretrained, config.graph.threshold, config.heuristic)
    return evaluate_models(recommender, [variant], {variant: model}, config.evaluate.k)[variant]


def _train_family(family: str, corpus: Corpus, pretrained: NcfModel, config: PipelineConfig) -> PackageModel:
    if family == "dpr-wg":
        return train_wg(corpus, pretrained, config.train, config.graph).model
    return train_ag(corpus, pretrained, config.train, config.graph, config.ag).model


def run_sweep(corpus: Corpus, pretrained: NcfModel, config: PipelineConfig, recommender: Optional[Recommender] = None) -> pd.DataFrame:
    """One metrics row per threshold, layer count and negative ratio setting."""
    base = recommender or Recommender(corpus, pretrained, config.graph.threshold, config.heuristic)
    family = config.sweep.model
    settings: List[Tuple[str, object, PipelineConfig]] = []
    for threshold in config.sweep.thresholds:
        settings.append(("threshold", threshold, config.model_copy(update={"graph": GraphConfig(threshold=threshold, layers=config.graph.layers)})))
    for layers in config.sweep.layers:
        settings.append(("layers", layers, config.model_copy(update={"graph": GraphConfig(threshold=config.graph.threshold, layers=layers)})))
    for ratio in config.sweep.negative_ratios:
        settings.append(("negative_ratio", ratio, config.model_copy(update={"train": config.train.model_copy(update={"negative_ratio": ratio})})))
    rows = []
    for parameter, value, setting in settings:
        logger.info("Sweep %s: %s=%s", family, parameter, value)
        model = _train_family(family, corpus, pretrained, setting)
        rec = base.with_threshold(setting.graph.threshold)
        rep = evaluate_models(rec, [family], {family: model}, config.evaluate.k)[family]
        rows.append({"model": family, "parameter": parameter, "value": value, **rep.summary()})
    return pd.DataFrame(rows, columns=["model", "parameter", "value", "precision", "recall", "f1", "patients"])


@torch.no_grad()
def export_masks(model: PackageModel, corpus: Corpus, patients: Sequence[int]) -> pd.DataFrame:
    """Per-patient mask vectors of a DPR model, one column per component."""
    if isinstance(model, DprWg) and model.use_context:
        mask_mlp = model.mask_mlp
    elif isinstance(model, DprAg) and model.use_mask:
        mask_mlp = model.mask_mlp
    else:
        raise ConfigurationError("model has no patient mask")
    model.eval()
    u = model.encoder(*patient_tensors(corpus, patients))
    masks = mask_vector(u, mask_mlp).double().numpy()
    frame = pd.DataFrame(masks, columns=[f"m{j}" for j in range(masks.shape[1])])
    frame.insert(0, "patient", [corpus.record_ids[i] for i in patients])
    return frame


# ---------------------------------------------------------------------------
# Serving

class RecommendationService:
    """Recommendations for raw patient inputs from a trained work directory.

    The corpus and each model are loaded on first use and cached.
    """

    def __init__(self, workdir: str, heuristic: Optional[HeuristicConfig] = None):
        self.workdir = workdir
        self.heuristic = heuristic or HeuristicConfig()
        self._lock = threading.Lock()
        self._corpus: Optional[Corpus] = None
        self._recommender: Optional[Recommender] = None
        self._models: Dict[str, PackageModel] = {}
        self._thresholds: Dict[str, float] = {}

    @property
    def corpus(self) -> Corpus:
        if self._corpus is None:
            if not os.path.exists(os.path.join(self.workdir, CORPUS_FILE)):
                raise StageError("serve", CORPUS_FILE, "gen-data")
            self._corpus = load_corpus(self.workdir)
            logger.info("Loaded corpus from %s (N=%d, M=%d)", self.workdir, self._corpus.N, self._corpus.M)
        return self._corpus

    @property
    def recommender(self) -> Recommender:
        if self._recommender is None:
            ncf = load_model(self.workdir, "ncf", self.corpus, stage="serve")
            self._recommender = Recommender(self.corpus, ncf, DEFAULT_THRESHOLD, self.heuristic)
        return self._recommender

    def model(self, name: str) -> Optional[PackageModel]:
        if name in ("ncf", "nn"):
            return None
        if name not in self._models:
            payload = load_checkpoint(os.path.join(self.workdir, ARTIFACTS[name][0]), name, self.corpus, stage="serve")
            self._models[name] = build_model(payload)
            self._thresholds[name] = float(payload["extra"].get("threshold", DEFAULT_THRESHOLD))
            logger.info("Loaded %s model from %s", name, self.workdir)
        return self._models[name]

    def loaded(self) -> List[str]:
        parts = ["corpus"] if self._corpus is not None else []
        if self._recommender is not None:
            parts.append("ncf")
        return parts + sorted(self._models)

    def statistics(self) -> Dict[str, object]:
        return corpus_statistics(self.corpus)

    def describe(self, demographics: Sequence[Tuple[str, str]], lab_results: Sequence[LabResult], note: str) -> PatientDescription:
        corpus = self.corpus
        unit = str(corpus.metadata.get("note_unit", "token"))
        disease = build_disease_document(demographics, lab_results, corpus.disease_vocab)
        return PatientDescription(disease, normalize_admission_note(note, corpus.q, corpus.token_vocab, unit))

    def recommend(
        self,
        demographics: Sequence[Tuple[str, str]],
        lab_results: Sequence[LabResult],
        note: str,
        model: str = "dpr-wg",
        k: int = 10,
        heuristic: bool = False,
    ) -> List[Dict[str, object]]:
        if model not in MODEL_NAMES:
            raise ConfigurationError(f"unknown model '{model}'; expected one of {', '.join(MODEL_NAMES)}")
        with self._lock:
            recommender = self.recommender
            package_model = self.model(model)
            if model in self._thresholds:
                recommender = recommender.with_threshold(self._thresholds[model])
        desc = self.describe(demographics, lab_results, note)
        disease, notes = description_tensors(desc, recommender.ncf.encoder)
        ranked = recommender.recommend(model, package_model, disease, notes, k, heuristic)
        names = self.corpus.drug_names
        return [
            {
                "rank": r,
                "drugs": [names[d] for d in sorted(c.package)],
                "drug_ids": sorted(c.package),
                "score": c.score,
                "source": c.source.value,
                "provenance": c.provenance,
            }
            for r, c in enumerate(ranked, start=1)
        ]
