# cli.py

"""Command-line entry point.

Every subcommand reads its inputs from and writes its outputs to one work
directory, so stages can run one at a time or chained with ``run``. Exit codes:
0 success, 1 configuration error, 2 runtime failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from typing import Callable, Dict, List, Optional, Sequence

import pandas as pd
import psutil

import settings
from checkpoint import ARTIFACTS, build_model, load_checkpoint, save_checkpoint
from config import MODEL_NAMES, VARIANTS, PipelineConfig, parse_config, validate_config
from corpus import CORPUS_FILE, Corpus, corpus_fingerprint, generate_synthetic_corpus, load_corpus, save_corpus
from dpr_ag import edge_classification_accuracy, export_edge_classes, train_ag
from dpr_wg import export_impact_factors, train_wg
from embedding import patient_tensors, pretrain
from errors import ConfigurationError, DprError, StageError
from genpkg import audit_frame, candidates_frame
from graph import DEFAULT_THRESHOLD, corpus_graphs
from recommend import (
    Recommender,
    evaluate_models,
    export_masks,
    reports_frame,
    run_ablation,
    run_sweep,
)

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"


def sha256_of(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _rss_mb() -> float:
    return psutil.Process().memory_info().rss / 1024 / 1024


class Pipeline:
    """Stage runner bound to one work directory and one validated config."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.workdir = config.workdir
        os.makedirs(self.workdir, exist_ok=True)
        self._corpus: Optional[Corpus] = None
        self._fingerprint: Optional[str] = None
        self.manifest = self._load_manifest()

    # -- artifacts ---------------------------------------------------------

    def path(self, name: str) -> str:
        return os.path.join(self.workdir, name)

    def _load_manifest(self) -> Dict[str, object]:
        path = self.path(MANIFEST_FILE)
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        return {"files": {}, "timings": {}, "metrics": {}}

    def corpus(self, stage: str) -> Corpus:
        if self._corpus is None:
            if not os.path.exists(self.path(CORPUS_FILE)):
                raise StageError(stage, CORPUS_FILE, "gen-data")
            self._corpus = load_corpus(self.workdir)
        return self._corpus

    def fingerprint(self, stage: str) -> str:
        if self._fingerprint is None:
            self._fingerprint = corpus_fingerprint(self.corpus(stage))
        return self._fingerprint

    def model(self, kind: str, stage: str):
        payload = load_checkpoint(self.path(ARTIFACTS[kind][0]), kind, self.corpus(stage), stage)
        return build_model(payload), payload.get("extra", {})

    def write_table(self, frame: pd.DataFrame, name: str) -> str:
        path = self.path(name)
        if "seed" not in frame.columns:
            frame = frame.assign(seed=self.config.seed)
        frame.to_csv(path, sep="\t", index=False, float_format="%.6f", lineterminator="\n")
        return path

    def write_json(self, data: Dict[str, object], name: str) -> str:
        path = self.path(name)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    def test_patients(self, stage: str, limit: Optional[int] = None) -> List[int]:
        patients = self.corpus(stage).split.test
        return patients[:limit] if limit else patients

    # -- stages ------------------------------------------------------------

    def gen_data(self) -> List[str]:
        corpus = generate_synthetic_corpus(self.config.corpus)
        self._corpus, self._fingerprint = corpus, None
        return save_corpus(corpus, self.workdir)

    def pretrain(self) -> List[str]:
        corpus = self.corpus("pretrain")
        result = pretrain(corpus, self.config.train)
        extra = {"seed": self.config.seed, "best_epoch": result.best_epoch, "skipped": len(result.skipped)}
        return [
            save_checkpoint(self.path(ARTIFACTS["ncf"][0]), result.model, self.config.train, corpus, extra),
            self.write_table(pd.DataFrame(result.history), "pretrain_history.tsv"),
        ]

    def _package_extra(self, result) -> Dict[str, object]:
        return {
            "seed": self.config.seed,
            "best_epoch": result.best_epoch,
            "threshold": self.config.graph.threshold,
        }

    def train_wg(self) -> List[str]:
        corpus = self.corpus("train-wg")
        ncf, _ = self.model("ncf", "train-wg")
        result = train_wg(corpus, ncf, self.config.train, self.config.graph)
        return [
            save_checkpoint(self.path(ARTIFACTS["dpr-wg"][0]), result.model, self.config.train, corpus, self._package_extra(result)),
            self.write_table(pd.DataFrame(result.history), "dpr_wg_history.tsv"),
        ]

    def train_ag(self) -> List[str]:
        corpus = self.corpus("train-ag")
        ncf, _ = self.model("ncf", "train-ag")
        result = train_ag(corpus, ncf, self.config.train, self.config.graph, self.config.ag)
        return [
            save_checkpoint(self.path(ARTIFACTS["dpr-ag"][0]), result.model, self.config.train, corpus, self._package_extra(result)),
            self.write_table(pd.DataFrame(result.history), "dpr_ag_history.tsv"),
        ]

    def _recommender(self, stage: str) -> Recommender:
        ncf, _ = self.model("ncf", stage)
        return Recommender(self.corpus(stage), ncf, self.config.graph.threshold, self.config.heuristic)

    def evaluate(self) -> List[str]:
        cfg = self.config.evaluate
        recommender = self._recommender("evaluate")
        baselines = [name for name in cfg.models if name in ("ncf", "nn")]
        reports = evaluate_models(recommender, baselines, {}, cfg.k) if baselines else {}
        for name in cfg.models:
            if name in baselines:
                continue
            model, extra = self.model(name, "evaluate")
            rec = recommender.with_threshold(float(extra.get("threshold", DEFAULT_THRESHOLD)))
            reports.update(evaluate_models(rec, [name], {name: model}, cfg.k, cfg.heuristic))
        summary = {name: rep.summary() for name, rep in reports.items()}
        self.manifest["metrics"] = summary
        return [
            self.write_table(pd.concat([rep.to_frame() for rep in reports.values()], ignore_index=True), "metrics.tsv"),
            self.write_table(reports_frame(reports), "metrics_summary.tsv"),
            self.write_json({"seed": self.config.seed, "k": cfg.k, "ncf_k": recommender.K, "models": summary}, SUMMARY_FILE),
        ]

    def ablate(self) -> List[str]:
        corpus = self.corpus("ablate")
        ncf, _ = self.model("ncf", "ablate")
        recommender = Recommender(corpus, ncf, self.config.graph.threshold, self.config.heuristic)
        _, graphs = corpus_graphs(corpus, self.config.graph.threshold)
        reports = {}
        for family in ("dpr-wg", "dpr-ag"):
            if os.path.exists(self.path(ARTIFACTS[family][0])):
                model, _ = self.model(family, "ablate")
                reports.update(evaluate_models(recommender, [family], {family: model}, self.config.evaluate.k))
        for variant in self.config.ablation.variants:
            reports[variant] = run_ablation(variant, corpus, ncf, self.config, recommender, graphs)
        self.manifest.setdefault("metrics", {}).update({f"ablation:{k}": v.summary() for k, v in reports.items()})
        return [self.write_table(reports_frame(reports), "ablation.tsv")]

    def generate(self, limit: Optional[int] = None) -> List[str]:
        corpus = self.corpus("generate")
        recommender = self._recommender("generate")
        candidates, audits = [], []
        for i in self.test_patients("generate", limit):
            u_pre = recommender.pretrained_embedding(*patient_tensors(corpus, [i]))
            result = recommender.generate(u_pre, recommender.similar(u_pre, self.config.evaluate.k))
            candidates.append(candidates_frame(corpus.record_ids[i], result, corpus.drug_names))
            audits.append(audit_frame(corpus.record_ids[i], result, corpus.drug_names))
        return [
            self.write_table(pd.concat(candidates, ignore_index=True), "candidates.tsv"),
            self.write_table(pd.concat(audits, ignore_index=True), "audit.tsv"),
        ]

    def export_masks(self, model_name: str = "dpr-wg", limit: Optional[int] = None) -> List[str]:
        model, _ = self.model(model_name, "export-masks")
        frame = export_masks(model, self.corpus("export-masks"), self.test_patients("export-masks", limit))
        return [self.write_table(frame, f"masks_{model_name.replace('-', '_')}.tsv")]

    def export_edges(self, limit: Optional[int] = None) -> List[str]:
        corpus = self.corpus("export-edges")
        model, extra = self.model("dpr-ag", "export-edges")
        _, graphs = corpus_graphs(corpus, float(extra.get("threshold", DEFAULT_THRESHOLD)))
        patients = self.test_patients("export-edges", limit)
        accuracy, pairs = edge_classification_accuracy(model, graphs, patients)
        logger.info("Edge classification accuracy %.4f over %d labeled pairs", accuracy, pairs)
        self.manifest.setdefault("metrics", {})["edge_accuracy"] = {"accuracy": accuracy, "pairs": pairs}
        return [self.write_table(export_edge_classes(model, corpus, graphs, patients), "edges.tsv")]

    def export_factors(self, limit: Optional[int] = None) -> List[str]:
        corpus = self.corpus("export-factors")
        model, extra = self.model("dpr-wg", "export-factors")
        _, graphs = corpus_graphs(corpus, float(extra.get("threshold", DEFAULT_THRESHOLD)))
        frame = export_impact_factors(model, corpus, graphs, self.test_patients("export-factors", limit))
        return [self.write_table(frame, "factors.tsv")]

    def sweep(self) -> List[str]:
        corpus = self.corpus("sweep")
        ncf, _ = self.model("ncf", "sweep")
        frame = run_sweep(corpus, ncf, self.config)
        return [self.write_table(frame, "sweep.tsv")]

    # -- bookkeeping -------------------------------------------------------

    def run_stage(self, stage: str, action: Callable[[], List[str]]) -> List[str]:
        logger.info("Running stage %s in %s", stage, self.workdir)
        start = time.perf_counter()
        files = action()
        elapsed = time.perf_counter() - start
        self.manifest["timings"][stage] = round(elapsed, 3)
        for path in files:
            self.manifest["files"][os.path.basename(path)] = sha256_of(path)
        peak = max(float(self.manifest.get("peak_rss_mb", 0.0)), _rss_mb())
        self.manifest["peak_rss_mb"] = round(peak, 1)
        logger.info("Stage %s done in %.1fs (%d files)", stage, elapsed, len(files))
        return files

    def write_manifest(self) -> str:
        self.manifest["config"] = self.config.model_dump()
        self.manifest["seed"] = self.config.seed
        if os.path.exists(self.path(CORPUS_FILE)):
            self.manifest["corpus_fingerprint"] = self.fingerprint("manifest")
        self.manifest["files"].pop(MANIFEST_FILE, None)
        return self.write_json(self.manifest, MANIFEST_FILE)

    def stage_action(self, stage: str) -> Callable[[], List[str]]:
        actions = {
            "gen-data": self.gen_data,
            "pretrain": self.pretrain,
            "train-wg": self.train_wg,
            "train-ag": self.train_ag,
            "evaluate": self.evaluate,
            "ablate": self.ablate,
            "generate": self.generate,
            "export-masks": self.export_masks,
            "export-edges": self.export_edges,
            "export-factors": self.export_factors,
            "sweep": self.sweep,
        }
        return actions[stage]


def run_pipeline(config: PipelineConfig) -> Dict[str, object]:
    """Run ``config.stages`` in order and write the manifest last."""
    pipeline = Pipeline(config)
    for stage in config.stages:
        pipeline.run_stage(stage, pipeline.stage_action(stage))
    pipeline.write_manifest()
    return pipeline.manifest


# ---------------------------------------------------------------------------
# Argument handling

OVERRIDES = {
    "lr": ("train", "lr"),
    "batch": ("train", "batch_size"),
    "neg_ratio": ("train", "negative_ratio"),
    "epochs": ("train", "epochs"),
    "freeze_embeddings": ("train", "freeze_embeddings"),
    "threshold": ("graph", "threshold"),
    "layers": ("graph", "layers"),
    "edge_dim": ("ag", "edge_dim"),
    "ce_weight": ("ag", "ce_weight"),
    "k": ("evaluate", "k"),
    "heuristic": ("evaluate", "heuristic"),
    "models": ("evaluate", "models"),
    "variants": ("ablation", "variants"),
    "patients": ("corpus", "n_patients"),
    "drugs": ("corpus", "n_drugs"),
    "note_unit": ("corpus", "note_unit"),
    "sweep_model": ("sweep", "model"),
}


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file (or defaults from the environment) with CLI overrides applied."""
    if getattr(args, "config", None):
        data = validate_config(args.config).model_dump()
    else:
        data = PipelineConfig(seed=settings.SEED, workdir=settings.WORKDIR).model_dump()
    if getattr(args, "workdir", None):
        data["workdir"] = args.workdir
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    for flag, (section, key) in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None and value is not False:
            data[section][key] = value
    return parse_config(data)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--workdir", help="artifact directory (default $DPR_WORKDIR)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--log-level", default=None, help="logging level (default $DPR_LOG_LEVEL)")


def _train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--neg-ratio", dest="neg_ratio", type=int)
    parser.add_argument("--epochs", type=int)


def _graph_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--threshold", type=float)
    parser.add_argument("--layers", type=int, choices=[1, 2])
    parser.add_argument("--freeze-embeddings", dest="freeze_embeddings", action="store_true")


def _ag_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--edge-dim", dest="edge_dim", type=int)
    parser.add_argument("--ce-weight", dest="ce_weight", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Interaction-aware drug package recommendation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and preprocess the synthetic corpus")
    _common(p)
    p.add_argument("--patients", type=int)
    p.add_argument("--drugs", type=int)
    p.add_argument("--note-unit", dest="note_unit", choices=["token", "char"])

    p = sub.add_parser("pretrain", help="NCF/BPR pre-training of patient and drug embeddings")
    _common(p)
    _train_flags(p)

    p = sub.add_parser("train-wg", help="train DPR-WG")
    _common(p)
    _train_flags(p)
    _graph_flags(p)

    p = sub.add_parser("train-ag", help="train DPR-AG")
    _common(p)
    _train_flags(p)
    _graph_flags(p)
    _ag_flags(p)

    p = sub.add_parser("evaluate", help="evaluate models on the test split")
    _common(p)
    p.add_argument("--models", nargs="+", choices=MODEL_NAMES)
    p.add_argument("--k", type=int, help="similar patients per candidate set")
    p.add_argument("--heuristic", action="store_true", help="also rank generated candidates")

    p = sub.add_parser("ablate", help="train and evaluate simplified variants")
    _common(p)
    _train_flags(p)
    _graph_flags(p)
    _ag_flags(p)
    p.add_argument("--variants", nargs="+", choices=VARIANTS)

    p = sub.add_parser("generate", help="heuristic candidate generation for test patients")
    _common(p)
    p.add_argument("--limit", type=int, help="only the first N test patients")

    p = sub.add_parser("export-masks", help="per-patient mask vectors")
    _common(p)
    p.add_argument("--model", dest="mask_model", choices=["dpr-wg", "dpr-ag"], default="dpr-wg")
    p.add_argument("--limit", type=int)

    p = sub.add_parser("export-edges", help="DPR-AG edge classification report")
    _common(p)
    p.add_argument("--limit", type=int)

    p = sub.add_parser("export-factors", help="DPR-WG contextual impact factors per edge")
    _common(p)
    p.add_argument("--limit", type=int)

    p = sub.add_parser("sweep", help="threshold, layer and negative-ratio sweeps")
    _common(p)
    _train_flags(p)
    p.add_argument("--model", dest="sweep_model", choices=["dpr-wg", "dpr-ag"])

    p = sub.add_parser("run", help="run the stages listed in the config")
    _common(p)

    p = sub.add_parser("validate-config", help="check a config file and print the resolved config")
    p.add_argument("file")
    p.add_argument("--log-level", default=None)

    p = sub.add_parser("serve", help="serve recommendations over HTTP")
    p.add_argument("--workdir")
    p.add_argument("--host", default=settings.HOST)
    p.add_argument("--port", type=int, default=settings.PORT)
    p.add_argument("--log-level", default=None)
    return parser


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "validate-config":
        config = validate_config(args.file)
        print(json.dumps(config.model_dump(), indent=2, sort_keys=True))
        return 0
    if args.command == "serve":
        from app import serve
        serve(args.host, args.port, args.workdir or settings.WORKDIR)
        return 0
    config = resolve_config(args)
    if args.command == "run":
        manifest = run_pipeline(config)
        logger.info("Pipeline finished: %d files in manifest", len(manifest["files"]))
        return 0
    pipeline = Pipeline(config)
    action = pipeline.stage_action(args.command)
    limit = getattr(args, "limit", None)
    if args.command == "export-masks":
        pipeline.run_stage(args.command, lambda: pipeline.export_masks(args.mask_model, limit))
    elif args.command in ("generate", "export-edges", "export-factors"):
        pipeline.run_stage(args.command, lambda: action(limit))
    else:
        pipeline.run_stage(args.command, action)
    pipeline.write_manifest()
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings.configure_logging(getattr(args, "log_level", None))
        return dispatch(args)
    except ConfigurationError as exc:
        for message in exc.messages:
            logger.error("config: %s", message)
        return 1
    except DprError as exc:
        logger.error("%s", exc)
        return 2
    except Exception:
        logger.exception("Unexpected failure")
        return 2


if __name__ == "__main__":
    sys.exit(main())
