# checkpoint.py

"""Saving and restoring trained models.

A checkpoint is a plain dict written with ``torch.save``:
``{format_version, kind, state_dict, config, corpus_fingerprint, extra}``.
``config`` holds everything needed to rebuild the module before loading the
state dict.
"""

import logging
import os
from typing import Any, Dict, Optional, Union

import torch

from config import TrainConfig
from corpus import Corpus, corpus_fingerprint
from dpr_ag import DprAg
from dpr_wg import DprWg
from embedding import NcfModel
from errors import ConfigurationError, StageError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PRETRAIN_FILE = "pretrain.pt"
WG_FILE = "dpr_wg.pt"
AG_FILE = "dpr_ag.pt"

# kind -> (file name, stage that produces it)
ARTIFACTS = {
    "ncf": (PRETRAIN_FILE, "pretrain"),
    "dpr-wg": (WG_FILE, "train-wg"),
    "dpr-ag": (AG_FILE, "train-ag"),
}


def model_options(model: Union[NcfModel, DprWg, DprAg]) -> Dict[str, Any]:
    """Constructor flags of a model, as stored in the checkpoint config."""
    if isinstance(model, DprWg):
        return {"layers": len(model.layers), "use_context": model.use_context, "use_type": model.use_type}
    if isinstance(model, DprAg):
        return {
            "layers": len(model.layers), "edge_dim": model.edge_dim,
            "use_mask": model.use_mask, "ce_weight": model.ce_weight,
        }
    return {}


def _kind_of(model) -> str:
    if isinstance(model, DprWg):
        return "dpr-wg"
    if isinstance(model, DprAg):
        return "dpr-ag"
    return "ncf"


def save_checkpoint(
    path: str,
    model: Union[NcfModel, DprWg, DprAg],
    train_cfg: TrainConfig,
    corpus: Corpus,
    extra: Optional[Dict[str, Any]] = None,
) -> str:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": _kind_of(model),
        "state_dict": model.state_dict(),
        "config": {
            "train": train_cfg.model_dump(),
            "p": corpus.p,
            "vocab_size": len(corpus.token_vocab),
            "n_drugs": corpus.M,
            "options": model_options(model),
        },
        "corpus_fingerprint": corpus_fingerprint(corpus),
        "extra": dict(extra or {}),
    }
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    torch.save(payload, path)
    logger.info("Saved %s checkpoint to %s", payload["kind"], path)
    return path


def load_checkpoint(path: str, kind: str, corpus: Optional[Corpus] = None, stage: str = "") -> Dict[str, Any]:
    """Read a checkpoint of ``kind``, checking format and corpus fingerprint."""
    producer = ARTIFACTS[kind][1]
    if not os.path.exists(path):
        raise StageError(stage or kind, os.path.basename(path), producer)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint format {payload.get('format_version')}")
    if payload.get("kind") != kind:
        raise ConfigurationError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')}")
    if corpus is not None and payload["corpus_fingerprint"] != corpus_fingerprint(corpus):
        raise StageError(stage or kind, f"a {kind} checkpoint trained on the current corpus", producer)
    return payload


def build_model(payload: Dict[str, Any]) -> Union[NcfModel, DprWg, DprAg]:
    """Rebuild the module described by a checkpoint and load its weights."""
    config = payload["config"]
    train_cfg = TrainConfig(**config["train"])
    skeleton = NcfModel(config["p"], config["vocab_size"], config["n_drugs"], train_cfg)
    options = config.get("options", {})
    kind = payload["kind"]
    if kind == "ncf":
        model = skeleton
    elif kind == "dpr-wg":
        model = DprWg.from_pretrained(skeleton, train_cfg, **options)
    else:
        model = DprAg.from_pretrained(skeleton, train_cfg, **options)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def load_model(workdir: str, kind: str, corpus: Optional[Corpus] = None, stage: str = ""):
    """Load the ``kind`` model stored under ``workdir``."""
    payload = load_checkpoint(os.path.join(workdir, ARTIFACTS[kind][0]), kind, corpus, stage)
    return build_model(payload)
