# config.py

"""Experiment configuration schemas.

Every section is a pydantic model that forbids unknown keys, so a typo in a
config file is reported instead of silently falling back to a default.
"""

import difflib
import json
import logging
import os
from typing import Any, List, Literal, Optional, Type

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigurationError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

STAGES = (
    "gen-data", "pretrain", "train-wg", "train-ag",
    "evaluate", "ablate", "generate", "export-masks", "export-edges",
    "export-factors", "sweep",
)
MODEL_NAMES = ("ncf", "nn", "dpr-wg", "dpr-ag")
VARIANTS = ("WG-Context", "WG-Type", "AG-Mask", "AG-Type", "GNN-plain")


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class GeneratorConfig(StrictModel):
    """Settings of the synthetic EMR generator."""
    seed: int = 7
    n_patients: int = Field(1000, ge=10)
    n_drugs: int = Field(100, ge=5)
    n_conditions: int = Field(8, gt=0)
    mean_package_size: float = Field(18.0, ge=2.0)
    q: int = Field(64, gt=0)
    note_unit: Literal["token", "char"] = "token"
    note_length: int = Field(40, gt=0)
    n_lab_items: int = Field(12, gt=0)
    # share of unordered drug pairs that receive an interaction label
    interaction_density: float = Field(0.03, gt=0.0, le=1.0)
    synergy_share: float = Field(0.6, ge=0.0, le=1.0)
    antagonism_share: float = Field(0.25, ge=0.0, le=1.0)
    # each condition is treated with a few fixed regimens of different sizes
    n_regimens: int = Field(3, gt=0)
    regimen_size_spread: float = Field(0.5, ge=0.0, lt=1.0)
    core_keep: float = Field(0.9, gt=0.0, le=1.0)
    extra_drugs: float = Field(1.0, ge=0.0)

    @model_validator(mode="after")
    def _check_sizes(self) -> "GeneratorConfig":
        if self.mean_package_size >= self.n_drugs:
            raise ValueError("mean_package_size must be smaller than n_drugs")
        if self.synergy_share + self.antagonism_share > 1.0:
            raise ValueError("synergy_share + antagonism_share must not exceed 1")
        if self.extra_drugs >= self.mean_package_size:
            raise ValueError("extra_drugs must be smaller than mean_package_size")
        return self


class TrainConfig(StrictModel):
    """Optimisation and model-size settings shared by every trained model."""
    lr: float = Field(0.001, gt=0.0)
    batch_size: int = Field(256, gt=0)
    graph_batch_size: int = Field(32, gt=0)
    negative_ratio: int = Field(10, ge=1)
    l2: float = Field(1e-6, ge=0.0)
    epochs: int = Field(20, gt=0)
    patience: int = Field(5, gt=0)
    seed: int = 7
    freeze_embeddings: bool = False
    disease_dim: int = Field(32, gt=0)
    token_dim: int = Field(32, gt=0)
    lstm_hidden: int = Field(32, gt=0)
    drug_dim: int = Field(64, gt=0)
    hidden_dim: int = Field(128, gt=0)


class GraphConfig(StrictModel):
    threshold: float = Field(0.01, ge=0.0, le=1.0)
    layers: Literal[1, 2] = 1


class AgConfig(StrictModel):
    edge_dim: Optional[int] = Field(None, gt=0)
    ce_weight: float = Field(1.0, ge=0.0)


class HeuristicConfig(StrictModel):
    """Concrete thresholds for the package-generation rules."""
    high_l_percentile: float = Field(20.0, gt=0.0, lt=100.0)
    low_l_percentile: float = Field(50.0, gt=0.0, lt=100.0)
    low_L_percentile: float = Field(50.0, gt=0.0, lt=100.0)
    rare_in_S1_count: int = Field(1, ge=0)
    p_high: float = Field(0.3, ge=0.0, le=1.0)
    p_low: float = Field(0.01, ge=0.0, le=1.0)


class EvaluateConfig(StrictModel):
    models: List[Literal["ncf", "nn", "dpr-wg", "dpr-ag"]] = Field(
        default_factory=lambda: ["ncf", "nn", "dpr-wg", "dpr-ag"]
    )
    k: int = Field(10, gt=0)
    heuristic: bool = False


class AblationConfig(StrictModel):
    variants: List[Literal["WG-Context", "WG-Type", "AG-Mask", "AG-Type", "GNN-plain"]] = Field(
        default_factory=lambda: list(VARIANTS)
    )


class SweepConfig(StrictModel):
    model: Literal["dpr-wg", "dpr-ag"] = "dpr-wg"
    thresholds: List[float] = Field(default_factory=lambda: [0.01, 0.05, 0.1, 0.3, 0.5])
    layers: List[Literal[1, 2]] = Field(default_factory=lambda: [1, 2])
    negative_ratios: List[int] = Field(default_factory=lambda: [1, 5, 10])


class PipelineConfig(StrictModel):
    """Top-level experiment configuration.

    The top-level ``seed`` is authoritative and is copied into the corpus and
    training sections so every artifact records the same value.
    """
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 7
    workdir: str = os.path.join("runs", "default")
    stages: List[Literal[
        "gen-data", "pretrain", "train-wg", "train-ag",
        "evaluate", "ablate", "generate", "export-masks", "export-edges",
        "export-factors", "sweep",
    ]] = Field(default_factory=lambda: ["gen-data", "pretrain", "train-wg", "train-ag", "evaluate"])
    corpus: GeneratorConfig = Field(default_factory=GeneratorConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    graph: GraphConfig = Field(default_factory=GraphConfig)
    ag: AgConfig = Field(default_factory=AgConfig)
    heuristic: HeuristicConfig = Field(default_factory=HeuristicConfig)
    evaluate: EvaluateConfig = Field(default_factory=EvaluateConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="after")
    def _sync_seed(self) -> "PipelineConfig":
        self.corpus.seed = self.seed
        self.train.seed = self.seed
        if os.path.isfile(self.workdir):
            raise ValueError(f"workdir '{self.workdir}' is a file")
        return self


def _model_at(loc: tuple) -> Optional[Type[BaseModel]]:
    """Walk the schema along an error location to the model owning the key."""
    model: Type[BaseModel] = PipelineConfig
    for part in loc[:-1]:
        field = model.model_fields.get(part) if isinstance(part, str) else None
        if field is None or not (isinstance(field.annotation, type)
                                 and issubclass(field.annotation, BaseModel)):
            return None
        model = field.annotation
    return model


def _format_error(err: dict) -> str:
    loc = tuple(err.get("loc", ()))
    path = ".".join(str(p) for p in loc) or "<root>"
    if err.get("type") == "extra_forbidden":
        owner = _model_at(loc)
        hint = ""
        if owner is not None and loc:
            close = difflib.get_close_matches(str(loc[-1]), list(owner.model_fields), n=1)
            if close:
                hint = f" (did you mean '{close[0]}'?)"
        return f"{path}: unknown key{hint}"
    return f"{path}: {err.get('msg', 'invalid value')}"


def parse_config(data: dict[str, Any]) -> PipelineConfig:
    """Validate a config mapping, collecting every error before failing."""
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        messages = [_format_error(err) for err in exc.errors()]
        raise ConfigurationError(messages) from None


def validate_config(path: str) -> PipelineConfig:
    """Load and validate a JSON config file.

    Args:
        path: Path to the config document.

    Returns:
        The validated PipelineConfig with defaults filled in.

    Raises:
        ConfigurationError: With one message per problem found.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    config = parse_config(data)
    logger.info("Loaded config %s (schema v%d, seed %d)", path, config.schema_version, config.seed)
    return config
