"""Shared fixtures: hand-built corpora, a tiny synthetic corpus, a pre-trained
NCF model and a fully trained toy work directory."""

import json
import os
from typing import Iterable, Optional, Sequence

import numpy as np
import pytest
import torch

from cli import run_pipeline
from config import GeneratorConfig, TrainConfig, parse_config
from corpus import (
    PAD_TOKEN,
    UNK_TOKEN,
    AdmissionTokens,
    Corpus,
    DiseaseDocument,
    LabeledPair,
    PatientDescription,
    Split,
    TokenVocab,
    build_relation_matrix,
    disease_vocab_for,
    generate_synthetic_corpus,
)
from embedding import pretrain

TINY_TRAIN = {
    "disease_dim": 4,
    "token_dim": 4,
    "lstm_hidden": 4,
    "drug_dim": 6,
    "hidden_dim": 8,
    "batch_size": 32,
    "graph_batch_size": 8,
    "negative_ratio": 3,
    "epochs": 2,
    "patience": 2,
}

TINY_GENERATOR = {
    "n_patients": 60,
    "n_drugs": 12,
    "mean_package_size": 4.0,
    "q": 8,
    "note_length": 6,
    "n_lab_items": 4,
    "interaction_density": 0.3,
}

# dimensions for finite-difference checks
GRAD_TRAIN = {
    "disease_dim": 3,
    "token_dim": 3,
    "lstm_hidden": 3,
    "drug_dim": 4,
    "hidden_dim": 5,
}


def tiny_train(**overrides) -> TrainConfig:
    return TrainConfig(**{**TINY_TRAIN, **overrides})


def tiny_generator(**overrides) -> GeneratorConfig:
    return GeneratorConfig(**{**TINY_GENERATOR, **overrides})


def tiny_config_data(workdir: str, **sections) -> dict:
    data = {
        "seed": 7,
        "workdir": workdir,
        "corpus": dict(TINY_GENERATOR),
        "train": dict(TINY_TRAIN),
        "evaluate": {"k": 5},
    }
    data.update(sections)
    return data


def make_corpus(
    packages: Sequence[Iterable[int]],
    M: int,
    labels: Sequence[LabeledPair] = (),
    split: Optional[Split] = None,
    seed: int = 0,
) -> Corpus:
    """Small corpus with random patient descriptions and the given packages."""
    vocab, _ = disease_vocab_for(2)
    tokens = TokenVocab([PAD_TOKEN, UNK_TOKEN, "fever", "cough", "pain"])
    rng = np.random.default_rng(seed)
    patients = []
    for _ in packages:
        bits = tuple(int(b) for b in rng.integers(0, 2, len(vocab)))
        note = tuple(int(t) for t in rng.integers(2, len(tokens), 3)) + (0,)
        patients.append(PatientDescription(DiseaseDocument(bits), AdmissionTokens(note)))
    n = len(patients)
    return Corpus(
        patients=patients,
        packages=[frozenset(p) for p in packages],
        relation=build_relation_matrix(labels, M),
        disease_vocab=vocab,
        token_vocab=tokens,
        split=split or Split(list(range(n)), [], []),
        record_ids=[f"P{i:03d}" for i in range(n)],
        drug_names=[f"drug_{j:03d}" for j in range(M)],
        metadata={"q": 4, "note_unit": "token", "seed": seed},
    )


@torch.no_grad()
def jitter(module: torch.nn.Module, scale: float = 0.1, seed: int = 0) -> None:
    """Perturb every parameter so no ReLU sits exactly on its kink."""
    gen = torch.Generator().manual_seed(seed)
    for param in module.parameters():
        param.add_(scale * torch.randn(param.shape, generator=gen, dtype=param.dtype))


@pytest.fixture
def train_cfg() -> TrainConfig:
    return tiny_train()


@pytest.fixture(scope="session")
def synthetic_corpus() -> Corpus:
    return generate_synthetic_corpus(tiny_generator())


@pytest.fixture(scope="session")
def pretrained(synthetic_corpus):
    return pretrain(synthetic_corpus, tiny_train()).model


@pytest.fixture(scope="session")
def pipeline_dir(tmp_path_factory) -> str:
    """Work directory after a full tiny pipeline run."""
    workdir = str(tmp_path_factory.mktemp("pipeline"))
    stages = [
        "gen-data", "pretrain", "train-wg", "train-ag", "evaluate",
        "generate", "export-edges", "export-factors",
    ]
    config = parse_config(tiny_config_data(workdir, stages=stages))
    run_pipeline(config)
    return workdir


@pytest.fixture
def config_file(tmp_path):
    """Write a tiny config document and return its path."""

    def write(**sections) -> str:
        path = os.path.join(str(tmp_path), "config.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(tiny_config_data(str(tmp_path / "run"), **sections), f)
        return path

    return write
