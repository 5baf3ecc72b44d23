# corpus.py

"""EMR-like records, preprocessing and the drug relation matrix.

Raw records (demographics, lab results, an admission note and the drugs
given during the stay) are turned into patient descriptions: a 0/1 disease
document plus a fixed-length token sequence. Drug-drug interaction labels are
collected into a directed relation matrix.
"""

import hashlib
import io
import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import GeneratorConfig
from errors import ConfigurationError, PreprocessingError, RelationConflictError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CORPUS_FILE = "corpus.jsonl"
LABELS_FILE = "labels.tsv"

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class InteractionClass(IntEnum):
    NO_INTERACTION = 0
    SYNERGISM = 1
    ANTAGONISM = 2
    UNKNOWN = -1


LABELED_CLASSES = (
    InteractionClass.NO_INTERACTION,
    InteractionClass.SYNERGISM,
    InteractionClass.ANTAGONISM,
)


class Direction(str, Enum):
    A_TO_B = "A_to_B"
    B_TO_A = "B_to_A"
    BIDIRECTION = "Bidirection"


class LabLevel(str, Enum):
    NORMAL = "normal"
    ABNORMALLY_HIGH = "abnormally high"
    ABNORMALLY_LOW = "abnormally low"


@dataclass(frozen=True)
class LabResult:
    item: str
    value: object
    low: float
    high: float


@dataclass(frozen=True)
class RawRecord:
    record_id: str
    demographics: Tuple[Tuple[str, str], ...]
    lab_results: Tuple[LabResult, ...]
    admission_note: str
    drugs: frozenset


@dataclass(frozen=True)
class DiseaseDocument:
    bits: Tuple[int, ...]

    @property
    def indices(self) -> List[int]:
        return [i for i, b in enumerate(self.bits) if b]


@dataclass(frozen=True)
class AdmissionTokens:
    tokens: Tuple[int, ...]


@dataclass(frozen=True)
class PatientDescription:
    disease: DiseaseDocument
    note: AdmissionTokens


@dataclass(frozen=True)
class LabeledPair:
    drug_a: int
    drug_b: int
    cls: InteractionClass
    direction: Direction


@dataclass
class DiseaseVocab:
    """Bijective map between disease-document bit positions and entries."""
    entries: List[str]
    index: Dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {entry: i for i, entry in enumerate(self.entries)}
        if len(self.index) != len(self.entries):
            raise ConfigurationError("disease vocabulary has duplicate entries")

    def __len__(self) -> int:
        return len(self.entries)

    @staticmethod
    def demographic_key(feature: str, value: str) -> str:
        return f"{feature.strip().lower()}: {str(value).strip().lower()}"

    @staticmethod
    def lab_key(item: str, level: LabLevel) -> str:
        return f"{item.strip().lower()} value: {level.value}"


@dataclass
class TokenVocab:
    tokens: List[str]
    index: Dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ConfigurationError("token vocabulary must start with <pad>, <unk>")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK_ID)


@dataclass
class RelationMatrix:
    """Directed M x M interaction labels; R[i][j] is the effect of drug i on drug j."""
    R: np.ndarray

    @property
    def M(self) -> int:
        return self.R.shape[0]

    def get(self, a: int, b: int) -> InteractionClass:
        return InteractionClass(int(self.R[a, b]))

    def is_labeled(self, a: int, b: int) -> bool:
        return self.R[a, b] != InteractionClass.UNKNOWN

    def __eq__(self, other) -> bool:
        return isinstance(other, RelationMatrix) and np.array_equal(self.R, other.R)


@dataclass
class Split:
    train: List[int]
    valid: List[int]
    test: List[int]


@dataclass
class Corpus:
    patients: List[PatientDescription]
    packages: List[frozenset]
    relation: RelationMatrix
    disease_vocab: DiseaseVocab
    token_vocab: TokenVocab
    split: Split
    record_ids: List[str]
    drug_names: List[str]
    metadata: Dict[str, object]
    _disease: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    _notes: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def N(self) -> int:
        return len(self.patients)

    @property
    def M(self) -> int:
        return self.relation.M

    @property
    def p(self) -> int:
        return len(self.disease_vocab)

    @property
    def q(self) -> int:
        return int(self.metadata["q"])

    def disease_matrix(self) -> np.ndarray:
        if self._disease is None:
            self._disease = np.asarray([d.disease.bits for d in self.patients], dtype=np.float32)
        return self._disease

    def note_matrix(self) -> np.ndarray:
        if self._notes is None:
            self._notes = np.asarray([d.note.tokens for d in self.patients], dtype=np.int64)
        return self._notes

    def train_packages(self) -> List[frozenset]:
        return [self.packages[i] for i in self.split.train]


# ---------------------------------------------------------------------------
# Preprocessing

_PUNCT = re.compile(r"[^0-9a-z\s]+")


def lab_level(value: object, low: float, high: float, record_id: Optional[str] = None) -> LabLevel:
    """Classify a lab value against its closed normal range."""
    if isinstance(value, bool):
        raise PreprocessingError(f"lab value {value!r} is not numeric", record_id)
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise PreprocessingError(f"lab value {value!r} is not numeric", record_id) from None
    if np.isnan(number):
        raise PreprocessingError("lab value is NaN", record_id)
    if number > high:
        return LabLevel.ABNORMALLY_HIGH
    if number < low:
        return LabLevel.ABNORMALLY_LOW
    return LabLevel.NORMAL


def build_disease_document(
    demographics: Iterable[Tuple[str, str]],
    lab_results: Iterable[LabResult],
    vocab: DiseaseVocab,
    record_id: Optional[str] = None,
) -> DiseaseDocument:
    """Encode demographics and abnormal lab results as a 0/1 document.

    Normal lab results emit no bit. Entries missing from the vocabulary are
    skipped.
    """
    bits = [0] * len(vocab)
    for feature, value in demographics:
        idx = vocab.index.get(vocab.demographic_key(feature, value))
        if idx is None:
            logger.debug("Unknown demographic %s=%s skipped", feature, value)
            continue
        bits[idx] = 1
    for lab in lab_results:
        level = lab_level(lab.value, lab.low, lab.high, record_id)
        if level is LabLevel.NORMAL:
            continue
        idx = vocab.index.get(vocab.lab_key(lab.item, level))
        if idx is None:
            logger.debug("Unknown lab entry %s skipped", lab.item)
            continue
        bits[idx] = 1
    return DiseaseDocument(tuple(bits))


def tokenize_note(text: str, unit: str = "token") -> List[str]:
    cleaned = _PUNCT.sub(" ", (text or "").lower())
    if unit == "char":
        return [ch for ch in cleaned if not ch.isspace()]
    return cleaned.split()


def normalize_admission_note(
    text: str, q: int, token_vocab: TokenVocab, unit: str = "token"
) -> AdmissionTokens:
    """Strip punctuation, map to ids, then cut or pad to exactly ``q``."""
    if q <= 0:
        raise ConfigurationError(f"note length q must be positive, got {q}")
    ids = [token_vocab.lookup(tok) for tok in tokenize_note(text, unit)][:q]
    ids.extend([PAD_ID] * (q - len(ids)))
    return AdmissionTokens(tuple(ids))


def build_token_vocab(texts: Iterable[str], unit: str = "token") -> TokenVocab:
    counts: Counter = Counter()
    for text in texts:
        counts.update(tokenize_note(text, unit))
    ordered = sorted(counts, key=lambda tok: (-counts[tok], tok))
    return TokenVocab([PAD_TOKEN, UNK_TOKEN] + ordered)


# ---------------------------------------------------------------------------
# Relation matrix

def build_relation_matrix(labeled_pairs: Iterable[LabeledPair], M: int) -> RelationMatrix:
    """Collect directed interaction labels; unlisted pairs stay UNKNOWN.

    Raises:
        ConfigurationError: A label uses an out-of-range drug, UNKNOWN class
            or a self pair.
        RelationConflictError: Two labels disagree on the same directed pair.
    """
    R = np.full((M, M), int(InteractionClass.UNKNOWN), dtype=np.int8)
    conflicts: List[Tuple[int, int, int, int]] = []
    for pair in labeled_pairs:
        a, b = int(pair.drug_a), int(pair.drug_b)
        cls = InteractionClass(pair.cls)
        if cls not in LABELED_CLASSES:
            raise ConfigurationError(f"label ({a}, {b}) has class {cls.name}")
        if not (0 <= a < M and 0 <= b < M) or a == b:
            raise ConfigurationError(f"label ({a}, {b}) is not a pair of distinct drugs < {M}")
        direction = Direction(pair.direction)
        targets = {
            Direction.A_TO_B: [(a, b)],
            Direction.B_TO_A: [(b, a)],
            Direction.BIDIRECTION: [(a, b), (b, a)],
        }[direction]
        for i, j in targets:
            current = int(R[i, j])
            if current == InteractionClass.UNKNOWN:
                R[i, j] = int(cls)
            elif current != int(cls):
                conflicts.append((i, j, current, int(cls)))
    if conflicts:
        raise RelationConflictError(conflicts)
    return RelationMatrix(R)


def holdout_labels(
    relation: RelationMatrix, share: float, seed: int
) -> Tuple[RelationMatrix, Dict[Tuple[int, int], int]]:
    """Hide a random share of the labeled drug pairs.

    Returns the relation with the chosen pairs reset to UNKNOWN in both
    directions, and the hidden directed entries with their classes.
    """
    if not 0.0 <= share < 1.0:
        raise ConfigurationError(f"holdout share must be in [0, 1), got {share}")
    R = relation.R
    rows, cols = np.nonzero(R != InteractionClass.UNKNOWN)
    pairs = sorted({(min(a, b), max(a, b)) for a, b in zip(rows.tolist(), cols.tolist())})
    n = int(round(share * len(pairs)))
    picked = np.random.default_rng(seed).choice(len(pairs), size=n, replace=False) if n else []
    kept = R.copy()
    hidden: Dict[Tuple[int, int], int] = {}
    for idx in sorted(int(i) for i in picked):
        a, b = pairs[idx]
        for x, y in ((a, b), (b, a)):
            if R[x, y] != InteractionClass.UNKNOWN:
                hidden[(x, y)] = int(R[x, y])
            kept[x, y] = int(InteractionClass.UNKNOWN)
    return RelationMatrix(kept), hidden


def relation_to_labels(relation: RelationMatrix) -> List[LabeledPair]:
    """Inverse of build_relation_matrix, merging symmetric entries."""
    R = relation.R
    pairs: List[LabeledPair] = []
    rows, cols = np.nonzero(R != InteractionClass.UNKNOWN)
    seen = set()
    for a, b in zip(rows.tolist(), cols.tolist()):
        lo, hi = min(a, b), max(a, b)
        if (lo, hi) in seen:
            continue
        seen.add((lo, hi))
        forward, backward = int(R[lo, hi]), int(R[hi, lo])
        if forward == backward:
            pairs.append(LabeledPair(lo, hi, InteractionClass(forward), Direction.BIDIRECTION))
            continue
        if forward != InteractionClass.UNKNOWN:
            pairs.append(LabeledPair(lo, hi, InteractionClass(forward), Direction.A_TO_B))
        if backward != InteractionClass.UNKNOWN:
            pairs.append(LabeledPair(lo, hi, InteractionClass(backward), Direction.B_TO_A))
    return pairs


def labels_to_text(pairs: Sequence[LabeledPair]) -> str:
    frame = pd.DataFrame(
        {
            "drug_a": [p.drug_a for p in pairs],
            "drug_b": [p.drug_b for p in pairs],
            "class": [InteractionClass(p.cls).name for p in pairs],
            "direction": [Direction(p.direction).value for p in pairs],
        },
        columns=["drug_a", "drug_b", "class", "direction"],
    )
    return frame.to_csv(sep="\t", index=False, lineterminator="\n")


def labels_from_text(text: str) -> List[LabeledPair]:
    frame = pd.read_csv(io.StringIO(text), sep="\t", dtype={"class": str, "direction": str})
    return [
        LabeledPair(int(a), int(b), InteractionClass[cls], Direction(direction))
        for a, b, cls, direction in zip(frame["drug_a"], frame["drug_b"], frame["class"], frame["direction"])
    ]


# ---------------------------------------------------------------------------
# Synthetic generator

DEMOGRAPHIC_VALUES: Dict[str, Tuple[str, ...]] = {
    "gender": ("male", "female"),
    "age": ("infant", "child", "teenager", "adult", "senior"),
    "insurance": ("public", "private", "self pay"),
    "surgery": ("yes", "no"),
    "pregnant": ("yes", "no"),
}

LAB_ITEMS = (
    "glucose", "creatinine", "alt", "ast", "hemoglobin", "wbc", "platelets",
    "potassium", "sodium", "bilirubin", "albumin", "crp", "ldl", "inr",
    "bun", "troponin",
)

GENERIC_WORDS = (
    "patient", "admitted", "with", "history", "of", "reports", "denies",
    "since", "days", "weeks", "the", "and", "on", "exam", "noted", "mild",
    "severe", "no", "known", "allergies", "presents", "for", "evaluation",
    "stable", "vitals", "initial", "plan", "monitor", "status", "post",
    "family", "prior", "episode", "intermittent", "acute", "chronic",
)

SYMPTOM_WORDS = (
    "fever", "cough", "dyspnea", "chest", "pain", "abdominal", "nausea",
    "vomiting", "edema", "jaundice", "fatigue", "headache", "dizziness",
    "rash", "hypertension", "diabetes", "infection", "bleeding", "fracture",
    "gallstones", "renal", "hepatic", "cardiac", "arrhythmia", "pneumonia",
    "seizure", "anemia", "wound", "swelling", "thirst", "palpitations",
    "weakness", "confusion", "diarrhea", "urinary", "pregnancy",
)


def disease_vocab_for(n_lab_items: int) -> Tuple[DiseaseVocab, List[str]]:
    items = [LAB_ITEMS[i] if i < len(LAB_ITEMS) else f"lab{i}" for i in range(n_lab_items)]
    entries = [DiseaseVocab.demographic_key(f, v) for f, values in DEMOGRAPHIC_VALUES.items() for v in values]
    for item in items:
        entries.append(DiseaseVocab.lab_key(item, LabLevel.ABNORMALLY_HIGH))
        entries.append(DiseaseVocab.lab_key(item, LabLevel.ABNORMALLY_LOW))
    return DiseaseVocab(entries), items


def _plant_interactions(
    rng: np.random.Generator, cfg: GeneratorConfig, affinity: np.ndarray
) -> List[LabeledPair]:
    M = cfg.n_drugs
    total = max(3, int(round(cfg.interaction_density * M * (M - 1) / 2)))
    n_syn = int(round(total * cfg.synergy_share))
    n_ant = int(round(total * cfg.antagonism_share))
    n_none = max(0, total - n_syn - n_ant)
    taken = set()
    pairs: List[LabeledPair] = []

    def draw(cls: InteractionClass, count: int, same_condition: bool) -> None:
        attempts = 0
        made = 0
        while made < count and attempts < 50 * count + 100:
            attempts += 1
            if same_condition:
                k = int(rng.integers(affinity.shape[0]))
                a, b = rng.choice(M, size=2, replace=False, p=affinity[k])
            else:
                a, b = rng.choice(M, size=2, replace=False)
            a, b = int(a), int(b)
            key = (min(a, b), max(a, b))
            if key in taken:
                continue
            taken.add(key)
            if cls is InteractionClass.NO_INTERACTION:
                direction = Direction.BIDIRECTION
            else:
                direction = [Direction.A_TO_B, Direction.B_TO_A, Direction.BIDIRECTION][
                    int(rng.choice(3, p=[0.4, 0.2, 0.4]))
                ]
            pairs.append(LabeledPair(a, b, cls, direction))
            made += 1

    draw(InteractionClass.SYNERGISM, n_syn, True)
    draw(InteractionClass.ANTAGONISM, n_ant, True)
    draw(InteractionClass.NO_INTERACTION, n_none, False)
    return pairs


def _draw_note(rng: np.random.Generator, keywords: Sequence[str], length: int) -> str:
    words = []
    for _ in range(max(1, int(rng.poisson(length)))):
        pool = keywords if rng.random() < 0.35 else GENERIC_WORDS
        word = str(pool[int(rng.integers(len(pool)))])
        if rng.random() < 0.1:
            word += "," if rng.random() < 0.5 else "."
        words.append(word)
    words[0] = words[0].capitalize()
    return " ".join(words)


def _draw_lab(rng: np.random.Generator, item: str, low: float, high: float, push: int) -> LabResult:
    # push: +1 abnormally high, -1 abnormally low, 0 normal
    if push > 0:
        value = high * rng.uniform(1.05, 1.6)
    elif push < 0:
        value = low * rng.uniform(0.4, 0.95)
    else:
        value = rng.uniform(low, high)
    return LabResult(item, round(float(value), 2), low, high)


SYNERGY_BOOST = 4.0
ANTAGONISM_DAMP = 0.05


def _interaction_draw(
    rng: np.random.Generator,
    weights: np.ndarray,
    count: int,
    synergy: Dict[int, List[int]],
    antagonism: Dict[int, List[int]],
    chosen: Sequence[int] = (),
) -> List[int]:
    """Draw ``count`` new drugs one at a time without replacement.

    Synergistic partners of every drug already in the package are boosted and
    antagonistic partners suppressed.
    """
    w = np.array(weights, dtype=np.float64)

    def take(d: int) -> None:
        w[d] = 0.0
        for partner in synergy.get(d, ()):
            w[partner] *= SYNERGY_BOOST
        for partner in antagonism.get(d, ()):
            w[partner] *= ANTAGONISM_DAMP

    for d in chosen:
        take(d)
    drawn: List[int] = []
    for _ in range(count):
        total = w.sum()
        if total <= 0:
            break
        d = int(rng.choice(len(w), p=w / total))
        drawn.append(d)
        take(d)
    return drawn


def regimen_sizes(cfg: GeneratorConfig) -> List[int]:
    """Core sizes of one condition's regimens, evenly spread around the mean."""
    base = (cfg.mean_package_size - cfg.extra_drugs) / cfg.core_keep
    offsets = np.linspace(-1.0, 1.0, cfg.n_regimens) if cfg.n_regimens > 1 else np.zeros(1)
    return [int(np.clip(round(base * (1.0 + cfg.regimen_size_spread * o)), 2, cfg.n_drugs - 1)) for o in offsets]


def generate_raw_records(
    cfg: GeneratorConfig,
) -> Tuple[List[RawRecord], List[LabeledPair], DiseaseVocab]:
    """Draw raw EMR-like records with planted drug interactions.

    Each patient has a primary condition (and sometimes a secondary one) and
    is treated with one of that condition's regimens. The condition drives
    abnormal lab results and admission-note keywords; the regimen adds its
    own marker lab and keywords. A package is the regimen's core with a few
    drugs left out, plus a few extra drugs from the condition's distribution.
    Regimen cores and extras are drawn one drug at a time; synergistic
    partners of already chosen drugs are boosted and antagonistic partners
    suppressed.
    """
    rng = np.random.default_rng(cfg.seed)
    M, K = cfg.n_drugs, cfg.n_conditions
    vocab, items = disease_vocab_for(cfg.n_lab_items)
    ranges = []
    for _ in items:
        low = float(np.round(rng.uniform(5.0, 100.0), 1))
        ranges.append((low, float(np.round(low * rng.uniform(1.3, 2.0), 1))))

    popularity = 1.0 / np.arange(1, M + 1) ** 0.8
    popularity = popularity[rng.permutation(M)]
    popularity /= popularity.sum()
    affinity = rng.dirichlet(np.full(M, 0.15), size=K)
    affinity = 0.85 * affinity + 0.15 * popularity
    affinity /= affinity.sum(axis=1, keepdims=True)

    profiles = []
    for _ in range(K):
        lab_idx = rng.choice(len(items), size=min(3, len(items)), replace=False)
        profiles.append({
            "labs": {int(i): (1 if rng.random() < 0.5 else -1) for i in lab_idx},
            "keywords": [SYMPTOM_WORDS[int(j)] for j in rng.choice(len(SYMPTOM_WORDS), 6, replace=False)],
            "age": int(rng.integers(len(DEMOGRAPHIC_VALUES["age"]))),
            "surgery": float(rng.uniform(0.1, 0.9)),
        })

    labels = _plant_interactions(rng, cfg, affinity)
    synergy: Dict[int, List[int]] = {}
    antagonism: Dict[int, List[int]] = {}
    for pair in labels:
        if pair.cls is InteractionClass.SYNERGISM:
            target = synergy
        elif pair.cls is InteractionClass.ANTAGONISM:
            target = antagonism
        else:
            continue
        target.setdefault(pair.drug_a, []).append(pair.drug_b)
        target.setdefault(pair.drug_b, []).append(pair.drug_a)

    sizes = regimen_sizes(cfg)
    for k, profile in enumerate(profiles):
        free = [i for i in range(len(items)) if i not in profile["labs"]] or list(range(len(items)))
        order = rng.permutation(len(free))
        profile["regimens"] = [
            {
                "core": _interaction_draw(rng, affinity[k], size, synergy, antagonism),
                "marker": (int(free[order[r % len(free)]]), 1 if rng.random() < 0.5 else -1),
                "keywords": [SYMPTOM_WORDS[int(j)] for j in rng.choice(len(SYMPTOM_WORDS), 3, replace=False)],
            }
            for r, size in enumerate(sizes)
        ]

    records: List[RawRecord] = []
    ages = DEMOGRAPHIC_VALUES["age"]
    for n in range(cfg.n_patients):
        k = int(rng.integers(K))
        profile = profiles[k]
        regimen = profile["regimens"][int(rng.integers(cfg.n_regimens))]
        weights = affinity[k].copy()
        if rng.random() < 0.3:
            k2 = int(rng.integers(K))
            weights = 0.7 * weights + 0.3 * affinity[k2]

        gender = "male" if rng.random() < 0.5 else "female"
        age = ages[profile["age"]] if rng.random() < 0.6 else ages[int(rng.integers(len(ages)))]
        pregnant = "yes" if gender == "female" and age == "adult" and rng.random() < 0.15 else "no"
        demographics = (
            ("gender", gender),
            ("age", age),
            ("insurance", DEMOGRAPHIC_VALUES["insurance"][int(rng.integers(3))]),
            ("surgery", "yes" if rng.random() < profile["surgery"] else "no"),
            ("pregnant", pregnant),
        )
        marker_item, marker_push = regimen["marker"]
        labs = []
        for i, item in enumerate(items):
            low, high = ranges[i]
            push = 0
            if i in profile["labs"] and rng.random() < 0.8:
                push = profile["labs"][i]
            elif i == marker_item and rng.random() < 0.85:
                push = marker_push
            elif rng.random() < 0.05:
                push = 1 if rng.random() < 0.5 else -1
            labs.append(_draw_lab(rng, item, low, high, push))
        note = _draw_note(rng, profile["keywords"] + regimen["keywords"], cfg.note_length)

        core = regimen["core"]
        kept = [d for d in core if rng.random() < cfg.core_keep]
        if len(kept) < 2:
            kept = list(core[:2])
        extras = _interaction_draw(rng, weights, int(rng.poisson(cfg.extra_drugs)), synergy, antagonism, kept)
        records.append(RawRecord(
            record_id=f"P{n:06d}",
            demographics=demographics,
            lab_results=tuple(labs),
            admission_note=note,
            drugs=frozenset(kept + extras),
        ))
    return records, labels, vocab


def split_indices(n: int, rng: np.random.Generator) -> Split:
    """Disjoint 80/10/10 train/valid/test partition."""
    perm = rng.permutation(n)
    n_train = int(0.8 * n)
    n_valid = int(0.1 * n)
    return Split(
        train=sorted(perm[:n_train].tolist()),
        valid=sorted(perm[n_train:n_train + n_valid].tolist()),
        test=sorted(perm[n_train + n_valid:].tolist()),
    )


def preprocess_records(
    records: Sequence[RawRecord],
    labels: Sequence[LabeledPair],
    vocab: DiseaseVocab,
    n_drugs: int,
    q: int,
    seed: int,
    note_unit: str = "token",
    metadata: Optional[Dict[str, object]] = None,
) -> Corpus:
    """Turn raw records into a Corpus.

    Records with fewer than two drugs, out-of-range drug ids or unusable lab
    values are dropped with a warning. The token vocabulary is built from the
    training split only.
    """
    kept: List[Tuple[RawRecord, DiseaseDocument]] = []
    for record in records:
        if len(record.drugs) < 2:
            logger.warning("Dropping %s: fewer than two drugs", record.record_id)
            continue
        if any(not (0 <= d < n_drugs) for d in record.drugs):
            logger.warning("Dropping %s: drug id outside [0, %d)", record.record_id, n_drugs)
            continue
        try:
            doc = build_disease_document(record.demographics, record.lab_results, vocab, record.record_id)
        except PreprocessingError as exc:
            logger.warning("Dropping record: %s", exc)
            continue
        kept.append((record, doc))
    if len(kept) < 10:
        raise ConfigurationError(f"only {len(kept)} usable records; need at least 10")

    split = split_indices(len(kept), np.random.default_rng(seed + 1))
    token_vocab = build_token_vocab((kept[i][0].admission_note for i in split.train), note_unit)
    patients = [
        PatientDescription(doc, normalize_admission_note(rec.admission_note, q, token_vocab, note_unit))
        for rec, doc in kept
    ]
    relation = build_relation_matrix(labels, n_drugs)
    meta = dict(metadata or {})
    meta.update({
        "format_version": FORMAT_VERSION,
        "N": len(kept), "M": n_drugs, "p": len(vocab), "q": q,
        "seed": seed, "note_unit": note_unit,
    })
    return Corpus(
        patients=patients,
        packages=[frozenset(rec.drugs) for rec, _ in kept],
        relation=relation,
        disease_vocab=vocab,
        token_vocab=token_vocab,
        split=split,
        record_ids=[rec.record_id for rec, _ in kept],
        drug_names=[f"drug_{j:03d}" for j in range(n_drugs)],
        metadata=meta,
    )


def generate_synthetic_corpus(cfg: GeneratorConfig) -> Corpus:
    """Generate a deterministic synthetic corpus for ``cfg.seed``."""
    records, labels, vocab = generate_raw_records(cfg)
    corpus = preprocess_records(
        records, labels, vocab, cfg.n_drugs, cfg.q, cfg.seed, cfg.note_unit,
        metadata={"generator": cfg.model_dump()},
    )
    stats = corpus_statistics(corpus)
    logger.info(
        "Generated corpus: N=%d M=%d p=%d mean package size %.2f, %d labeled pairs",
        corpus.N, corpus.M, corpus.p, stats["mean_package_size"], stats["labeled_pairs"],
    )
    return corpus


def corpus_statistics(corpus: Corpus) -> Dict[str, object]:
    R = corpus.relation.R
    upper = np.triu_indices(corpus.M, k=1)
    by_class = {}
    for cls in LABELED_CLASSES:
        hit = (R[upper] == cls) | (R.T[upper] == cls)
        by_class[cls.name] = int(hit.sum())
    return {
        "records": corpus.N,
        "drugs": corpus.M,
        "disease_document_width": corpus.p,
        "note_length": corpus.q,
        "mean_package_size": float(np.mean([len(p) for p in corpus.packages])),
        "labeled_pairs": int(((R != InteractionClass.UNKNOWN) | (R.T != InteractionClass.UNKNOWN))[upper].sum()),
        "pairs_by_class": by_class,
        "split_sizes": {
            "train": len(corpus.split.train),
            "valid": len(corpus.split.valid),
            "test": len(corpus.split.test),
        },
    }


# ---------------------------------------------------------------------------
# Serialization

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def corpus_to_text(corpus: Corpus) -> str:
    split_of = {}
    for name in ("train", "valid", "test"):
        for i in getattr(corpus.split, name):
            split_of[i] = name
    header = {
        **{k: v for k, v in corpus.metadata.items()},
        "disease_vocab": corpus.disease_vocab.entries,
        "token_vocab": corpus.token_vocab.tokens,
        "drug_names": corpus.drug_names,
    }
    lines = [_dumps(header)]
    for i, patient in enumerate(corpus.patients):
        lines.append(_dumps({
            "id": corpus.record_ids[i],
            "split": split_of[i],
            "disease": patient.disease.indices,
            "note": list(patient.note.tokens),
            "drugs": sorted(corpus.packages[i]),
        }))
    return "\n".join(lines) + "\n"


def corpus_from_text(corpus_text: str, labels_text: str) -> Corpus:
    lines = corpus_text.splitlines()
    header = json.loads(lines[0])
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported corpus format {header.get('format_version')}")
    vocab = DiseaseVocab(header.pop("disease_vocab"))
    token_vocab = TokenVocab(header.pop("token_vocab"))
    drug_names = header.pop("drug_names")
    p, M = int(header["p"]), int(header["M"])
    patients, packages, ids = [], [], []
    split = Split([], [], [])
    for i, line in enumerate(lines[1:]):
        rec = json.loads(line)
        bits = [0] * p
        for j in rec["disease"]:
            bits[j] = 1
        patients.append(PatientDescription(DiseaseDocument(tuple(bits)), AdmissionTokens(tuple(rec["note"]))))
        packages.append(frozenset(rec["drugs"]))
        ids.append(rec["id"])
        getattr(split, rec["split"]).append(i)
    relation = build_relation_matrix(labels_from_text(labels_text), M)
    return Corpus(patients, packages, relation, vocab, token_vocab, split, ids, drug_names, header)


def save_corpus(corpus: Corpus, workdir: str) -> List[str]:
    os.makedirs(workdir, exist_ok=True)
    corpus_path = os.path.join(workdir, CORPUS_FILE)
    labels_path = os.path.join(workdir, LABELS_FILE)
    with open(corpus_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(corpus_to_text(corpus))
    with open(labels_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(labels_to_text(relation_to_labels(corpus.relation)))
    logger.info("Saved corpus to %s", corpus_path)
    return [corpus_path, labels_path]


def load_corpus(workdir: str) -> Corpus:
    with open(os.path.join(workdir, CORPUS_FILE), "r", encoding="utf-8") as f:
        corpus_text = f.read()
    with open(os.path.join(workdir, LABELS_FILE), "r", encoding="utf-8") as f:
        labels_text = f.read()
    return corpus_from_text(corpus_text, labels_text)


def corpus_fingerprint(corpus: Corpus) -> str:
    digest = hashlib.sha256()
    digest.update(corpus_to_text(corpus).encode("utf-8"))
    digest.update(labels_to_text(relation_to_labels(corpus.relation)).encode("utf-8"))
    return digest.hexdigest()
