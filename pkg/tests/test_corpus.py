import numpy as np
import pytest

from config import GeneratorConfig
from corpus import (
    PAD_ID,
    UNK_ID,
    Direction,
    InteractionClass,
    LabeledPair,
    LabResult,
    RelationMatrix,
    build_disease_document,
    build_relation_matrix,
    build_token_vocab,
    corpus_fingerprint,
    corpus_statistics,
    corpus_to_text,
    disease_vocab_for,
    generate_synthetic_corpus,
    holdout_labels,
    labels_from_text,
    labels_to_text,
    load_corpus,
    normalize_admission_note,
    regimen_sizes,
    relation_to_labels,
    save_corpus,
)
from errors import ConfigurationError, PreprocessingError, RelationConflictError
from graph import cooccurrence_stats

from conftest import tiny_generator


class TestDiseaseDocument:
    @pytest.fixture
    def vocab(self):
        return disease_vocab_for(1)[0]

    def test_normal_glucose_sets_no_bit(self, vocab):
        doc = build_disease_document([("gender", "male")], [LabResult("glucose", 77, 65, 99)], vocab)
        assert [vocab.entries[i] for i in doc.indices] == ["gender: male"]

    def test_high_glucose_sets_bit(self, vocab):
        doc = build_disease_document([], [LabResult("glucose", 120, 65, 99)], vocab)
        assert [vocab.entries[i] for i in doc.indices] == ["glucose value: abnormally high"]

    def test_low_glucose_sets_bit(self, vocab):
        doc = build_disease_document([], [LabResult("glucose", 40, 65, 99)], vocab)
        assert [vocab.entries[i] for i in doc.indices] == ["glucose value: abnormally low"]

    def test_boundary_values_are_normal(self, vocab):
        for value in (65, 99):
            doc = build_disease_document([], [LabResult("glucose", value, 65, 99)], vocab)
            assert doc.indices == []

    def test_non_numeric_value_is_record_error(self, vocab):
        with pytest.raises(PreprocessingError) as exc:
            build_disease_document([], [LabResult("glucose", "high", 65, 99)], vocab, record_id="R1")
        assert exc.value.record_id == "R1"

    def test_length_is_vocab_width(self, vocab):
        doc = build_disease_document([("age", "adult")], [], vocab)
        assert len(doc.bits) == len(vocab)
        assert set(doc.bits) <= {0, 1}

    def test_deterministic(self, vocab):
        args = ([("gender", "female"), ("age", "senior")], [LabResult("glucose", 150, 65, 99)], vocab)
        assert build_disease_document(*args) == build_disease_document(*args)

    def test_vocab_is_bijective(self, vocab):
        assert sorted(vocab.index.values()) == list(range(len(vocab)))


class TestAdmissionNote:
    @pytest.fixture
    def vocab(self):
        return build_token_vocab(["fever cough pain rash dizziness nausea edema fatigue"])

    def test_short_note_is_padded(self, vocab):
        tokens = normalize_admission_note("fever cough pain rash dizziness", 8, vocab).tokens
        assert len(tokens) == 8
        assert tokens[5:] == (PAD_ID, PAD_ID, PAD_ID)
        assert PAD_ID not in tokens[:5]

    def test_long_note_is_cut(self, vocab):
        text = " ".join(["fever", "cough", "pain", "rash", "dizziness", "nausea"] * 2)
        tokens = normalize_admission_note(text, 8, vocab).tokens
        assert tokens == tuple(vocab.lookup(t) for t in text.split()[:8])

    def test_empty_note_is_all_padding(self, vocab):
        assert normalize_admission_note("", 4, vocab).tokens == (PAD_ID,) * 4

    def test_punctuation_is_stripped(self, vocab):
        tokens = normalize_admission_note("Fever, cough!", 3, vocab).tokens
        assert tokens == (vocab.lookup("fever"), vocab.lookup("cough"), PAD_ID)

    def test_unknown_word_maps_to_unk(self, vocab):
        assert normalize_admission_note("gallstones", 1, vocab).tokens == (UNK_ID,)

    def test_character_units(self):
        vocab = build_token_vocab(["ab c"], unit="char")
        tokens = normalize_admission_note("a b,c", 4, vocab, unit="char").tokens
        assert tokens == (vocab.lookup("a"), vocab.lookup("b"), vocab.lookup("c"), PAD_ID)

    def test_non_positive_length_rejected(self, vocab):
        with pytest.raises(ConfigurationError):
            normalize_admission_note("fever", 0, vocab)


class TestRelationMatrix:
    def test_directed_label(self):
        R = build_relation_matrix([LabeledPair(0, 1, InteractionClass.SYNERGISM, Direction.A_TO_B)], 3)
        assert R.get(0, 1) == InteractionClass.SYNERGISM
        assert R.get(1, 0) == InteractionClass.UNKNOWN

    def test_reverse_label(self):
        R = build_relation_matrix([LabeledPair(0, 1, InteractionClass.ANTAGONISM, Direction.B_TO_A)], 3)
        assert R.get(1, 0) == InteractionClass.ANTAGONISM
        assert R.get(0, 1) == InteractionClass.UNKNOWN

    def test_bidirectional_no_interaction(self):
        R = build_relation_matrix([LabeledPair(0, 2, InteractionClass.NO_INTERACTION, Direction.BIDIRECTION)], 3)
        assert R.get(0, 2) == R.get(2, 0) == InteractionClass.NO_INTERACTION

    def test_empty_labels(self):
        R = build_relation_matrix([], 4)
        assert (R.R == InteractionClass.UNKNOWN).all()

    def test_conflict_is_reported(self):
        labels = [
            LabeledPair(0, 1, InteractionClass.SYNERGISM, Direction.A_TO_B),
            LabeledPair(0, 1, InteractionClass.ANTAGONISM, Direction.BIDIRECTION),
        ]
        with pytest.raises(RelationConflictError) as exc:
            build_relation_matrix(labels, 3)
        assert exc.value.conflicts == [(0, 1, 1, 2)]

    def test_self_pair_rejected(self):
        with pytest.raises(ConfigurationError):
            build_relation_matrix([LabeledPair(1, 1, InteractionClass.SYNERGISM, Direction.A_TO_B)], 3)

    def test_label_file_round_trips_matrix(self):
        rng = np.random.default_rng(3)
        R = np.full((8, 8), -1, dtype=np.int8)
        for _ in range(20):
            a, b = rng.choice(8, size=2, replace=False)
            R[a, b] = rng.integers(0, 3)
        original = RelationMatrix(R)
        text = labels_to_text(relation_to_labels(original))
        assert build_relation_matrix(labels_from_text(text), 8) == original


class TestSyntheticCorpus:
    def test_same_seed_same_corpus(self):
        first = generate_synthetic_corpus(tiny_generator())
        second = generate_synthetic_corpus(tiny_generator())
        assert corpus_to_text(first) == corpus_to_text(second)
        assert first.relation == second.relation

    def test_other_seed_differs(self):
        first = generate_synthetic_corpus(tiny_generator(seed=1))
        second = generate_synthetic_corpus(tiny_generator(seed=2))
        assert corpus_to_text(first) != corpus_to_text(second)

    def test_split_partitions_80_10_10(self, synthetic_corpus):
        split = synthetic_corpus.split
        indices = split.train + split.valid + split.test
        assert sorted(indices) == list(range(synthetic_corpus.N))
        assert len(split.train) == int(0.8 * synthetic_corpus.N)
        assert len(split.valid) == int(0.1 * synthetic_corpus.N)

    def test_packages_have_two_or_more_drugs(self, synthetic_corpus):
        assert all(len(p) >= 2 for p in synthetic_corpus.packages)
        assert all(max(p) < synthetic_corpus.M for p in synthetic_corpus.packages)

    def test_notes_have_length_q(self, synthetic_corpus):
        assert synthetic_corpus.note_matrix().shape == (synthetic_corpus.N, synthetic_corpus.q)

    def test_save_is_byte_stable(self, synthetic_corpus, tmp_path):
        first = [open(p, "rb").read() for p in save_corpus(synthetic_corpus, str(tmp_path / "a"))]
        second = [open(p, "rb").read() for p in save_corpus(synthetic_corpus, str(tmp_path / "b"))]
        assert first == second

    def test_load_restores_corpus(self, synthetic_corpus, tmp_path):
        save_corpus(synthetic_corpus, str(tmp_path))
        loaded = load_corpus(str(tmp_path))
        assert corpus_fingerprint(loaded) == corpus_fingerprint(synthetic_corpus)
        assert loaded.packages == synthetic_corpus.packages
        assert loaded.relation == synthetic_corpus.relation

    def test_statistics(self, synthetic_corpus):
        stats = corpus_statistics(synthetic_corpus)
        assert stats["records"] == synthetic_corpus.N
        assert stats["drugs"] == synthetic_corpus.M
        assert sum(stats["pairs_by_class"].values()) >= stats["labeled_pairs"]

    def test_invalid_generator_config_rejected(self):
        with pytest.raises(ValueError):
            GeneratorConfig(n_drugs=10, mean_package_size=12.0)

    def test_regimen_sizes_spread_around_the_mean(self):
        assert regimen_sizes(GeneratorConfig()) == [9, 19, 28]
        assert regimen_sizes(GeneratorConfig(n_regimens=1)) == [19]

    def test_packages_are_regimen_cores_without_noise(self):
        cfg = tiny_generator(core_keep=1.0, extra_drugs=0.0)
        corpus = generate_synthetic_corpus(cfg)
        assert len(set(corpus.packages)) <= cfg.n_conditions * cfg.n_regimens
        assert {len(p) for p in corpus.packages} <= set(regimen_sizes(cfg))

    def test_extra_drugs_must_leave_room_for_a_core(self):
        with pytest.raises(ValueError):
            GeneratorConfig(mean_package_size=4.0, extra_drugs=4.0)


class TestHoldoutLabels:
    @pytest.fixture
    def relation(self):
        return build_relation_matrix([
            LabeledPair(0, 1, InteractionClass.SYNERGISM, Direction.A_TO_B),
            LabeledPair(2, 3, InteractionClass.ANTAGONISM, Direction.BIDIRECTION),
            LabeledPair(4, 5, InteractionClass.NO_INTERACTION, Direction.BIDIRECTION),
            LabeledPair(1, 6, InteractionClass.SYNERGISM, Direction.B_TO_A),
        ], 7)

    def test_hides_whole_pairs(self, relation):
        kept, hidden = holdout_labels(relation, 0.5, seed=3)
        assert len({frozenset(key) for key in hidden}) == 2
        for (a, b), cls in hidden.items():
            assert relation.R[a, b] == cls
            assert kept.R[a, b] == InteractionClass.UNKNOWN
            assert kept.R[b, a] == InteractionClass.UNKNOWN
        labeled = int((relation.R != InteractionClass.UNKNOWN).sum())
        assert int((kept.R != InteractionClass.UNKNOWN).sum()) + len(hidden) == labeled

    def test_untouched_entries_are_kept(self, relation):
        kept, hidden = holdout_labels(relation, 0.5, seed=3)
        pairs = {frozenset(key) for key in hidden}
        for a in range(7):
            for b in range(7):
                if frozenset((a, b)) not in pairs:
                    assert kept.R[a, b] == relation.R[a, b]

    def test_zero_share_hides_nothing(self, relation):
        kept, hidden = holdout_labels(relation, 0.0, seed=3)
        assert kept == relation
        assert hidden == {}

    def test_same_seed_same_split(self, relation):
        assert holdout_labels(relation, 0.5, seed=3)[1] == holdout_labels(relation, 0.5, seed=3)[1]

    def test_share_of_one_rejected(self, relation):
        with pytest.raises(ConfigurationError):
            holdout_labels(relation, 1.0, seed=3)

    def test_default_scale_shape(self):
        corpus = generate_synthetic_corpus(GeneratorConfig())
        stats = corpus_statistics(corpus)
        assert abs(stats["mean_package_size"] - 18.0) <= 2.0

        # planted synergism raises co-occurrence above the typical pair
        co = cooccurrence_stats(corpus.packages, corpus.M)
        props = co.proportions[~np.eye(corpus.M, dtype=bool)]
        R = corpus.relation.R
        rows, cols = np.nonzero(R == InteractionClass.SYNERGISM)
        planted = [max(co.p(a, b), co.p(b, a)) for a, b in zip(rows, cols)]
        assert np.mean(planted) > np.median(props)
