import math

import numpy as np
import pytest
import torch

from config import VARIANTS, parse_config
from corpus import LabResult
from dpr_ag import DprAg
from dpr_wg import DprWg
from embedding import patient_tensors
from errors import ConfigurationError, StageError, UnknownVariantError
from graph import collate_graphs
from recommend import (
    CandidateSource,
    RecommendationService,
    Recommender,
    baseline_k,
    candidate_set,
    evaluate,
    evaluate_models,
    export_masks,
    ncf_topk_baseline,
    nn_baseline,
    rank_candidates,
    reports_frame,
    run_sweep,
    train_variant,
    variant_options,
)

from conftest import make_corpus, tiny_config_data, tiny_train


class FixedScores:
    """Stand-in pre-trained model whose matching scores are fixed."""

    def __init__(self, scores):
        self.scores = torch.tensor([scores])

    def score_all(self, u):
        return self.scores


class TestEvaluate:
    def test_partial_overlap(self):
        precision, recall, f1 = evaluate(frozenset("abcd"), frozenset("abe"))
        assert precision == 0.5
        assert recall == pytest.approx(2 / 3)
        assert f1 == pytest.approx(4 / 7)

    def test_exact_match(self):
        assert evaluate(frozenset({1, 2}), frozenset({1, 2})) == (1.0, 1.0, 1.0)

    def test_empty_recommendation_scores_zero(self):
        assert evaluate(frozenset(), frozenset({1})) == (0.0, 0.0, 0.0)

    def test_empty_truth_rejected(self):
        with pytest.raises(ConfigurationError):
            evaluate(frozenset({1}), frozenset())

    def test_f1_between_precision_and_recall_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            rec = frozenset(rng.choice(20, size=int(rng.integers(1, 10)), replace=False).tolist())
            truth = frozenset(rng.choice(20, size=int(rng.integers(1, 10)), replace=False).tolist())
            precision, recall, f1 = evaluate(rec, truth)
            assert 0.0 <= f1 <= 1.0
            assert min(precision, recall) - 1e-12 <= f1 <= max(precision, recall) + 1e-12


class TestCandidateSet:
    PACKAGES = [frozenset({0}), frozenset({1}), frozenset({2})]

    def test_identical_patient_comes_first(self):
        embeddings = np.array([[1.0, 0.0], [0.3, 0.9], [0.5, 0.5]])
        assert candidate_set(embeddings[1], embeddings, self.PACKAGES, k=3)[0] == frozenset({1})

    def test_single_candidate(self):
        embeddings = np.array([[1.0, 0.0], [0.3, 0.9], [0.5, 0.5]])
        assert candidate_set(np.array([0.0, 1.0]), embeddings, self.PACKAGES, k=1) == [frozenset({1})]

    def test_order_follows_angle(self):
        embeddings = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        assert candidate_set(np.array([1.0, 0.2]), embeddings, self.PACKAGES, k=3) == self.PACKAGES

    def test_scaling_the_query_changes_nothing(self):
        rng = np.random.default_rng(1)
        embeddings = rng.normal(size=(3, 4))
        u = rng.normal(size=4)
        assert candidate_set(u, embeddings, self.PACKAGES, 3) == candidate_set(7.5 * u, embeddings, self.PACKAGES, 3)

    def test_large_k_returns_every_package(self):
        embeddings = np.eye(3)
        assert len(candidate_set(np.ones(3), embeddings, self.PACKAGES, k=50)) == 3

    def test_ties_go_to_lower_index(self):
        embeddings = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
        packages = [frozenset({5}), frozenset({6}), frozenset({7})]
        assert candidate_set(np.array([1.0, 0.0]), embeddings, packages, k=2) == [frozenset({6}), frozenset({7})]

    def test_repeated_packages_kept_once(self):
        embeddings = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
        packages = [frozenset({1, 2}), frozenset({1, 2}), frozenset({3})]
        assert candidate_set(np.array([1.0, 0.0]), embeddings, packages, k=3) == [frozenset({1, 2}), frozenset({3})]

    def test_nearest_neighbour_baseline(self):
        embeddings = np.array([[1.0, 0.0], [0.0, 1.0]])
        packages = [frozenset({1}), frozenset({2, 3})]
        assert nn_baseline(np.array([0.1, 1.0]), embeddings, packages) == frozenset({2, 3})


class TestRankCandidates:
    def test_descending_scores(self):
        candidates = [frozenset({0}), frozenset({1}), frozenset({2})]
        ranked = rank_candidates(lambda cs: [0.2, 0.9, 0.5], candidates)
        assert [c.package for c in ranked] == [frozenset({1}), frozenset({2}), frozenset({0})]
        assert all(c.source is CandidateSource.SIMILAR_PATIENT for c in ranked)

    def test_equal_scores_keep_input_order(self):
        candidates = [frozenset({3}), frozenset({1}), frozenset({2})]
        ranked = rank_candidates(lambda cs: [1.0] * len(cs), candidates)
        assert [c.package for c in ranked] == candidates

    def test_input_order_does_not_change_the_winner(self):
        scores = {frozenset({0}): 0.1, frozenset({1}): 0.7, frozenset({2}): 0.3}
        score_fn = lambda cs: [scores[c] for c in cs]  # noqa: E731
        forward = rank_candidates(score_fn, list(scores))
        backward = rank_candidates(score_fn, list(reversed(list(scores))))
        assert forward[0].package == backward[0].package == frozenset({1})

    def test_empty_candidates_rejected(self):
        with pytest.raises(ConfigurationError):
            rank_candidates(lambda cs: [], [])


class TestNcfBaseline:
    def test_top_k_drugs(self):
        model = FixedScores([0.1, 0.9, 0.5, 0.9, 0.2])
        assert ncf_topk_baseline(torch.zeros(3), model, 2) == frozenset({1, 3})

    def test_monotone_transform_keeps_choice(self):
        scores = [0.1, 0.9, 0.5, 0.8, 0.2]
        transformed = [math.exp(3 * s) + 1 for s in scores]
        assert ncf_topk_baseline(torch.zeros(3), FixedScores(scores), 3) == ncf_topk_baseline(
            torch.zeros(3), FixedScores(transformed), 3
        )

    def test_k_equal_to_drug_count(self):
        assert ncf_topk_baseline(torch.zeros(3), FixedScores([0.3, 0.1, 0.2]), 3) == frozenset({0, 1, 2})

    def test_baseline_k_is_mean_training_size(self):
        corpus = make_corpus([{0, 1}, {0, 1, 2}, {3, 4, 5, 6}], 8)
        assert baseline_k(corpus) == 3


class TestVariants:
    def test_options(self):
        assert variant_options("WG-Context") == ("dpr-wg", {"use_context": False})
        assert variant_options("WG-Type") == ("dpr-wg", {"use_type": False})
        assert variant_options("AG-Mask") == ("dpr-ag", {"use_mask": False})
        assert variant_options("AG-Type") == ("dpr-ag", {"ce_weight": 0.0})
        assert variant_options("GNN-plain") == ("dpr-wg", {"use_context": False, "use_type": False})

    def test_options_are_copies(self):
        variant_options("AG-Type")[1].pop("ce_weight")
        assert variant_options("AG-Type")[1] == {"ce_weight": 0.0}

    def test_unknown_variant(self):
        with pytest.raises(UnknownVariantError):
            variant_options("WG-Mask")

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_trained_variant_switches_off_components(self, variant, synthetic_corpus, pretrained, tmp_path):
        config = parse_config(tiny_config_data(str(tmp_path), train={**tiny_config_data("")["train"], "epochs": 1}))
        model = train_variant(variant, synthetic_corpus, pretrained, config)
        family, options = variant_options(variant)
        assert isinstance(model, DprWg if family == "dpr-wg" else DprAg)
        for name, value in options.items():
            assert getattr(model, name) == value
        # the typed weights of the unlabelled baseline collapse to one
        if variant in ("WG-Type", "GNN-plain"):
            graphs = [Recommender(synthetic_corpus, pretrained).graph_for(p) for p in synthetic_corpus.packages[:5]]
            batch = collate_graphs(graphs)
            with torch.no_grad():
                u = model.encoder(*patient_tensors(synthetic_corpus, range(5)))
                e, _, _ = model.edge_weights(u, batch)
            assert torch.equal(e, torch.ones_like(e))


def test_sweep_has_one_row_per_setting(synthetic_corpus, pretrained, tmp_path):
    config = parse_config(tiny_config_data(
        str(tmp_path),
        train={**tiny_config_data("")["train"], "epochs": 1},
        sweep={"model": "dpr-wg", "thresholds": [0.0, 0.2], "layers": [2], "negative_ratios": [1]},
    ))
    frame = run_sweep(synthetic_corpus, pretrained, config)
    assert list(frame["parameter"]) == ["threshold", "threshold", "layers", "negative_ratio"]
    assert list(frame["value"]) == [0.0, 0.2, 2, 1]
    assert (frame["model"] == "dpr-wg").all()
    assert frame["f1"].between(0, 1).all()


class TestRecommender:
    @pytest.fixture(scope="class")
    def recommender(self, synthetic_corpus, pretrained):
        return Recommender(synthetic_corpus, pretrained)

    @pytest.fixture(scope="class")
    def wg_model(self, pretrained):
        torch.manual_seed(0)
        return DprWg.from_pretrained(pretrained, tiny_train())

    def test_baselines(self, recommender, synthetic_corpus):
        reports = evaluate_models(recommender, ["ncf", "nn"], {}, k=5)
        assert set(reports) == {"ncf", "nn"}
        assert len(reports["ncf"].patients) == len(synthetic_corpus.split.test)
        frame = reports_frame(reports)
        assert list(frame.columns) == ["model", "precision", "recall", "f1", "patients"]
        assert ((frame["f1"] >= 0) & (frame["f1"] <= 1)).all()

    def test_generated_candidates_never_lower_the_best_f1(self, recommender, wg_model):
        reports = evaluate_models(recommender, ["dpr-wg"], {"dpr-wg": wg_model}, k=5, heuristic=True)
        assert set(reports) == {"dpr-wg", "dpr-wg+heuristic", "best-candidate", "best-candidate+heuristic"}
        best, widened = reports["best-candidate"].f1, reports["best-candidate+heuristic"].f1
        assert all(w >= b for b, w in zip(best, widened))
        assert all(m <= b + 1e-12 for m, b in zip(reports["dpr-wg"].f1, best))

    def test_recommend_ranks_by_score(self, recommender, wg_model, synthetic_corpus):
        disease, notes = patient_tensors(synthetic_corpus, [synthetic_corpus.split.test[0]])
        ranked = recommender.recommend("dpr-wg", wg_model, disease, notes, k=5)
        assert 1 <= len(ranked) <= 5
        scores = [c.score for c in ranked]
        assert scores == sorted(scores, reverse=True)

    def test_recommend_with_heuristic_tags_provenance(self, recommender, wg_model, synthetic_corpus):
        disease, notes = patient_tensors(synthetic_corpus, [synthetic_corpus.split.test[0]])
        ranked = recommender.recommend("dpr-wg", wg_model, disease, notes, k=5, heuristic=True)
        assert {c.provenance for c in ranked} <= {"S1", "S2", "S3"}
        assert "S1" in {c.provenance for c in ranked}

    def test_package_model_required(self, recommender, synthetic_corpus):
        disease, notes = patient_tensors(synthetic_corpus, [0])
        with pytest.raises(ConfigurationError):
            recommender.recommend("dpr-ag", None, disease, notes)

    def test_export_masks(self, wg_model, synthetic_corpus):
        frame = export_masks(wg_model, synthetic_corpus, [0, 1, 2])
        assert list(frame.columns) == ["patient"] + [f"m{j}" for j in range(tiny_train().drug_dim)]
        values = frame.drop(columns="patient").to_numpy()
        assert ((values > 0) & (values < 1)).all()

    def test_masks_need_a_masked_model(self, pretrained, synthetic_corpus):
        model = DprWg.from_pretrained(pretrained, tiny_train(), use_context=False)
        with pytest.raises(ConfigurationError):
            export_masks(model, synthetic_corpus, [0])


class TestRecommendationService:
    def test_recommend_from_raw_inputs(self, pipeline_dir):
        service = RecommendationService(pipeline_dir)
        packages = service.recommend(
            [("gender", "female"), ("age", "senior")],
            [LabResult("glucose", 180, 65, 99)],
            "Fever and cough since two days.",
            model="dpr-wg",
            k=3,
        )
        assert [p["rank"] for p in packages] == list(range(1, len(packages) + 1))
        assert all(p["drugs"] and len(p["drugs"]) == len(p["drug_ids"]) for p in packages)
        assert service.loaded() == ["corpus", "ncf", "dpr-wg"]

    def test_baseline_needs_no_package_model(self, pipeline_dir):
        service = RecommendationService(pipeline_dir)
        packages = service.recommend([], [], "", model="ncf")
        assert len(packages) == 1
        assert packages[0]["provenance"] == "top-k"

    def test_unknown_model_rejected(self, pipeline_dir):
        with pytest.raises(ConfigurationError):
            RecommendationService(pipeline_dir).recommend([], [], "", model="gnn")

    def test_missing_workdir(self, tmp_path):
        with pytest.raises(StageError):
            RecommendationService(str(tmp_path / "nothing")).statistics()
