import math

import numpy as np
import pytest
import torch

from corpus import Direction, InteractionClass, LabeledPair, build_relation_matrix
from dpr_wg import (
    DprWg,
    GatedReadout,
    WgLayer,
    conditional_drug_embedding,
    contextual_impact_factor,
    edge_weight_tensor,
    export_impact_factors,
    graph_readout,
    init_edge_weights,
    mask_vector,
    train_wg,
    wg_score,
)
from embedding import NcfModel, patient_tensors
from errors import SamplingError
from gradcheck import compare_gradients
from graph import collate_graphs, construct_package_graph, cooccurrence_stats, corpus_graphs
from layers import mlp
from trainer import PatientSampler, package_batch_loss

from conftest import GRAD_TRAIN, jitter, make_corpus, tiny_train

PACKAGES = [{0, 1}, {1, 2, 3}, {0, 4}, {2, 5}, {3, 6, 7}, {0, 1, 5}, {4, 6}, {2, 7}, {1, 3}, {5, 6}]


def zero_(module):
    with torch.no_grad():
        for param in module.parameters():
            param.zero_()


def ncf_for(corpus, **train):
    torch.manual_seed(0)
    return NcfModel(corpus.p, len(corpus.token_vocab), corpus.M, tiny_train(**train))


class TestInitialEdgeWeights:
    def test_weights_follow_relation_then_proportion(self):
        labels = [
            LabeledPair(0, 1, InteractionClass.SYNERGISM, Direction.A_TO_B),
            LabeledPair(1, 2, InteractionClass.ANTAGONISM, Direction.A_TO_B),
            LabeledPair(0, 2, InteractionClass.NO_INTERACTION, Direction.A_TO_B),
        ]
        R = build_relation_matrix(labels, 4)
        stats = cooccurrence_stats([{0, 1, 2}, {0, 1}, {0, 3}], 4)
        graph = construct_package_graph({0, 1, 2}, R, stats)
        weights = dict(zip(graph.edges(), init_edge_weights(graph, R, stats)))
        assert weights[(0, 1)] == 1.0
        assert weights[(1, 2)] == -1.0
        assert weights[(0, 2)] == pytest.approx(1 / 3)
        assert weights[(1, 0)] == pytest.approx(1.0)
        assert weights[(2, 1)] == pytest.approx(1.0)
        assert weights[(2, 0)] == pytest.approx(1.0)

    def test_batched_weights_match(self, synthetic_corpus):
        stats, graphs = corpus_graphs(synthetic_corpus)
        graphs = [g for g in graphs if g is not None]
        batch = collate_graphs(graphs)
        expected = np.concatenate([init_edge_weights(g, synthetic_corpus.relation, stats) for g in graphs])
        actual = edge_weight_tensor(batch.edge_relation, batch.edge_p).numpy()
        assert np.allclose(actual, expected)
        assert ((actual >= -1.0) & (actual <= 1.0)).all()


class TestMaskAndFactor:
    def test_zero_mask_network_halves_embedding(self):
        net = mlp(3, 3, 4)
        zero_(net)
        assert torch.equal(mask_vector(torch.randn(3), net), torch.full((3,), 0.5))
        d = torch.tensor([2.0, -4.0, 6.0])
        assert torch.allclose(conditional_drug_embedding(torch.randn(3), d, net), torch.tensor([1.0, -2.0, 3.0]))

    def test_mask_lies_strictly_inside_unit_interval(self):
        torch.manual_seed(0)
        values = mask_vector(torch.randn(50, 6), mlp(6, 4, 8))
        assert ((values > 0) & (values < 1)).all()

    def test_zero_direction_gives_zero_factor(self):
        torch.manual_seed(1)
        c = contextual_impact_factor(torch.randn(7, 4), torch.randn(7, 4), mlp(8, 4, 8), torch.zeros(4))
        assert torch.equal(c, torch.zeros(7))

    def test_factor_is_bounded(self):
        torch.manual_seed(2)
        c = contextual_impact_factor(10 * torch.randn(40, 4), 10 * torch.randn(40, 4), mlp(8, 4, 8), torch.randn(4))
        assert (c.abs() <= 1.0).all()

    def test_hand_computed_factor(self):
        net = mlp(2, 1, 1)
        with torch.no_grad():
            net[0].weight.copy_(torch.tensor([[1.0, 1.0]]))
            net[0].bias.zero_()
            net[2].weight.copy_(torch.tensor([[1.0]]))
            net[2].bias.zero_()
        c = contextual_impact_factor(torch.tensor([1.0]), torch.tensor([2.0]), net, torch.tensor([0.5]))
        assert float(c) == pytest.approx(math.tanh(1.5))


class TestWgLayer:
    @pytest.fixture
    def layer(self):
        torch.manual_seed(3)
        return WgLayer(4, 8).double()

    def test_projected_messages_match_direct(self, layer):
        h = torch.randn(6, 4, dtype=torch.float64)
        src = torch.tensor([0, 1, 2, 3, 4, 5, 0, 2])
        dst = torch.tensor([1, 2, 3, 4, 5, 0, 3, 0])
        weight = torch.randn(8, dtype=torch.float64)
        fast = layer.projected_message(h, src, dst, weight)
        direct = layer.message(h[src], h[dst], weight)
        assert torch.allclose(fast, direct, atol=1e-6)

    def test_zero_weight_message_is_gru_on_bias(self, layer):
        h = torch.randn(2, 4, dtype=torch.float64)
        message = layer.message(h[:1], h[1:], torch.zeros(1, dtype=torch.float64))[0]
        gru = layer.gru
        with torch.no_grad():
            b_r, b_z, b_n = gru.bias_ih.chunk(3)
            g_r, g_z, g_n = (gru.weight_hh @ h[1] + gru.bias_hh).chunk(3)
            r = torch.sigmoid(b_r + g_r)
            z = torch.sigmoid(b_z + g_z)
            n = torch.tanh(b_n + r * g_n)
            expected = (1 - z) * n + z * h[1]
        assert torch.allclose(message, expected, atol=1e-9)

    def test_isolated_nodes_update_from_own_state(self, layer):
        h = torch.randn(3, 4, dtype=torch.float64)
        empty = torch.zeros(0, dtype=torch.long)
        out = layer(h, empty, empty, torch.zeros(0, dtype=torch.float64))
        with torch.no_grad():
            expected = layer.update_mlp(layer.W_0(h))
        assert torch.allclose(out, expected)

    def test_duplicate_neighbour_doubles_aggregate(self, layer):
        h = torch.randn(3, 4, dtype=torch.float64)
        h[1] = h[0]
        weight = torch.tensor([0.4, 0.4], dtype=torch.float64)
        _, _, single = layer.propagate(h, torch.tensor([0]), torch.tensor([2]), weight[:1])
        _, _, double = layer.propagate(h, torch.tensor([0, 1]), torch.tensor([2, 2]), weight)
        assert torch.allclose(double[2], 2 * single[2])


class TestReadout:
    def test_single_node(self):
        torch.manual_seed(4)
        readout = GatedReadout(3, 6)
        d, h = torch.randn(1, 3), torch.randn(1, 3)
        x = torch.cat([d, h], dim=-1)
        with torch.no_grad():
            expected = (torch.sigmoid(readout.gate(x)) * readout.value(x))[0]
            assert torch.allclose(graph_readout(d, h, readout), expected)

    def test_node_order_is_irrelevant(self):
        torch.manual_seed(5)
        readout = GatedReadout(3, 6)
        d, h = torch.randn(5, 3), torch.randn(5, 3)
        perm = torch.randperm(5)
        with torch.no_grad():
            assert torch.allclose(graph_readout(d, h, readout), graph_readout(d[perm], h[perm], readout), atol=1e-6)

    def test_zero_head_scores_zero(self):
        head = mlp(5, 1, 4)
        zero_(head)
        assert float(wg_score(torch.randn(2), torch.randn(3), head)) == 0.0


class TestDprWg:
    @pytest.fixture
    def corpus(self):
        labels = [LabeledPair(0, 1, InteractionClass.ANTAGONISM, Direction.BIDIRECTION)]
        return make_corpus(PACKAGES, 8, labels=labels)

    def test_factors_bounded_and_finite(self, corpus):
        model = DprWg.from_pretrained(ncf_for(corpus), tiny_train())
        _, graphs = corpus_graphs(corpus)
        batch = collate_graphs(graphs)
        with torch.no_grad():
            u = model.encoder(*patient_tensors(corpus, range(corpus.N)))
            _, c, _ = model.edge_weights(u, batch)
        assert (c.abs() < 1).all()

    def test_closed_mask_keeps_scores_finite(self, corpus):
        model = DprWg.from_pretrained(ncf_for(corpus), tiny_train())
        with torch.no_grad():
            model.mask_mlp[2].bias.fill_(-1e4)
        _, graphs = corpus_graphs(corpus)
        with torch.no_grad():
            u = model.encoder(*patient_tensors(corpus, range(corpus.N)))
            scores = model.score(u, collate_graphs(graphs))
        assert torch.isfinite(scores).all()

    def test_without_context_there_is_no_mask(self, corpus):
        model = DprWg.from_pretrained(ncf_for(corpus), tiny_train(), use_context=False)
        assert not hasattr(model, "mask_mlp")
        assert not hasattr(model, "a")

    def test_frozen_embeddings_do_not_train(self, corpus):
        model = DprWg.from_pretrained(ncf_for(corpus), tiny_train(freeze_embeddings=True))
        assert not model.drug_embedding.weight.requires_grad

    def test_unit_weights_match_plain_gnn(self):
        corpus = make_corpus([{0, 1, 2}] * 4, 3)
        ncf = ncf_for(corpus)
        plain = DprWg.from_pretrained(ncf, tiny_train(), use_context=False, use_type=False)
        typed = DprWg.from_pretrained(ncf, tiny_train(), use_context=False, use_type=True)
        typed.load_state_dict(plain.state_dict())
        _, graphs = corpus_graphs(corpus)
        batch = collate_graphs(graphs)
        with torch.no_grad():
            u = plain.encoder(*patient_tensors(corpus, range(4)))
            assert torch.allclose(plain.score(u, batch), typed.score(u, batch), atol=1e-6)

    def test_export_impact_factors(self, corpus):
        model = DprWg.from_pretrained(ncf_for(corpus), tiny_train())
        _, graphs = corpus_graphs(corpus)
        frame = export_impact_factors(model, corpus, graphs, [0, 1, 5])
        assert list(frame.columns) == ["patient", "drug_v", "drug_u", "relation", "e_init", "c", "e_hat"]
        assert len(frame) == sum(graphs[i].num_edges for i in (0, 1, 5))
        assert np.allclose(frame["e_hat"], frame["c"] * frame["e_init"])
        assert (frame.loc[frame["relation"] == "ANTAGONISM", "e_init"] == -1.0).all()

    def test_gradients_match_finite_differences(self):
        labels = [LabeledPair(0, 1, InteractionClass.SYNERGISM, Direction.A_TO_B)]
        corpus = make_corpus([{0, 1, 2}, {1, 3}], 4, labels=labels)
        cfg = tiny_train(**GRAD_TRAIN)
        model = DprWg.from_pretrained(ncf_for(corpus, **GRAD_TRAIN), cfg).double()
        jitter(model)
        _, graphs = corpus_graphs(corpus)

        def loss():
            return package_batch_loss(model, corpus, graphs, np.array([0, 1]), np.array([[1], [0]]))[0]

        errors = compare_gradients(loss, model)
        assert max(errors.values()) < 1e-4

    def test_training_lowers_monitor_loss(self, corpus):
        cfg = tiny_train(lr=0.01, epochs=3, patience=3, graph_batch_size=4, negative_ratio=2)
        result = train_wg(corpus, ncf_for(corpus), cfg)
        monitor = [row["monitor_bpr"] for row in result.history]
        assert min(monitor[1:]) < monitor[0]
        assert {"epoch", "train_bpr", "valid_bpr", "monitor_bpr"} <= set(result.history[1])
        assert 0 <= result.best_epoch <= 3


class TestPatientSampler:
    def test_never_draws_the_patient(self):
        sampler = PatientSampler([3, 5, 9], seed=0)
        patients = np.array([3, 5, 9] * 200)
        draws = sampler.sample(patients, 4)
        assert (draws != patients[:, None]).all()
        assert set(np.unique(draws)) == {3, 5, 9}

    def test_single_patient_pool_rejected(self):
        with pytest.raises(SamplingError):
            PatientSampler([4], seed=0)
