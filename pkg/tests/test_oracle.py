import numpy as np

from motif_cdr.graph import build_domain_graph
from motif_cdr.oracle import degree_threshold, fit_domain, fit_oracle


class TestDegreeThreshold:
    def test_median_of_active_nodes(self):
        # user degrees 3, 1; item degrees 2, 1, 1
        graph = build_domain_graph([(0, 10), (0, 11), (0, 12), (1, 10)], 0)
        assert degree_threshold(graph) == 1.0

    def test_empty_graph(self):
        graph = build_domain_graph([], 0)
        assert degree_threshold(graph) == np.inf


class TestFitDomain:
    def test_shape_and_determinism(self):
        graph = build_domain_graph([(0, 10), (0, 11), (1, 11), (1, 12), (2, 10)], 0)
        first = fit_domain(graph, 4, epochs=2, lr=0.05, tau=0.5, negatives=2, batch_size=2, seed=1)
        second = fit_domain(graph, 4, epochs=2, lr=0.05, tau=0.5, negatives=2, batch_size=2, seed=1)
        assert first.shape == (graph.num_nodes, 4)
        assert np.array_equal(first, second)

    def test_user_with_every_item_is_skipped(self):
        graph = build_domain_graph([(0, 10), (0, 11), (1, 10)], 0)
        vectors = fit_domain(graph, 2, epochs=1, lr=0.05, tau=0.5, negatives=1, batch_size=4, seed=0)
        assert np.all(np.isfinite(vectors))


class TestFitOracle:
    def test_eligibility_and_width(self, tiny_split):
        truth = fit_oracle(tiny_split.train, 16, epochs=1, lr=0.01, tau=0.5, negatives=2,
                           batch_size=8, seed=0)
        assert truth.width == 16
        for d, graph in tiny_split.train.graphs.items():
            threshold = degree_threshold(graph)
            assert truth.vectors[d].shape == (graph.num_nodes, 16)
            for idx in range(graph.num_nodes):
                assert truth.is_eligible(d, idx) == (graph.degrees[idx] >= threshold)
            assert truth.eligible[d].any()
