import math

import numpy as np
import pytest

from motif_cdr.autodiff import Tensor
from motif_cdr.errors import ConfigError, DimensionError, SamplingError, ValidationError
from motif_cdr.graph import build_domain_graph
from motif_cdr.motifs import Context, MotifInstance, MotifKind
from motif_cdr.objectives import (Denominator, MaskedMotif, MSLBatch, ViewPair, cl_loss, er_loss,
                                  in_batch_negatives, infonce, mask_motif, pretrain_loss,
                                  rec_loss, sample_negatives)


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def oracle_infonce(anchors, positives, negatives, tau, with_pos=True):
    total = 0.0
    for a, p, negs in zip(anchors, positives, negatives):
        logits = [cos(a, n) / tau for n in negs]
        if with_pos:
            logits.append(cos(a, p) / tau)
        total += math.log(sum(math.exp(x) for x in logits)) - cos(a, p) / tau
    return total


class TestInfoNCE:
    def test_uniform_similarity_is_log_n(self):
        n, k = 6, 4
        batch = MSLBatch(np.ones((n, 3)), np.ones((n, 3)), np.ones((n, k, 3)), 0.5)
        assert infonce(batch).item() == pytest.approx(n * math.log(k + 1), abs=1e-9)

    def test_uniform_without_positive(self):
        batch = MSLBatch(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 4, 3)), 0.5)
        assert infonce(batch, Denominator.WITHOUT_POS).item() == pytest.approx(2 * math.log(4), abs=1e-9)

    @pytest.mark.parametrize("with_pos", [True, False])
    def test_matches_scalar_oracle(self, with_pos):
        rng = np.random.default_rng(3)
        anchors, positives, negatives = rng.normal(size=(5, 8)), rng.normal(size=(5, 8)), rng.normal(size=(5, 4, 8))
        denominator = Denominator.WITH_POS if with_pos else Denominator.WITHOUT_POS
        loss = infonce(MSLBatch(anchors, positives, negatives, 0.5), denominator).item()
        assert loss == pytest.approx(oracle_infonce(anchors, positives, negatives, 0.5, with_pos), abs=1e-10)

    def test_non_negative(self):
        rng = np.random.default_rng(4)
        batch = MSLBatch(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 2, 3)), 0.2)
        assert infonce(batch).item() >= 0.0

    def test_temperature_must_be_positive(self):
        with pytest.raises(ConfigError):
            MSLBatch(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 1, 3)), 0.0)

    def test_misaligned_positives(self):
        with pytest.raises(DimensionError):
            MSLBatch(np.ones((2, 3)), np.ones((3, 3)), np.ones((2, 1, 3)), 0.5)


class TestInBatch:
    def test_negatives_exclude_self(self):
        assert in_batch_negatives(3).tolist() == [[1, 2], [0, 2], [0, 1]]

    def test_needs_two_anchors(self):
        with pytest.raises(ValidationError):
            in_batch_negatives(1)


class TestContrastive:
    def test_identical_views_beat_uniform(self):
        views = np.random.default_rng(5).normal(size=(4, 6))
        loss, skipped = cl_loss([ViewPair(0, Context.SHARED, Tensor(views), Tensor(views))], 0.5)
        assert skipped == 0
        assert loss.item() < 4 * math.log(4)

    def test_matches_term_by_term_oracle(self):
        rng = np.random.default_rng(6)
        first, second = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        loss, _ = cl_loss([ViewPair(1, Context.SPECIFIC, Tensor(first), Tensor(second))], 0.5)
        negatives = np.stack([np.delete(second, k, axis=0) for k in range(6)])
        assert loss.item() == pytest.approx(oracle_infonce(first, second, negatives, 0.5), abs=1e-10)

    def test_singleton_groups_skipped(self):
        rng = np.random.default_rng(7)
        pairs = [
            ViewPair(0, Context.SHARED, Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4)))),
            ViewPair(0, Context.SPECIFIC, Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))),
        ]
        loss, skipped = cl_loss(pairs, 0.5)
        alone, _ = cl_loss(pairs[1:], 0.5)
        assert skipped == 1
        assert loss.item() == pytest.approx(alone.item())

    def test_empty_is_zero(self):
        loss, skipped = cl_loss([], 0.5)
        assert loss.item() == 0.0 and skipped == 0


class TestReconstruction:
    def test_matches_oracle(self):
        rng = np.random.default_rng(8)
        recon, truth = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
        negatives = np.stack([np.delete(truth, k, axis=0) for k in range(8)])
        loss = er_loss(Tensor(recon), truth, 0.5).item()
        assert loss == pytest.approx(oracle_infonce(recon, truth, negatives, 0.5), abs=1e-10)

    def test_perfect_reconstruction_decreases_with_temperature(self):
        truth = np.eye(4)
        losses = [er_loss(Tensor(truth), truth, tau).item() for tau in (1.0, 0.5, 0.1)]
        assert all(loss < 4 * math.log(4) for loss in losses)
        assert losses[0] > losses[1] > losses[2]

    def test_single_node_contributes_zero(self):
        assert er_loss(Tensor(np.ones((1, 3))), np.ones((1, 3)), 0.5).item() == 0.0


class TestPretrainLoss:
    def test_balanced_mix(self):
        assert pretrain_loss(Tensor(2.0), Tensor(4.0), 0.5).item() == pytest.approx(3.0)

    def test_endpoints_select_single_task(self):
        cl, er = Tensor(2.0), Tensor(4.0)
        assert pretrain_loss(cl, er, 1.0) is cl
        assert pretrain_loss(cl, er, 0.0) is er

    def test_lambda_range(self):
        with pytest.raises(ConfigError):
            pretrain_loss(Tensor(1.0), Tensor(1.0), 1.5)


class TestRecommendationLoss:
    def test_all_equal_is_log_five(self):
        table = Tensor(np.ones((5, 3)))
        loss = rec_loss(Tensor(np.ones((1, 3))), table, [0], np.array([[1, 2, 3, 4]]), 0.5)
        assert loss.item() == pytest.approx(math.log(5), abs=1e-12)

    def test_closed_form_separated_items(self):
        table = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        loss = rec_loss(Tensor(np.array([[1.0, 0.0]])), table, [0], np.array([[1, 1, 1, 1]]), 0.5)
        assert loss.item() == pytest.approx(math.log(1 + 4 * math.exp(-4)), abs=1e-12)

    def test_negative_shape_checked(self):
        with pytest.raises(DimensionError):
            rec_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))), [0, 1], np.array([1, 2]), 0.5)


class TestMasking:
    @pytest.fixture
    def motif(self):
        graph = build_domain_graph([(0, 10), (0, 11), (1, 10), (1, 11)], 0)
        return MotifInstance(MotifKind.BUTTERFLY, tuple(graph.nodes), 2, 0)

    def test_central_never_masked(self, motif):
        for seed in range(20):
            masked = mask_motif(motif, np.random.default_rng(seed))
            assert masked.masked != (2,)
            assert masked.keep_mask().sum() == 3

    def test_masking_central_rejected(self, motif):
        with pytest.raises(ValidationError):
            MaskedMotif(motif, (2,))


class TestSampleNegatives:
    def test_excluded_never_drawn(self):
        draws = sample_negatives(10, {0, 1, 2}, 200, np.random.default_rng(0))
        assert not set(draws.tolist()) & {0, 1, 2}

    def test_dense_exclusion(self):
        draws = sample_negatives(5, {0, 1, 2, 3}, 10, np.random.default_rng(0))
        assert set(draws.tolist()) == {4}

    def test_nothing_left(self):
        with pytest.raises(SamplingError):
            sample_negatives(3, {0, 1, 2}, 4, np.random.default_rng(0))
