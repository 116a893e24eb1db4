import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cocoloss.errors import ZeroNormError
from cocoloss.losses import (
    CentroidMode,
    CentroidSet,
    EmbeddingBatch,
    batch_centroids,
    coco_backward,
    coco_forward,
    coco_output_exclusive,
    cosine_similarity,
    naive_pairwise_loss,
    softmax,
    softmax_ce_baseline,
)
from cocoloss.numerics import finite_difference_grad, relative_error

import oracles

LD = np.longdouble


def random_instance(rng, max_m=8, max_d=16, max_k=5):
    k = int(rng.integers(2, max_k + 1))
    m = int(rng.integers(1, max_m + 1))
    d = int(rng.integers(1, max_d + 1))
    f = rng.normal(size=(m, d))
    c = rng.normal(size=(k, d))
    labels = rng.integers(0, k, size=m)
    return EmbeddingBatch(f, labels, k), CentroidSet(c)


@st.composite
def instances(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_instance(np.random.default_rng(seed))


class TestCosine:
    def test_self(self):
        assert cosine_similarity([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_diagonal(self):
        assert cosine_similarity([1, 0], [1, 1]) == pytest.approx(0.7071067811865475, abs=1e-15)

    def test_zero(self):
        with pytest.raises(ZeroNormError):
            cosine_similarity([0, 0], [1, 0])

    @given(instances())
    def test_symmetric_and_bounded(self, inst):
        batch, cents = inst
        a, b = batch.features[0], cents.centroids[0]
        c = cosine_similarity(a, b)
        assert c == cosine_similarity(b, a)
        assert -1.0 <= c <= 1.0


class TestBatchCentroids:
    def test_two_samples_one_class(self):
        eps = 1e-8
        c = batch_centroids(EmbeddingBatch([[1.0, 0.0], [0.0, 1.0]], [0, 0], 2), eps)
        assert c.mode == CentroidMode.BATCH_COMPUTED
        np.testing.assert_allclose(c.centroids[0], [0.5, 0.5], atol=1e-8)
        np.testing.assert_allclose(c.centroids[0], np.array([1.0, 1.0]) / (2 + eps), rtol=1e-15)
        np.testing.assert_array_equal(c.centroids[1], [0.0, 0.0])

    def test_single_sample(self):
        c = batch_centroids(EmbeddingBatch([[2.0, 2.0]], [0], 2), 1e-8)
        np.testing.assert_allclose(c.centroids[0], np.array([2.0, 2.0]) / (1 + 1e-8), rtol=1e-15)

    def test_matches_per_class_accumulation(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            batch, _ = random_instance(rng)
            got = batch_centroids(batch, 1e-8).centroids
            ref = oracles.class_centroids(batch.features.tolist(), batch.labels.tolist(),
                                          batch.num_classes, 1e-8)
            np.testing.assert_allclose(got, ref, atol=1e-12, rtol=0)

    def test_epsilon_positive(self):
        with pytest.raises(ValueError):
            batch_centroids(EmbeddingBatch([[1.0]], [0], 2), 0.0)


class TestNaivePairwise:
    def test_cross_class_pairs_vanish(self):
        assert naive_pairwise_loss(EmbeddingBatch([[1.0, 0.0], [0.6, 0.8]], [0, 1], 2)) == 0.0

    def test_same_class_pair_is_cosine_over_epsilon(self):
        # cos((1,0), (0.8,0.6)) = 0.8; two ordered pairs of 0.8 / 1e-6
        b = EmbeddingBatch([[1.0, 0.0], [0.8, 0.6]], [1, 1], 2)
        assert naive_pairwise_loss(b, 1e-6) == pytest.approx(1.6e6, rel=1e-12)

    def test_orthogonal_same_class(self):
        b = EmbeddingBatch(np.eye(4), [0, 0, 0, 0], 2)
        assert naive_pairwise_loss(b) == 0.0

    def test_needs_two(self):
        with pytest.raises(ValueError):
            naive_pairwise_loss(EmbeddingBatch([[1.0]], [0], 2))


class TestExclusiveOutput:
    def test_worked_example(self):
        b = EmbeddingBatch([[1.0, 0.0]], [0], 2)
        cents = CentroidSet([[1.0, 0.0], [0.0, 1.0]])
        assert coco_output_exclusive(b, cents)[0] == pytest.approx(2.718281828459045, abs=1e-12)
        assert coco_forward(b, cents).probs[0, 0] == pytest.approx(0.7310585786300049, abs=1e-12)

    def test_equidistant(self):
        cents = CentroidSet([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        b = EmbeddingBatch([[1.0, 1.0, 1.0]], [2], 3)
        assert coco_output_exclusive(b, cents)[0] == pytest.approx(0.5, abs=1e-15)

    def test_absent_class_centroid_is_an_error(self):
        b = EmbeddingBatch([[1.0, 0.0], [0.0, 1.0]], [0, 0], 2)
        with pytest.raises(ZeroNormError):
            coco_output_exclusive(b, batch_centroids(b))


class TestForward:
    def test_identical_centroids_give_uniform(self):
        b = EmbeddingBatch(np.random.default_rng(0).normal(size=(5, 3)), [0, 1, 2, 3, 0], 4)
        res = coco_forward(b, CentroidSet(np.tile([1.0, 2.0, 3.0], (4, 1))))
        np.testing.assert_allclose(res.probs, 0.25, atol=1e-15)
        assert res.loss == pytest.approx(5 * math.log(4), rel=1e-14)

    def test_worked_example(self):
        res = coco_forward(EmbeddingBatch([[1.0, 0.0]], [0], 2), CentroidSet(np.eye(2)))
        assert res.probs[0, 0] == pytest.approx(0.7310585786300049, abs=1e-12)
        assert res.loss == pytest.approx(0.31326168751822286, abs=1e-12)

    def test_mean_reduction(self):
        batch, cents = random_instance(np.random.default_rng(4))
        s = coco_forward(batch, cents).loss
        assert coco_forward(batch, cents, reduction="mean").loss == pytest.approx(s / batch.size)

    def test_bad_temperature(self):
        batch, cents = random_instance(np.random.default_rng(4))
        with pytest.raises(ValueError):
            coco_forward(batch, cents, temperature=0.0)

    def test_zero_feature(self):
        with pytest.raises(ZeroNormError):
            coco_forward(EmbeddingBatch([[0.0, 0.0]], [0], 2), CentroidSet(np.eye(2)))

    @given(instances(), st.sampled_from([1.0, 0.5, 4.0]))
    def test_result_invariants(self, inst, temperature):
        batch, cents = inst
        res = coco_forward(batch, cents, temperature)
        np.testing.assert_allclose(res.probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all((res.probs > 0) & (res.probs < 1))
        ref_loss = -np.log(res.probs[np.arange(batch.size), batch.labels]).sum()
        assert abs(res.loss - ref_loss) <= 1e-12 * max(1.0, abs(ref_loss))
        assert np.all(np.abs(res.logits) <= temperature * (1 + 1e-9))

    @given(instances(), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, inst, alpha):
        batch, cents = inst
        a = coco_forward(batch, cents)
        b = coco_forward(EmbeddingBatch(alpha * batch.features, batch.labels, batch.num_classes), cents)
        assert abs(a.loss - b.loss) <= 1e-9
        np.testing.assert_allclose(b.probs, a.probs, atol=1e-9, rtol=0)
        np.testing.assert_allclose(b.logits, a.logits, atol=1e-9, rtol=0)

    @given(instances())
    def test_equals_independent_softmax_of_cosines(self, inst):
        batch, cents = inst
        ref = oracles.coco_probs(batch.features.tolist(), cents.centroids.tolist())
        np.testing.assert_allclose(coco_forward(batch, cents).probs, ref, atol=1e-12, rtol=0)

    def test_shift_robust_softmax(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(6, 4)) * 5
        naive = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(softmax(z), naive, atol=1e-12, rtol=0)
        assert np.all(np.isfinite(softmax(z + 1e4)))

    @given(instances(), st.randoms(use_true_random=False))
    def test_permutation_equivariance(self, inst, rnd):
        batch, cents = inst
        perm = list(range(batch.size))
        rnd.shuffle(perm)
        a = coco_backward(batch, cents)
        b = coco_backward(EmbeddingBatch(batch.features[perm], batch.labels[perm], batch.num_classes), cents)
        np.testing.assert_allclose(b.probs, a.probs[perm], atol=1e-15)
        np.testing.assert_allclose(b.grad_features, a.grad_features[perm], atol=1e-15)
        assert abs(a.loss - b.loss) <= 1e-12 * max(1.0, a.loss)


def fd_feature_grad(batch, cents, temperature=1.0, reduction="sum"):
    return finite_difference_grad(
        lambda x: coco_forward(EmbeddingBatch(x.astype(LD), batch.labels, batch.num_classes),
                               CentroidSet(cents.centroids.astype(LD)), temperature, reduction).loss,
        batch.features)


def fd_centroid_grad(batch, cents, temperature=1.0, reduction="sum"):
    return finite_difference_grad(
        lambda x: coco_forward(EmbeddingBatch(batch.features.astype(LD), batch.labels, batch.num_classes),
                               CentroidSet(x.astype(LD)), temperature, reduction).loss,
        cents.centroids)


class TestBackward:
    @pytest.mark.parametrize("temperature,reduction", [(1.0, "sum"), (3.0, "sum"), (1.0, "mean")])
    def test_matches_finite_differences(self, temperature, reduction):
        rng = np.random.default_rng(21)
        for _ in range(20):
            batch, cents = random_instance(rng)
            res = coco_backward(batch, cents, temperature, reduction)
            assert relative_error(res.grad_features, fd_feature_grad(batch, cents, temperature, reduction)).max() < 1e-5
            assert relative_error(res.grad_centroids, fd_centroid_grad(batch, cents, temperature, reduction)).max() < 1e-5

    @given(instances())
    def test_feature_gradient_is_tangential(self, inst):
        batch, cents = inst
        g = coco_backward(batch, cents).grad_features
        assert np.all(np.abs(np.einsum("ij,ij->i", g, batch.features)) < 1e-9)

    @given(instances())
    def test_centroid_gradient_is_tangential(self, inst):
        batch, cents = inst
        g = coco_backward(batch, cents).grad_centroids
        assert np.all(np.abs(np.einsum("ij,ij->i", g, cents.centroids)) < 1e-9)


class TestSoftmaxBaseline:
    def test_equal_logits(self):
        loss, _ = softmax_ce_baseline(np.zeros((3, 5)), [0, 1, 4])
        assert loss == pytest.approx(math.log(5))

    def test_confident_logits_drive_loss_to_zero(self):
        losses = [softmax_ce_baseline(a * np.eye(3), [0, 1, 2])[0] for a in (1, 2, 5, 10, 20, 40)]
        assert all(x > y for x, y in zip(losses, losses[1:]))
        assert losses[-1] < 1e-15

    def test_gradient(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            z = rng.normal(size=(5, 4))
            y = rng.integers(0, 4, 5)
            _, g = softmax_ce_baseline(z, y)
            fd = finite_difference_grad(lambda x: softmax_ce_baseline(x.astype(LD), y)[0], z)
            assert relative_error(g, fd).max() < 1e-5

    def test_bad_label(self):
        with pytest.raises(ValueError):
            softmax_ce_baseline(np.zeros((2, 3)), [0, 3])


class TestValidation:
    def test_label_range(self):
        with pytest.raises(ValueError):
            EmbeddingBatch([[1.0]], [2], 2)

    def test_num_classes(self):
        with pytest.raises(ValueError):
            EmbeddingBatch([[1.0]], [0], 1)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            coco_forward(EmbeddingBatch([[1.0, 0.0]], [0], 2), CentroidSet(np.eye(3)[:2]))

    def test_parametric_renormalize(self):
        c = CentroidSet([[3.0, 4.0], [0.0, 2.0]]).renormalize()
        np.testing.assert_allclose(np.linalg.norm(c.centroids, axis=1), 1.0, atol=1e-15)
