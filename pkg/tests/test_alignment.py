import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cocoloss.alignment import (
    AlignmentTransform,
    TransformKind,
    apply_transform,
    compose,
    estimate_affine,
    estimate_similarity,
    load_keypoints,
    residual_rms,
    save_keypoints,
)
from cocoloss.errors import CountMismatch, DegenerateConfiguration


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def random_points(rng, m=6):
    return rng.uniform(-5, 5, size=(m, 2))


def random_affine(rng):
    while True:
        a = rng.normal(size=(2, 2))
        if abs(np.linalg.det(a)) > 0.1:
            return AlignmentTransform(a, rng.normal(size=2) * 3)


def random_similarity(rng):
    scale = rng.uniform(0.2, 5.0)
    return AlignmentTransform(scale * rotation(rng.uniform(-math.pi, math.pi)),
                              rng.normal(size=2) * 3, TransformKind.SIMILARITY)


class TestAffine:
    def test_identity(self):
        p = random_points(np.random.default_rng(0))
        t = estimate_affine(p, p)
        np.testing.assert_allclose(t.linear, np.eye(2), atol=1e-9)
        np.testing.assert_allclose(t.translation, 0.0, atol=1e-9)

    def test_known_transform(self):
        p = random_points(np.random.default_rng(1))
        a, b = np.array([[0.0, -1.0], [1.0, 0.0]]), np.array([3.0, 5.0])
        t = estimate_affine(p, p @ a.T + b)
        np.testing.assert_allclose(t.linear, a, atol=1e-9)
        np.testing.assert_allclose(t.translation, b, atol=1e-9)

    def test_noise_residual(self):
        sigma = 0.01
        for seed in range(100):
            rng = np.random.default_rng(seed)
            p = random_points(rng, 10)
            q = apply_transform(random_affine(rng), p) + rng.normal(0, sigma, size=p.shape)
            assert residual_rms(estimate_affine(p, q), p, q) <= 3 * sigma

    def test_collinear(self):
        p = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
        with pytest.raises(DegenerateConfiguration):
            estimate_affine(p, p)

    def test_too_few(self):
        with pytest.raises(DegenerateConfiguration):
            estimate_affine([[0, 0], [1, 0]], [[0, 0], [1, 0]])

    def test_count_mismatch(self):
        with pytest.raises(CountMismatch):
            estimate_affine(np.zeros((3, 2)), np.zeros((4, 2)))


class TestSimilarity:
    def test_identity(self):
        p = random_points(np.random.default_rng(2))
        t = estimate_similarity(p, p)
        assert t.scale == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(t.linear, np.eye(2), atol=1e-9)
        np.testing.assert_allclose(t.translation, 0.0, atol=1e-9)

    def test_scale_rotate_shift(self):
        p = random_points(np.random.default_rng(3))
        lin = 2.0 * rotation(math.pi / 2)
        t = estimate_similarity(p, p @ lin.T + [1.0, -1.0])
        np.testing.assert_allclose(t.linear, lin, atol=1e-9)
        np.testing.assert_allclose(t.translation, [1.0, -1.0], atol=1e-9)
        assert t.scale == pytest.approx(2.0, abs=1e-9)

    def test_two_points_suffice(self):
        p = np.array([[0.0, 0.0], [1.0, 0.0]])
        q = np.array([[1.0, 1.0], [1.0, 3.0]])
        t = estimate_similarity(p, q)
        np.testing.assert_allclose(apply_transform(t, p), q, atol=1e-12)

    def test_reflection_excluded(self):
        rng = np.random.default_rng(4)
        p = random_points(rng)
        q = p * [1.0, -1.0]
        t = estimate_similarity(p, q)
        assert np.linalg.det(t.rotation) == pytest.approx(1.0, abs=1e-9)

    def test_residual_not_below_affine(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            p = random_points(rng, 8)
            q = apply_transform(random_affine(rng), p) + rng.normal(0, 0.05, size=p.shape)
            assert residual_rms(estimate_similarity(p, q), p, q) >= residual_rms(estimate_affine(p, q), p, q) - 1e-12

    def test_coincident(self):
        with pytest.raises(DegenerateConfiguration):
            estimate_similarity(np.ones((3, 2)), np.zeros((3, 2)))

    def test_flat_target(self):
        with pytest.raises(DegenerateConfiguration):
            estimate_similarity(random_points(np.random.default_rng(0)), np.zeros((6, 2)))

    @given(st.integers(0, 2**32 - 1))
    def test_angles_preserved(self, seed):
        rng = np.random.default_rng(seed)
        t = random_similarity(rng)
        pts = random_points(rng, 3)
        out = apply_transform(t, pts)

        def cos_at(x, y, z):
            u, v = y - x, z - x
            return u @ v / (np.linalg.norm(u) * np.linalg.norm(v))

        assert cos_at(*out) == pytest.approx(cos_at(*pts), abs=1e-9)


class TestApply:
    def test_identity(self):
        p = random_points(np.random.default_rng(0))
        np.testing.assert_array_equal(apply_transform(AlignmentTransform.identity(), p), p)

    def test_translation(self):
        t = AlignmentTransform(np.eye(2), [1.0, 2.0])
        np.testing.assert_array_equal(apply_transform(t, [[0.0, 0.0]]), [[1.0, 2.0]])

    def test_composition(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            t1, t2 = random_affine(rng), random_affine(rng)
            p = random_points(rng)
            np.testing.assert_allclose(apply_transform(t2, apply_transform(t1, p)),
                                       apply_transform(compose(t2, t1), p), atol=1e-12)

    def test_singular_rejected(self):
        with pytest.raises(DegenerateConfiguration):
            AlignmentTransform(np.zeros((2, 2)), np.zeros(2))


@given(st.integers(0, 2**32 - 1), st.sampled_from(["affine", "similarity"]))
def test_translation_equivariance(seed, kind):
    rng = np.random.default_rng(seed)
    p = random_points(rng)
    q = apply_transform(random_affine(rng), p) + rng.normal(0, 0.1, size=p.shape)
    shift = rng.normal(size=2) * 4
    est = estimate_affine if kind == "affine" else estimate_similarity
    t0, t1 = est(p, q), est(p + shift, q + shift)
    np.testing.assert_allclose(t1.linear, t0.linear, atol=1e-9)
    np.testing.assert_allclose(t1.translation, t0.translation + shift - t0.linear @ shift, atol=1e-9)


def test_keypoint_file_round_trip(tmp_path):
    p = random_points(np.random.default_rng(9), 5)
    path = tmp_path / "kp.txt"
    save_keypoints(path, p)
    np.testing.assert_array_equal(load_keypoints(path), p)
    path.write_text("# face landmarks\n1 2\n\n3.5   -4  # nose\n")
    np.testing.assert_array_equal(load_keypoints(path), [[1.0, 2.0], [3.5, -4.0]])
    path.write_text("1 2 3\n")
    with pytest.raises(ValueError):
        load_keypoints(path)
