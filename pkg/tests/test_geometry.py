import numpy as np
import pytest

from modules.errors import ContractError
from modules.geometry import (Permutation, RigidTransform, apply, apply_to_velocity, pairwise_distances,
                              random_permutation, random_rotation, random_transform, rotation_about_axis)


@pytest.mark.parametrize("seed", range(10))
def test_random_rotation_is_proper(seed):
    q = random_rotation(seed)
    np.testing.assert_allclose(q.T @ q, np.eye(3), atol=1e-10)
    assert abs(np.linalg.det(q) - 1.0) <= 1e-10


def test_random_rotation_is_deterministic():
    np.testing.assert_array_equal(random_rotation(42), random_rotation(42))


def test_quarter_turn_about_z():
    t = RigidTransform(rotation_about_axis([0.0, 0.0, 1.0], np.pi / 2))
    np.testing.assert_allclose(apply(t, np.array([[1.0, 0.0, 0.0]])), [[0.0, 1.0, 0.0]], atol=1e-12)


def test_half_turn_on_velocity():
    t = RigidTransform(rotation_about_axis([0.0, 0.0, 1.0], np.pi), translation=[3.0, -1.0, 2.0])
    np.testing.assert_allclose(apply_to_velocity(t, np.array([[1.0, 1.0, 0.0]])), [[-1.0, -1.0, 0.0]], atol=1e-12)


def test_identity_leaves_positions_unchanged(rng):
    X = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(apply(RigidTransform.identity(), X), X)


def test_velocity_ignores_translation(rng):
    V = rng.normal(size=(5, 3))
    t = RigidTransform(np.eye(3), translation=[10.0, 20.0, 30.0])
    np.testing.assert_array_equal(apply_to_velocity(t, V), V)


def test_velocity_norms_preserved(rng):
    V = rng.normal(size=(8, 3))
    moved = apply_to_velocity(random_transform(seed=3), V)
    np.testing.assert_allclose(np.linalg.norm(moved, axis=1), np.linalg.norm(V, axis=1), rtol=1e-12)


def test_translation_preserves_distances_exactly():
    X = np.arange(12, dtype=np.float64).reshape(4, 3) / 4.0
    t = RigidTransform(np.eye(3), translation=[2.0, -3.0, 1.0])
    np.testing.assert_array_equal(pairwise_distances(apply(t, X)), pairwise_distances(X))


@pytest.mark.parametrize("seed", range(5))
def test_rigid_motion_preserves_distances(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(7, 3))
    moved = apply(random_transform(rng=rng), X)
    np.testing.assert_allclose(pairwise_distances(moved), pairwise_distances(X), atol=1e-10)


def test_composition_matches_single_transform(rng):
    t1, t2 = random_transform(rng=rng), random_transform(rng=rng)
    X = rng.normal(size=(6, 3))
    composed = t2.compose(t1)
    np.testing.assert_allclose(composed.rotation, t2.rotation @ t1.rotation, atol=1e-15)
    np.testing.assert_allclose(composed.translation, t2.rotation @ t1.translation + t2.translation, atol=1e-15)
    np.testing.assert_allclose(apply(composed, X), apply(t2, apply(t1, X)), atol=1e-12)


def test_reflection_rejected():
    with pytest.raises(ContractError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))


def test_non_orthogonal_rejected():
    with pytest.raises(ContractError):
        RigidTransform(np.eye(3) * 1.01)


class TestPermutation:
    def test_not_a_bijection(self):
        with pytest.raises(ContractError):
            Permutation(np.array([0, 0, 2]))

    def test_inverse_round_trip(self, rng):
        perm = random_permutation(9, rng=rng)
        arr = rng.normal(size=(9, 4))
        np.testing.assert_array_equal(perm.inverse().apply(perm.apply(arr)), arr)

    def test_apply_and_relabel(self):
        perm = Permutation(np.array([2, 0, 1]))
        np.testing.assert_array_equal(perm.apply(np.array([10, 11, 12])), [12, 10, 11])
        # particle 2 moved to slot 0
        assert perm.relabel(2) == 0
        assert perm.size == 3

    def test_apply_along_axis(self, rng):
        perm = random_permutation(5, rng=rng)
        frames = rng.normal(size=(3, 5, 3))
        np.testing.assert_array_equal(perm.apply(frames, axis=1)[1], perm.apply(frames[1]))
