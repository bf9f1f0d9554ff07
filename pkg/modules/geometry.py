# modules/geometry.py
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from modules.errors import ContractError

GROUP_TOL: float = 1e-10


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        q = np.asarray(self.rotation, dtype=np.float64)
        g = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if q.shape != (3, 3):
            raise ContractError(f"rotation must be 3x3, got {q.shape}")
        if np.max(np.abs(q.T @ q - np.eye(3))) > GROUP_TOL or abs(np.linalg.det(q) - 1.0) > GROUP_TOL:
            raise ContractError("rotation is not a proper orthogonal matrix")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", g)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """self ∘ first: apply `first`, then `self`."""
        return RigidTransform(self.rotation @ first.rotation,
                              self.rotation @ first.translation + self.translation)


@dataclass(frozen=True)
class Permutation:
    mapping: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.mapping, dtype=np.int64)
        if m.ndim != 1 or not np.array_equal(np.sort(m), np.arange(m.size)):
            raise ContractError("permutation mapping is not a bijection on 0..N-1")
        object.__setattr__(self, "mapping", m)

    @property
    def size(self) -> int:
        return int(self.mapping.size)

    def inverse(self) -> "Permutation":
        return Permutation(np.argsort(self.mapping))

    def apply(self, arr: np.ndarray, axis: int = 0) -> np.ndarray:
        """Row i of the result is row mapping[i] of the input."""
        return np.take(arr, self.mapping, axis=axis)

    def relabel(self, index: int) -> int:
        """New label of the particle that carried `index` before permuting."""
        return int(self.inverse().mapping[index])


def random_rotation(seed: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    # Normalized Gaussian quaternion is uniform on S^3, hence uniform on SO(3)
    rng = rng if rng is not None else np.random.default_rng(seed)
    quat = rng.normal(size=4)
    quat /= np.linalg.norm(quat)
    q = Rotation.from_quat(quat).as_matrix()
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix()


def random_transform(seed: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                     translation_scale: float = 5.0) -> RigidTransform:
    rng = rng if rng is not None else np.random.default_rng(seed)
    q = random_rotation(rng=rng)
    return RigidTransform(q, rng.uniform(-translation_scale, translation_scale, size=3))


def random_permutation(n: int, seed: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> Permutation:
    rng = rng if rng is not None else np.random.default_rng(seed)
    return Permutation(rng.permutation(n))


def apply(t: RigidTransform, X: np.ndarray) -> np.ndarray:
    """x_i -> Q x_i + g for every row (leading batch axes allowed)."""
    return X @ t.rotation.T + t.translation


def apply_to_velocity(t: RigidTransform, V: np.ndarray) -> np.ndarray:
    """v_i -> Q v_i; velocities ignore translation."""
    return V @ t.rotation.T


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    diff = X[..., :, None, :] - X[..., None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))
