# modules/energy.py
"""Latent-structure energy, its quadratic pairwise potential, and the
descent iterate whose attention weights are the potential's derivative."""
from dataclasses import dataclass, field
from typing import List

import numpy as np
import pandas as pd

from modules.config import logger
from modules.errors import ContractError, DimensionError


@dataclass(frozen=True)
class PotentialCoeffs:
    coeff_a: np.ndarray
    coeff_b: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.coeff_a, dtype=np.float64)
        b = np.asarray(self.coeff_b, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape != b.shape:
            raise DimensionError("PotentialCoeffs", a.shape, b.shape)
        if np.any(b <= 0):
            raise ContractError("potential coefficients need b_ij > 0")
        if np.any(a <= 8.0 * b):
            raise ContractError("potential coefficients need a_ij > 8 b_ij")
        if not (np.array_equal(a, a.T) and np.array_equal(b, b.T)):
            raise ContractError("potential coefficients must be symmetric")
        object.__setattr__(self, "coeff_a", a)
        object.__setattr__(self, "coeff_b", b)

    @classmethod
    def uniform(cls, n: int, a: float = 1.0, b: float = 0.1) -> "PotentialCoeffs":
        return cls(np.full((n, n), a), np.full((n, n), b))

    @property
    def n(self) -> int:
        return int(self.coeff_a.shape[0])


@dataclass(frozen=True)
class EnergyConfig:
    coeffs: PotentialCoeffs
    lam: float = 1.0
    eta: float = 0.1

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise ContractError(f"lambda must be > 0, got {self.lam}")
        if not 0 < self.eta < 1:
            raise ContractError(f"eta must lie in (0, 1), got {self.eta}")


@dataclass
class DescentReport:
    energies: List[float] = field(default_factory=list)
    max_violation: float = float("-inf")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"step": range(len(self.energies)), "energy": self.energies})

    def write_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def _check(H: np.ndarray, cfg: EnergyConfig) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != cfg.coeffs.n:
        raise DimensionError("energy", H.shape, cfg.coeffs.coeff_a.shape)
    if not np.all(np.isfinite(H)):
        raise ContractError("embeddings contain non-finite values")
    return H


def squared_distances(H: np.ndarray) -> np.ndarray:
    diff = H[:, None, :] - H[None, :, :]
    return (diff * diff).sum(axis=-1)


def potential(sq_dist: np.ndarray, coeffs: PotentialCoeffs) -> np.ndarray:
    """rho_ij(h^2) = a_ij h^2 - b_ij h^4."""
    return coeffs.coeff_a * sq_dist - coeffs.coeff_b * sq_dist * sq_dist


def potential_derivative(sq_dist: np.ndarray, coeffs: PotentialCoeffs) -> np.ndarray:
    """f_ij(h^2) = a_ij - 2 b_ij h^2."""
    return coeffs.coeff_a - 2.0 * coeffs.coeff_b * sq_dist


def evaluate_energy(H: np.ndarray, H_ref: np.ndarray, cfg: EnergyConfig) -> float:
    """Anchor term plus lambda times the ordered-pair potential sum (i=j included)."""
    H = _check(H, cfg)
    H_ref = np.asarray(H_ref, dtype=np.float64)
    if H_ref.shape != H.shape:
        raise DimensionError("evaluate_energy", H.shape, H_ref.shape)
    anchor = float(((H - H_ref) ** 2).sum())
    pairs = float(potential(squared_distances(H), cfg.coeffs).sum())
    return anchor + cfg.lam * pairs


def mixing_weights(H: np.ndarray, cfg: EnergyConfig) -> np.ndarray:
    H = _check(H, cfg)
    omega = potential_derivative(squared_distances(H), cfg.coeffs)
    if np.any(omega <= 0):
        worst = float(omega.min())
        raise ContractError(f"non-positive attention weight {worst:.3e}: coefficients or row norms out of range")
    return omega / omega.sum(axis=1, keepdims=True)


def theorem1_step(H: np.ndarray, cfg: EnergyConfig) -> np.ndarray:
    """h_i <- (1-eta) h_i + eta sum_j w_ij h_j with w the normalized f_ij."""
    H = _check(H, cfg)
    return (1.0 - cfg.eta) * H + cfg.eta * (mixing_weights(H, cfg) @ H)


def certify_descent(H0: np.ndarray, cfg: EnergyConfig, steps: int) -> DescentReport:
    # E(H^(t), t) is evaluated with H^(t) as its own anchor
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    H = _check(H0, cfg)
    report = DescentReport(energies=[evaluate_energy(H, H, cfg)])
    for _ in range(steps):
        H = theorem1_step(H, cfg)
        report.energies.append(evaluate_energy(H, H, cfg))
    report.max_violation = float(np.max(np.diff(report.energies)))
    logger.debug(f"Descent over {steps} steps: max_violation={report.max_violation:.3e}")
    return report


def random_unit_embeddings(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    H = rng.normal(size=(n, d))
    return H / np.linalg.norm(H, axis=1, keepdims=True)
