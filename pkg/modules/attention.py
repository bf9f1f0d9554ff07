# modules/attention.py
"""All-pair attention derived from the energy descent step.

The matrix form is the production path; the pairwise double loop is kept as
an oracle for tests and the verification suite.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from modules.config import logger
from modules.errors import ContractError, DimensionError
from modules import tensor as tn
from modules.tensor import Tensor


@dataclass
class AttentionLayerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    eta: float = 0.5

    def __post_init__(self) -> None:
        d = self.w_q.shape[0]
        for w in (self.w_q, self.w_k, self.w_v):
            if w.shape != (d, d):
                raise DimensionError("AttentionLayerParams", self.w_q.shape, w.shape)
        if not 0 < self.eta < 1:
            raise ContractError(f"eta must lie in (0, 1), got {self.eta}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    def tensors(self) -> List[Tensor]:
        return [self.w_q, self.w_k, self.w_v]


@dataclass
class PairwiseTables:
    """Learnable part of the pairwise maps; s1, s2 are stored as logs."""
    e_phi: Tensor
    e_psi: Tensor
    log_s1: Tensor
    log_s2: Tensor

    @property
    def n_types(self) -> int:
        return self.e_phi.shape[0]

    def tensors(self) -> List[Tensor]:
        return [self.e_phi, self.e_psi, self.log_s1, self.log_s2]

    def bind(self, z: np.ndarray, strict_eq9: bool = False, fixed_psi: Optional[float] = None) -> "PairwiseMaps":
        return PairwiseMaps(self, np.asarray(z, dtype=np.float64), strict_eq9=strict_eq9, fixed_psi=fixed_psi)


@dataclass
class PairwiseMaps:
    tables: PairwiseTables
    z: np.ndarray
    strict_eq9: bool = False
    # constant Phi = 1, Psi = fixed_psi when set (frozen-map ablation)
    fixed_psi: Optional[float] = None

    def __post_init__(self) -> None:
        if self.z.shape[-1] != self.tables.n_types:
            raise DimensionError("PairwiseMaps", self.z.shape, self.tables.e_phi.shape)
        if not (np.all((self.z == 0) | (self.z == 1)) and np.all(self.z.sum(axis=-1) == 1)):
            raise ContractError("type assignment rows must be one-hot")

    @property
    def n(self) -> int:
        return self.z.shape[-2]


def materialize_maps(maps: PairwiseMaps) -> Tuple[Tensor, Tensor]:
    """Phi = s1 sigmoid(Z E_phi Z^T), Psi = s2 sigmoid(Z E_psi Z^T).

    Unless strict_eq9 is set, s2 is clamped per sample to s1 * min(sigmoid(Z E_phi Z^T))
    so that every phi_ij exceeds psi_ij.
    """
    if maps.fixed_psi is not None:
        ones = np.ones(maps.z.shape[:-1] + (maps.n,))
        return Tensor(ones), Tensor(ones * maps.fixed_psi)
    z = Tensor(maps.z)
    zt = tn.transpose(z)
    t = maps.tables
    s1 = tn.exp(t.log_s1)
    s2 = tn.exp(t.log_s2)
    phi_gate = tn.sigmoid(z @ t.e_phi @ zt)
    psi_gate = tn.sigmoid(z @ t.e_psi @ zt)
    if not maps.strict_eq9:
        s2 = tn.minimum(s2, s1 * tn.min_matrix(phi_gate))
    return s1 * phi_gate, s2 * psi_gate


def _head_bounds(d: int, num_heads: int) -> List[Tuple[int, int]]:
    if d % num_heads != 0:
        raise ContractError(f"embedding width {d} is not divisible by {num_heads} heads")
    w = d // num_heads
    return [(h * w, (h + 1) * w) for h in range(num_heads)]


def _check_input(H: Tensor, p: AttentionLayerParams, maps: PairwiseMaps) -> None:
    if H.shape[-1] != p.dim or H.shape[-2] != maps.n:
        raise DimensionError("attention", H.shape, (maps.n, p.dim))


def attention_step_matrix(H: Tensor, p: AttentionLayerParams, maps: PairwiseMaps, num_heads: int = 1,
                          materialized: Optional[Tuple[Tensor, Tensor]] = None) -> Tensor:
    """H' = (1-eta) H + eta D (Phi V + (Psi o Q~K~^T) V), D the inverse row sums."""
    _check_input(H, p, maps)
    phi, psi = materialized if materialized is not None else materialize_maps(maps)
    q = H @ p.w_q
    k = H @ p.w_k
    v = H @ p.w_v
    heads = []
    for start, stop in _head_bounds(p.dim, num_heads):
        if num_heads == 1:
            qh, kh, vh = q, k, v
        else:
            qh, kh, vh = (tn.take_cols(m, start, stop) for m in (q, k, v))
        sim = tn.rowwise_l2_normalize(qh) @ tn.transpose(tn.rowwise_l2_normalize(kh))
        weights = phi + psi * sim
        denom = tn.sum_rows(weights)
        if np.any(denom.data <= 0):
            raise ContractError(f"non-positive attention normalizer {float(denom.data.min()):.3e}; phi must exceed psi")
        heads.append(tn.diag_scale(tn.reciprocal(denom), weights @ vh))
    mixed = heads[0] if num_heads == 1 else tn.concat(heads)
    return tn.scale(H, 1.0 - p.eta) + tn.scale(mixed, p.eta)


def attention_step_pairwise(H: np.ndarray, p: AttentionLayerParams, maps: PairwiseMaps,
                            num_heads: int = 1) -> np.ndarray:
    """Reference double loop over particle pairs for a single (N, d) sample."""
    H = np.asarray(H.data if isinstance(H, Tensor) else H, dtype=np.float64)
    if H.ndim != 2:
        raise DimensionError("attention_step_pairwise", H.shape, (maps.n, p.dim))
    phi_t, psi_t = materialize_maps(maps)
    phi, psi = phi_t.data, psi_t.data
    n, d = H.shape
    q, k, v = H @ p.w_q.data, H @ p.w_k.data, H @ p.w_v.data
    out = np.zeros_like(H)
    for start, stop in _head_bounds(d, num_heads):
        for i in range(n):
            qi = q[i, start:stop] / max(np.linalg.norm(q[i, start:stop]), tn.EPS)
            num = np.zeros(stop - start)
            den = 0.0
            for j in range(n):
                kj = k[j, start:stop] / max(np.linalg.norm(k[j, start:stop]), tn.EPS)
                w = phi[i, j] + psi[i, j] * float(qi @ kj)
                num += w * v[j, start:stop]
                den += w
            if den <= 0:
                raise ContractError(f"non-positive attention normalizer {den:.3e} at row {i}")
            out[i, start:stop] = num / den
    return (1.0 - p.eta) * H + p.eta * out


def attention_weights(H: np.ndarray, p: AttentionLayerParams, maps: PairwiseMaps) -> np.ndarray:
    """Row-normalized single-head mixing matrix w_ij / sum_m w_im."""
    phi, psi = (t.data for t in materialize_maps(maps))
    q = tn.rowwise_l2_normalize(Tensor(H) @ p.w_q).data
    k = tn.rowwise_l2_normalize(Tensor(H) @ p.w_k).data
    w = phi + psi * (q @ np.swapaxes(k, -1, -2))
    return w / w.sum(axis=-1, keepdims=True)


def unroll_encoder(H0: Tensor, params: Sequence[AttentionLayerParams], maps: PairwiseMaps, T: int,
                   num_heads: int = 1, layers_per_step: int = 1, enabled: bool = True,
                   normalize: bool = True) -> List[Tensor]:
    """Return [H^(1) .. H^(T)], one (or layers_per_step) attention layers per step.

    ``params`` holds T * layers_per_step sets, or layers_per_step sets when
    the steps are tied.
    """
    if T < 1:
        raise ContractError(f"horizon T must be >= 1, got {T}")
    if not enabled:
        return [H0 for _ in range(T)]
    tied = len(params) == layers_per_step
    if not tied and len(params) != T * layers_per_step:
        raise ContractError(f"expected {T * layers_per_step} attention parameter sets, got {len(params)}")
    materialized = materialize_maps(maps)
    seq: List[Tensor] = []
    H = H0
    for t in range(T):
        for layer in range(layers_per_step):
            p = params[layer if tied else t * layers_per_step + layer]
            H = attention_step_matrix(H, p, maps, num_heads=num_heads, materialized=materialized)
            if normalize:
                H = tn.rowwise_l2_normalize(H)
        seq.append(H)
    logger.debug(f"Encoder unrolled over {T} steps (tied={tied})")
    return seq
