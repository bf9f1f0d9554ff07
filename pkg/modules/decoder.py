# modules/decoder.py
"""Parallel SE(3)-equivariant decoder built from EGNN layers.

Edge gathers and scatters are products with constant incidence matrices, so
they ride on the differentiable matmul and broadcast over minibatches.
"""
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np

from modules.errors import ContractError, GraphError
from modules.extensions import step_executor
from modules.geometry import Permutation
from modules.layers import MLP
from modules import tensor as tn
from modules.tensor import Tensor


@dataclass(frozen=True)
class ObservedGraph:
    n: int
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    edge_attrs: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        attrs = np.asarray(self.edge_attrs, dtype=np.float64)
        if attrs.size == 0:
            attrs = attrs.reshape(len(edges), attrs.shape[-1] if attrs.ndim == 2 else 0)
        if attrs.ndim != 2 or attrs.shape[0] != len(edges):
            raise GraphError(f"edge_attrs has shape {attrs.shape} for {len(edges)} edges")
        if len(edges) and (edges.min() < 0 or edges.max() >= self.n):
            raise GraphError(f"dangling edge index: edges reference nodes outside 0..{self.n - 1}")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise GraphError("self-loops are not allowed in the observed graph")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "edge_attrs", attrs)

    @classmethod
    def undirected(cls, n: int, pairs: Sequence[Tuple[int, int]], attrs: Optional[np.ndarray] = None) -> "ObservedGraph":
        """Both (i, j) and (j, i) for every pair, sharing one attribute row."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        attrs = np.zeros((len(pairs), 0)) if attrs is None else np.asarray(attrs, dtype=np.float64)
        edges = np.concatenate([pairs, pairs[:, ::-1]])
        return cls(n, edges, np.concatenate([attrs, attrs]))

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def edge_dim(self) -> int:
        return int(self.edge_attrs.shape[1])

    def is_symmetric(self) -> bool:
        lookup = {(int(i), int(j)): row for (i, j), row in zip(self.edges, self.edge_attrs)}
        return all((j, i) in lookup and np.array_equal(lookup[(j, i)], row) for (i, j), row in lookup.items())

    def degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n).astype(np.float64)

    def signature(self) -> bytes:
        return self.edges.tobytes() + self.edge_attrs.tobytes() + str(self.n).encode()

    def permuted(self, perm: Permutation) -> "ObservedGraph":
        new_label = perm.inverse().mapping
        return ObservedGraph(self.n, new_label[self.edges], self.edge_attrs.copy())

    @cached_property
    def incidence(self) -> Tuple[Tensor, Tensor, Tensor]:
        """(receiver, sender, receiver - sender) one-hot matrices of shape (E, N)."""
        recv = np.zeros((self.n_edges, self.n))
        send = np.zeros((self.n_edges, self.n))
        rows = np.arange(self.n_edges)
        recv[rows, self.edges[:, 0]] = 1.0
        send[rows, self.edges[:, 1]] = 1.0
        return Tensor(recv), Tensor(send), Tensor(recv - send)

    @cached_property
    def inverse_degree(self) -> Tensor:
        deg = self.degree()
        return Tensor(np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0).reshape(-1, 1))


@dataclass
class EGNNLayerParams:
    phi_m: MLP
    phi_h: MLP
    phi_x: MLP
    phi_v: Optional[MLP] = None

    @classmethod
    def init(cls, d: int, edge_dim: int, rng: np.random.Generator, with_velocity: bool = False,
             zero_heads: bool = True, name: str = "egnn") -> "EGNNLayerParams":
        return cls(
            phi_m=MLP.init([2 * d + 1 + edge_dim, d, d], rng, name=f"{name}.phi_m"),
            phi_h=MLP.init([2 * d, d, d], rng, name=f"{name}.phi_h"),
            phi_x=MLP.init([d, d, 1], rng, name=f"{name}.phi_x", zero_last=zero_heads),
            phi_v=MLP.init([d, d, 1], rng, name=f"{name}.phi_v", zero_last=zero_heads) if with_velocity else None,
        )

    def mlps(self) -> List[Tuple[str, MLP]]:
        out = [("phi_m", self.phi_m), ("phi_h", self.phi_h), ("phi_x", self.phi_x)]
        if self.phi_v is not None:
            out.append(("phi_v", self.phi_v))
        return out


def _check_shapes(X: Tensor, H: Tensor, g: ObservedGraph, p: EGNNLayerParams) -> None:
    if X.shape[-2] != g.n or H.shape[-2] != g.n:
        raise GraphError(f"graph has {g.n} nodes but inputs have {X.shape[-2]} positions and {H.shape[-2]} embeddings")
    if X.shape[-1] != 3:
        raise ContractError(f"positions must be (..., N, 3), got {X.shape}")
    expected = 2 * H.shape[-1] + 1 + g.edge_dim
    if p.phi_m.in_dim != expected:
        raise ContractError(f"message MLP expects {p.phi_m.in_dim} inputs, layer provides {expected}")


def edge_messages(X: Tensor, H: Tensor, g: ObservedGraph, p: EGNNLayerParams) -> Tuple[Tensor, Tensor]:
    """m_ij = phi_m(h_i, h_j, ||x_i - x_j||^2, a_ij) and the relative positions."""
    recv, send, diff = g.incidence
    rel = diff @ X
    parts = [recv @ H, send @ H, tn.sq_norm_rows(rel)]
    if g.edge_dim:
        parts.append(Tensor(g.edge_attrs))
    return p.phi_m(tn.concat(parts)), rel


def egnn_layer(X: Tensor, H: Tensor, g: ObservedGraph, p: EGNNLayerParams, aggr: str = "sum",
               V: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    _check_shapes(X, H, g, p)
    if p.phi_v is not None and V is not None:
        X = X + p.phi_v(H) * V
    recv, _, _ = g.incidence
    msgs, rel = edge_messages(X, H, g, p)
    agg = tn.transpose(recv) @ msgs
    shift = tn.transpose(recv) @ (rel * p.phi_x(msgs))
    if aggr == "mean":
        agg = tn.diag_scale(g.inverse_degree, agg)
        shift = tn.diag_scale(g.inverse_degree, shift)
    H_next = p.phi_h(tn.concat([H, agg]))
    return X + shift, H_next


def decode_step(H_t: Tensor, X0: Tensor, V0: Tensor, g: ObservedGraph, stack: Sequence[EGNNLayerParams],
                aggr: str = "sum") -> Tensor:
    """Positions for one time step; velocities enter through the first layer only."""
    if len(stack) < 1:
        raise ContractError("decoder stack needs at least one EGNN layer")
    X, H = X0, H_t
    for l, p in enumerate(stack):
        X, H = egnn_layer(X, H, g, p, aggr=aggr, V=V0 if l == 0 else None)
    return X


def decode_trajectory(H_seq: Sequence[Tensor], X0: Tensor, V0: Tensor, g: ObservedGraph,
                      stack: Sequence[EGNNLayerParams], aggr: str = "sum", mode: str = "parallel",
                      parallel: bool = False) -> List[Tensor]:
    """One decode per embedding in H_seq, sharing the same stack.

    In ``parallel`` mode every step starts from X0 and the steps are
    independent; ``recurrent`` mode starts step t from the prediction at t-1.
    """
    if len(H_seq) < 1:
        raise ContractError("decode_trajectory needs at least one embedding matrix")
    if mode == "recurrent":
        frames: List[Tensor] = []
        X = X0
        for H_t in H_seq:
            X = decode_step(H_t, X, V0, g, stack, aggr)
            frames.append(X)
        return frames
    if parallel and len(H_seq) > 1:
        futures = [step_executor.submit(decode_step, H_t, X0, V0, g, stack, aggr) for H_t in H_seq]
        return [f.result() for f in futures]
    return [decode_step(H_t, X0, V0, g, stack, aggr) for H_t in H_seq]


MLP_MODES: Tuple[str, ...] = ("mlp_add", "mlp_concat")


@dataclass
class MLPReadout:
    """Graph-free decoder: X0 + MLP(H + X0 W) for ``mlp_add``, X0 + MLP([H, X0]) for ``mlp_concat``.

    Neither variant sees the observed graph or stays equivariant; both exist
    for the decoder ablation.
    """
    mlp: MLP
    lift: Optional[Tensor] = None

    @classmethod
    def init(cls, d: int, mode: str, rng: np.random.Generator, zero_heads: bool = True,
             name: str = "readout") -> "MLPReadout":
        if mode not in MLP_MODES:
            raise ContractError(f"readout mode must be one of {MLP_MODES}, got '{mode}'")
        lift = tn.parameter(rng.normal(0.0, 1.0 / np.sqrt(3.0), size=(3, d)), name=f"{name}.lift") if mode == "mlp_add" else None
        in_dim = d if mode == "mlp_add" else d + 3
        return cls(MLP.init([in_dim, d, 3], rng, name=f"{name}.mlp", zero_last=zero_heads), lift)

    def tensors(self) -> List[Tuple[str, Tensor]]:
        named = [(f"mlp.{i}", t) for i, t in enumerate(self.mlp.tensors())]
        if self.lift is not None:
            named.insert(0, ("lift", self.lift))
        return named

    def __call__(self, H_t: Tensor, X0: Tensor) -> Tensor:
        if X0.shape[-1] != 3:
            raise ContractError(f"positions must be (..., N, 3), got {X0.shape}")
        x = H_t + X0 @ self.lift if self.lift is not None else tn.concat([H_t, X0])
        return X0 + self.mlp(x)


def readout_trajectory(H_seq: Sequence[Tensor], X0: Tensor, readout: MLPReadout) -> List[Tensor]:
    if len(H_seq) < 1:
        raise ContractError("readout_trajectory needs at least one embedding matrix")
    return [readout(H_t, X0) for H_t in H_seq]
