# modules/model.py
"""End-to-end assembly: invariant input encoder, attention unroll, parallel
decoder, trajectory loss and the binary model file."""
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules.attention import AttentionLayerParams, PairwiseMaps, PairwiseTables, unroll_encoder
from modules.config import ModelConfig, TrainConfig, logger
from modules.decoder import MLP_MODES, EGNNLayerParams, MLPReadout, ObservedGraph, decode_trajectory, readout_trajectory
from modules.errors import ContractError, CorruptModelError, DimensionError, ModelVersionError
from modules.geometry import Permutation, RigidTransform, apply, apply_to_velocity
from modules.layers import MLP
from modules import tensor as tn
from modules.tensor import Tensor

MAGIC: bytes = b"PAIN"
FORMAT_VERSION: int = 1


@dataclass
class SystemState:
    positions: np.ndarray
    velocities: np.ndarray
    features: np.ndarray
    types: np.ndarray
    graph: ObservedGraph

    def __post_init__(self) -> None:
        for name in ("positions", "velocities", "features", "types"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.graph.n
        if self.positions.shape != (n, 3) or self.velocities.shape != (n, 3):
            raise DimensionError("SystemState", self.positions.shape, self.velocities.shape)
        if self.features.ndim != 2 or self.features.shape[0] != n or self.types.ndim != 2 or self.types.shape[0] != n:
            raise DimensionError("SystemState", self.features.shape, self.types.shape)
        if not all(np.all(np.isfinite(a)) for a in (self.positions, self.velocities, self.features)):
            raise ContractError("system state contains non-finite values")

    @property
    def n(self) -> int:
        return self.graph.n

    def transformed(self, t: RigidTransform) -> "SystemState":
        return SystemState(apply(t, self.positions), apply_to_velocity(t, self.velocities),
                           self.features, self.types, self.graph)

    def permuted(self, perm: Permutation) -> "SystemState":
        return SystemState(perm.apply(self.positions), perm.apply(self.velocities), perm.apply(self.features),
                           perm.apply(self.types), self.graph.permuted(perm))


@dataclass
class Trajectory:
    frames: np.ndarray
    dt: float = 1.0
    start_time: float = 0.0

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1 or self.frames.shape[2] != 3:
            raise DimensionError("Trajectory", self.frames.shape, ("T>=1", "N", 3))
        if not np.all(np.isfinite(self.frames)):
            raise ContractError("trajectory contains non-finite values")

    @property
    def horizon(self) -> int:
        return int(self.frames.shape[0])

    def head(self, T: int) -> "Trajectory":
        if T > self.horizon:
            raise ContractError(f"trajectory has {self.horizon} frames, {T} requested")
        return Trajectory(self.frames[:T], self.dt, self.start_time)


@dataclass
class Batch:
    """States sharing one graph topology, stacked along a leading axis."""
    positions: np.ndarray
    velocities: np.ndarray
    features: np.ndarray
    types: np.ndarray
    graph: ObservedGraph
    targets: Optional[np.ndarray] = None

    @classmethod
    def from_samples(cls, samples: Sequence[Tuple[SystemState, Optional[Trajectory]]], T: Optional[int] = None) -> "Batch":
        states = [s for s, _ in samples]
        graph = states[0].graph
        if any(s.graph.signature() != graph.signature() for s in states[1:]):
            raise ContractError("a batch must share one observed graph")
        targets = None
        if T is not None and all(traj is not None for _, traj in samples):
            targets = np.stack([traj.head(T).frames for _, traj in samples])
        return cls(np.stack([s.positions for s in states]), np.stack([s.velocities for s in states]),
                   np.stack([s.features for s in states]), np.stack([s.types for s in states]), graph, targets)


StateLike = Union[SystemState, Batch]


@dataclass
class ModelParams:
    config: ModelConfig
    encoder: MLP
    attention: List[AttentionLayerParams]
    tables: PairwiseTables
    decoder: List[EGNNLayerParams]
    train: TrainConfig = field(default_factory=TrainConfig)
    readout: Optional[MLPReadout] = None

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        named: List[Tuple[str, Tensor]] = [(f"encoder.{i}", t) for i, t in enumerate(self.encoder.tensors())]
        for s, p in enumerate(self.attention):
            named += [(f"attention.{s}.w_q", p.w_q), (f"attention.{s}.w_k", p.w_k), (f"attention.{s}.w_v", p.w_v)]
        named += [("pairwise.e_phi", self.tables.e_phi), ("pairwise.e_psi", self.tables.e_psi),
                  ("pairwise.log_s1", self.tables.log_s1), ("pairwise.log_s2", self.tables.log_s2)]
        for l, layer in enumerate(self.decoder):
            for mlp_name, mlp in layer.mlps():
                named += [(f"decoder.{l}.{mlp_name}.{i}", t) for i, t in enumerate(mlp.tensors())]
        if self.readout is not None:
            named += [(f"readout.{name}", t) for name, t in self.readout.tensors()]
        return named

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, values: Dict[str, np.ndarray]) -> None:
        named = dict(self.named_tensors())
        if set(named) != set(values):
            missing, extra = sorted(set(named) - set(values)), sorted(set(values) - set(named))
            raise CorruptModelError(f"parameter names differ: missing={missing[:3]} extra={extra[:3]}")
        for name, value in values.items():
            named[name].assign(value)


def init_params(config: ModelConfig, train: Optional[TrainConfig] = None, seed: Optional[int] = None) -> ModelParams:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d = config.hidden
    in_dim = config.feature_dim + (6 if config.paper_literal_encoder else 2)
    encoder = MLP.init([in_dim, d, d], rng, name="encoder")
    n_sets = config.layers_per_step * (1 if config.tie_steps else config.horizon)
    attention = [
        AttentionLayerParams(
            w_q=tn.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)), name=f"attention.{s}.w_q"),
            w_k=tn.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)), name=f"attention.{s}.w_k"),
            w_v=tn.parameter(np.eye(d) + rng.normal(0.0, 0.1 / np.sqrt(d), size=(d, d)), name=f"attention.{s}.w_v"),
            eta=config.eta,
        )
        for s in range(n_sets)
    ]
    E = config.n_types
    tables = PairwiseTables(
        e_phi=tn.parameter(rng.normal(0.0, 0.1, size=(E, E)), name="pairwise.e_phi"),
        e_psi=tn.parameter(rng.normal(0.0, 0.1, size=(E, E)), name="pairwise.e_psi"),
        log_s1=tn.parameter(np.zeros((1, 1)), name="pairwise.log_s1"),
        log_s2=tn.parameter(np.full((1, 1), np.log(0.5)), name="pairwise.log_s2"),
    )
    readout = None
    if config.decoder_mode in MLP_MODES:
        decoder: List[EGNNLayerParams] = []
        readout = MLPReadout.init(d, config.decoder_mode, rng, zero_heads=config.zero_init_heads)
        logger.warning(f"decoder_mode={config.decoder_mode}: graph-free readout, SE(3) equivariance is not preserved")
    else:
        decoder = [
            EGNNLayerParams.init(d, config.edge_dim, rng, with_velocity=(l == 0),
                                 zero_heads=config.zero_init_heads, name=f"decoder.{l}")
            for l in range(config.layers)
        ]
    if config.paper_literal_encoder:
        logger.warning("paper_literal_encoder=true: raw coordinates feed the encoder, SE(3) equivariance is not preserved")
    if config.strict_eq9:
        logger.warning("strict_eq9=true: psi is not clamped below phi, attention normalizers may vanish")
    return ModelParams(config, encoder, attention, tables, decoder, train or TrainConfig(), readout)


def bind_maps(s: StateLike, params: ModelParams) -> PairwiseMaps:
    cfg = params.config
    fixed = cfg.fixed_psi if cfg.pairwise_mode == "fixed" else None
    return params.tables.bind(s.types, strict_eq9=cfg.strict_eq9, fixed_psi=fixed)


def encoder_inputs(s: StateLike, params: ModelParams) -> np.ndarray:
    """Per-particle encoder input: features, ||v||, degree (or raw X, V when literal)."""
    lead = s.positions.shape[:-1]
    if params.config.paper_literal_encoder:
        parts = [s.features, s.positions, s.velocities]
    else:
        speed = np.sqrt((s.velocities * s.velocities).sum(axis=-1, keepdims=True))
        degree = np.broadcast_to(s.graph.degree().reshape(-1, 1), lead + (1,))
        parts = [s.features, speed, degree]
    return np.concatenate([np.broadcast_to(p, lead + p.shape[-1:]) for p in parts], axis=-1)


def encode_initial(s: StateLike, params: ModelParams) -> Tensor:
    inputs = encoder_inputs(s, params)
    if inputs.shape[-1] != params.encoder.in_dim:
        raise DimensionError("encode_initial", inputs.shape, (params.encoder.in_dim,))
    return tn.rowwise_l2_normalize(params.encoder(Tensor(inputs)))


def embeddings(s: StateLike, params: ModelParams, T: Optional[int] = None) -> List[Tensor]:
    """Invariant embeddings [H^(1) .. H^(T)] from the attention unroll."""
    cfg = params.config
    T = cfg.horizon if T is None else T
    if T < 1:
        raise ContractError(f"horizon T must be >= 1, got {T}")
    if not cfg.tie_steps and T > cfg.horizon:
        raise ContractError(f"model was built for horizon {cfg.horizon}, {T} steps requested")
    maps = bind_maps(s, params)
    H0 = encode_initial(s, params)
    steps = params.attention if cfg.tie_steps else params.attention[:T * cfg.layers_per_step]
    return unroll_encoder(H0, steps, maps, T, num_heads=cfg.num_heads,
                          layers_per_step=cfg.layers_per_step, enabled=cfg.attention)


def forward(s: StateLike, params: ModelParams, T: Optional[int] = None) -> List[Tensor]:
    """Differentiable predicted frames [X^(1) .. X^(T)]."""
    cfg = params.config
    H_seq = embeddings(s, params, T)
    if params.readout is not None:
        return readout_trajectory(H_seq, Tensor(s.positions), params.readout)
    return decode_trajectory(H_seq, Tensor(s.positions), Tensor(s.velocities), s.graph, params.decoder,
                             aggr=cfg.aggr, mode=cfg.decoder_mode, parallel=cfg.parallel_decode)


def predict(s: SystemState, params: ModelParams, T: Optional[int] = None, dt: float = 1.0) -> Trajectory:
    frames = forward(s, params, T)
    return Trajectory(np.stack([f.data for f in frames]), dt=dt)


def predict_frames(s: Batch, params: ModelParams, T: Optional[int] = None) -> np.ndarray:
    """Batched prediction as a (B, T, N, 3) array."""
    return np.stack([f.data for f in forward(s, params, T)], axis=1)


def trajectory_loss(pred: Trajectory, truth: Trajectory) -> float:
    """Unnormalized sum over steps and particles of squared position error."""
    if pred.frames.shape != truth.frames.shape:
        raise DimensionError("trajectory_loss", pred.frames.shape, truth.frames.shape)
    diff = pred.frames - truth.frames
    return float((diff * diff).sum())


def trajectory_loss_tensor(frames: Sequence[Tensor], targets: np.ndarray) -> Tensor:
    """Same loss on differentiable frames; targets are (T, N, 3) or (B, T, N, 3)."""
    T = len(frames)
    if targets.shape[-3] != T:
        raise DimensionError("trajectory_loss", (T,) + frames[0].shape, targets.shape)
    total: Optional[Tensor] = None
    for t, frame in enumerate(frames):
        err = tn.sum_all(tn.sq_norm_rows(frame - targets[..., t, :, :]))
        total = err if total is None else total + err
    return total


# ------------------------------------------------------------------ model file

def _hyper_block(params: ModelParams) -> bytes:
    return json.dumps({"model": params.config.model_dump(), "train": params.train.model_dump()},
                      sort_keys=True).encode("utf-8")


def save(params: ModelParams, path: str) -> None:
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    hyper = _hyper_block(params)
    chunks += [struct.pack("<I", len(hyper)), hyper]
    named = params.named_tensors()
    chunks.append(struct.pack("<I", len(named)))
    for name, t in named:
        raw = name.encode("utf-8")
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<I", t.data.ndim)]
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))
    logger.info(f"Model saved to {path} ({len(named)} tensors)")


class _Reader:
    def __init__(self, buf: bytes, path: str) -> None:
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptModelError(f"{self.path}: truncated model file at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load(path: str) -> ModelParams:
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    if reader.take(4) != MAGIC:
        raise CorruptModelError(f"{path}: not a model file (bad magic)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    try:
        hyper = json.loads(reader.take(reader.u32()).decode("utf-8"))
        config, train = ModelConfig(**hyper["model"]), TrainConfig(**hyper["train"])
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptModelError(f"{path}: unreadable hyperparameter block ({e})")
    values: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8", errors="replace")
        rank = reader.u32()
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        values[name] = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if reader.pos != len(reader.buf):
        raise CorruptModelError(f"{path}: {len(reader.buf) - reader.pos} trailing bytes")
    params = init_params(config, train)
    params.load_state_dict(values)
    return params
