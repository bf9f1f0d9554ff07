# modules/data.py
"""Synthetic spring + Coulomb systems, dataset splits, the inertial baseline
and the line-delimited trajectory file."""
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.config import SimConfig, logger
from modules.decoder import ObservedGraph
from modules.errors import ConfigError, ContractError, DataFormatError, SimulationInstabilityError
from modules.extensions import executor
from modules.model import SystemState, Trajectory

FILE_FORMAT: str = "painet-trajectories"
FILE_VERSION: int = 1
DATASET_FILE: str = "dataset.jsonl"
BLOWUP_NORM: float = 1e6
SPLITS: Tuple[str, ...] = ("train", "val", "test")

Sample = Tuple[SystemState, Trajectory]


@dataclass
class Topology:
    """Spring bonds (the observed graph) and per-particle charges."""
    pairs: np.ndarray
    charges: np.ndarray
    masses: np.ndarray

    def graph(self, cfg: SimConfig) -> ObservedGraph:
        attrs = np.tile([cfg.spring_k, cfg.rest_length], (len(self.pairs), 1))
        return ObservedGraph.undirected(len(self.charges), self.pairs, attrs)

    def types(self) -> np.ndarray:
        z = np.zeros((len(self.charges), 2))
        z[np.arange(len(self.charges)), (self.charges > 0).astype(int)] = 1.0
        return z

    def features(self) -> np.ndarray:
        return np.stack([self.charges, self.masses], axis=1)


@dataclass
class SimulationResult:
    state: SystemState
    trajectory: Trajectory
    velocities: np.ndarray
    energies: np.ndarray


@dataclass
class Dataset:
    samples: List[Sample]
    splits: Dict[str, List[int]] = field(default_factory=dict)
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.splits:
            seen = sorted(i for name in SPLITS for i in self.splits.get(name, []))
            if seen != list(range(len(self.samples))):
                raise ContractError("dataset splits must be disjoint and cover every sample")

    def split(self, name: str) -> List[Sample]:
        return [self.samples[i] for i in self.splits.get(name, [])]


def make_topology(cfg: SimConfig, rng: Optional[np.random.Generator] = None) -> Topology:
    """Chain bonds plus random extra bonds with probability edge_prob."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    n = cfg.n_particles
    pairs = [(i, i + 1) for i in range(n - 1)]
    for i in range(n):
        for j in range(i + 2, n):
            if rng.random() < cfg.edge_prob:
                pairs.append((i, j))
    charges = rng.choice([-1.0, 1.0], size=n)
    return Topology(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), charges, np.full(n, cfg.mass))


def softening(cfg: SimConfig) -> float:
    return 0.1 * cfg.rest_length


def compute_forces(X: np.ndarray, cfg: SimConfig, topo: Topology) -> np.ndarray:
    F = np.zeros_like(X)
    if cfg.spring_k > 0 and len(topo.pairs):
        i, j = topo.pairs[:, 0], topo.pairs[:, 1]
        r = X[i] - X[j]
        dist = np.linalg.norm(r, axis=1, keepdims=True)
        f = -cfg.spring_k * (dist - cfg.rest_length) * r / np.maximum(dist, 1e-12)
        np.add.at(F, i, f)
        np.add.at(F, j, -f)
    if cfg.coulomb_c > 0:
        # Plummer softening: |r|^2 -> |r|^2 + eps^2 in q_i q_j r / |r|^3
        r = X[:, None, :] - X[None, :, :]
        d2 = (r * r).sum(axis=-1) + softening(cfg) ** 2
        qq = np.outer(topo.charges, topo.charges)
        np.fill_diagonal(qq, 0.0)
        F += ((cfg.coulomb_c * qq / d2 ** 1.5)[:, :, None] * r).sum(axis=1)
    return F


def mechanical_energy(X: np.ndarray, V: np.ndarray, cfg: SimConfig, topo: Topology) -> float:
    kinetic = 0.5 * float((topo.masses[:, None] * V * V).sum())
    spring = 0.0
    if len(topo.pairs):
        r = X[topo.pairs[:, 0]] - X[topo.pairs[:, 1]]
        spring = 0.5 * cfg.spring_k * float(((np.linalg.norm(r, axis=1) - cfg.rest_length) ** 2).sum())
    coulomb = 0.0
    if cfg.coulomb_c > 0:
        r = X[:, None, :] - X[None, :, :]
        inv = 1.0 / np.sqrt((r * r).sum(axis=-1) + softening(cfg) ** 2)
        qq = np.outer(topo.charges, topo.charges)
        coulomb = cfg.coulomb_c * float(np.triu(qq * inv, k=1).sum())
    return kinetic + spring + coulomb


def initial_conditions(cfg: SimConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Random positions with a minimum spacing, zero-momentum random velocities."""
    n = cfg.n_particles
    side = cfg.box * max(1.0, n ** (1.0 / 3.0))
    min_sep = 0.5 * cfg.rest_length
    X = np.zeros((n, 3))
    for i in range(n):
        for _ in range(1000):
            candidate = rng.uniform(-side / 2, side / 2, size=3)
            if i == 0 or np.min(np.linalg.norm(X[:i] - candidate, axis=1)) >= min_sep:
                break
        X[i] = candidate
    V = rng.normal(0.0, cfg.velocity_scale, size=(n, 3))
    V -= V.mean(axis=0)
    return X, V


def simulate(cfg: SimConfig, topo: Optional[Topology] = None, initial: Optional[Tuple[np.ndarray, np.ndarray]] = None,
             rng: Optional[np.random.Generator] = None) -> SimulationResult:
    """Velocity Verlet; frames are recorded every `stride` integrator steps."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    topo = topo if topo is not None else make_topology(cfg, np.random.default_rng(cfg.seed))
    X, V = (np.array(a, dtype=np.float64) for a in initial) if initial is not None else initial_conditions(cfg, rng)
    m = topo.masses[:, None]
    state = SystemState(X.copy(), V.copy(), topo.features(), topo.types(), topo.graph(cfg))
    dt = cfg.dt_sim
    acc = compute_forces(X, cfg, topo) / m
    frames, velocities, energies = [], [], [mechanical_energy(X, V, cfg, topo)]
    for frame in range(cfg.frames):
        for _ in range(cfg.stride):
            X = X + V * dt + 0.5 * acc * dt * dt
            acc_next = compute_forces(X, cfg, topo) / m
            V = V + 0.5 * (acc + acc_next) * dt
            acc = acc_next
        if not np.all(np.isfinite(X)) or np.max(np.abs(X)) > BLOWUP_NORM:
            raise SimulationInstabilityError(
                f"integration blew up at frame {frame + 1}; try a smaller dt_sim (now {dt})")
        frames.append(X.copy())
        velocities.append(V.copy())
        energies.append(mechanical_energy(X, V, cfg, topo))
    traj = Trajectory(np.stack(frames), dt=dt * cfg.stride, start_time=0.0)
    return SimulationResult(state, traj, np.stack(velocities), np.asarray(energies))


def split_sizes(n: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {list(ratios)}")
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def build_dataset(cfg: SimConfig, n_samples: int, ratios: Sequence[float] = (0.6, 0.2, 0.2),
                  seed: Optional[int] = None) -> Dataset:
    """Independent simulations sharing one topology; seeded shuffle into splits."""
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    seed = cfg.seed if seed is None else seed
    sizes = split_sizes(n_samples, ratios)
    topo = make_topology(cfg, np.random.default_rng(cfg.seed))
    sample_seeds = np.random.default_rng(seed).integers(0, 2 ** 63 - 1, size=n_samples)
    futures = [executor.submit(simulate, cfg, topo, None, np.random.default_rng(int(s))) for s in sample_seeds]
    samples = [(r.state, r.trajectory) for r in (f.result() for f in futures)]
    order = [int(i) for i in np.random.default_rng(seed + 1).permutation(n_samples)]
    splits = {"train": sorted(order[:sizes[0]]), "val": sorted(order[sizes[0]:sizes[0] + sizes[1]]),
              "test": sorted(order[sizes[0] + sizes[1]:])}
    provenance = {f"sim.{k}": (repr(v) if isinstance(v, float) else str(v)) for k, v in cfg.model_dump().items()}
    provenance.update({"dataset.seed": str(seed), "dataset.n_samples": str(n_samples),
                       "dataset.softening": repr(softening(cfg)), "dataset.ratios": ",".join(repr(float(r)) for r in ratios)})
    logger.info(f"Built dataset: {n_samples} samples, N={cfg.n_particles}, {len(topo.pairs)} springs, splits={sizes}")
    return Dataset(samples, splits, provenance)


def linear_baseline(s: SystemState, T: int, dt: float) -> Trajectory:
    """Inertial extrapolation x(t) = x0 + v0 t dt."""
    steps = np.arange(1, T + 1, dtype=np.float64)[:, None, None]
    return Trajectory(s.positions[None] + s.velocities[None] * steps * dt, dt=dt)


# ------------------------------------------------------------ trajectory file

def _fmt(arr: Any) -> str:
    a = np.asarray(arr)
    if a.ndim == 0:
        text = format(float(a), ".17g")
        # keep a float literal so -0.0 survives the JSON parser
        return text if any(c in text for c in ".eE") else text + ".0"
    return "[" + ",".join(_fmt(x) for x in a) + "]"


def _sample_line(state: SystemState, traj: Trajectory) -> str:
    g = state.graph
    return ('{"types":' + _fmt(state.types) + ',"features":' + _fmt(state.features)
            + ',"edges":' + json.dumps(g.edges.tolist()) + ',"edge_attrs":' + _fmt(g.edge_attrs)
            + ',"x0":' + _fmt(state.positions) + ',"v0":' + _fmt(state.velocities)
            + ',"frames":' + _fmt(traj.frames) + ',"dt":' + _fmt(traj.dt)
            + ',"start_time":' + _fmt(traj.start_time) + '}')


def write_trajectory_file(dataset: Dataset, path: str) -> None:
    first = dataset.samples[0] if dataset.samples else None
    header = {
        "format": FILE_FORMAT, "version": FILE_VERSION, "n_samples": len(dataset.samples),
        "n_particles": first[0].n if first else 0, "frames": first[1].horizon if first else 0,
        "provenance": [f"{k}={v}" for k, v in sorted(dataset.provenance.items())],
        "splits": {name: dataset.splits.get(name, []) for name in SPLITS},
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for state, traj in dataset.samples:
            f.write(_sample_line(state, traj) + "\n")
    logger.info(f"Wrote {len(dataset.samples)} samples to {path}")


def _parse_sample(record: Dict[str, Any], lineno: int) -> Sample:
    try:
        positions = np.asarray(record["x0"], dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        edges = np.asarray(record["edges"], dtype=np.int64).reshape(-1, 2)
        attrs = np.asarray(record["edge_attrs"], dtype=np.float64)
        attrs = attrs.reshape(len(edges), -1) if attrs.size else np.zeros((len(edges), 0))
        graph = ObservedGraph(n, edges, attrs)
        features = np.asarray(record["features"], dtype=np.float64).reshape(n, -1)
        state = SystemState(positions, np.asarray(record["v0"], dtype=np.float64).reshape(n, 3),
                            features, np.asarray(record["types"], dtype=np.float64).reshape(n, -1), graph)
        traj = Trajectory(np.asarray(record["frames"], dtype=np.float64).reshape(-1, n, 3),
                          dt=float(record["dt"]), start_time=float(record.get("start_time", 0.0)))
    except KeyError as e:
        raise DataFormatError(f"sample record is missing field {e}", line=lineno)
    except (ValueError, TypeError) as e:
        raise DataFormatError(f"malformed sample record ({e})", line=lineno)
    except Exception as e:
        raise DataFormatError(f"invalid sample ({e})", line=lineno)
    return state, traj


def read_trajectory_file(path: str) -> Dataset:
    if not os.path.exists(path):
        raise DataFormatError(f"dataset file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().split("\n")
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines or not lines[0].strip():
        raise DataFormatError("missing header", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataFormatError(f"header is not valid JSON ({e.msg})", line=1)
    if not isinstance(header, dict) or header.get("format") != FILE_FORMAT:
        raise DataFormatError("missing header", line=1)
    if header.get("version") != FILE_VERSION:
        raise DataFormatError(f"unsupported file version {header.get('version')}", line=1)
    samples: List[Sample] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise DataFormatError("blank line inside sample block", line=lineno)
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"invalid JSON ({e.msg})", line=lineno)
        samples.append(_parse_sample(record, lineno))
    if len(samples) != header.get("n_samples"):
        raise DataFormatError(f"header announces {header.get('n_samples')} samples, file holds {len(samples)}", line=1)
    provenance = {}
    for item in header.get("provenance", []):
        key, _, value = str(item).partition("=")
        provenance[key] = value
    raw_splits = header.get("splits") or {}
    if not isinstance(raw_splits, dict):
        raise DataFormatError("header splits must be an object of index lists", line=1)
    splits = {}
    for name in SPLITS:
        indices = raw_splits.get(name, [])
        if not isinstance(indices, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in indices):
            raise DataFormatError(f"split '{name}' must be a list of integer sample indices", line=1)
        splits[name] = indices
    if not any(splits.values()):
        splits = {"train": list(range(len(samples))), "val": [], "test": []}
    try:
        return Dataset(samples, splits, provenance)
    except ContractError as e:
        raise DataFormatError(str(e), line=1)
