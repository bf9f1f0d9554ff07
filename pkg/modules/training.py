# modules/training.py
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.config import TrainConfig, logger
from modules.errors import ContractError, NumericError
from modules.extensions import executor
from modules.model import Batch, ModelParams, SystemState, Trajectory, forward, predict_frames, trajectory_loss_tensor
from modules import tensor as tn
from modules.tensor import Tensor

Sample = Tuple[SystemState, Trajectory]


class AdamOptimizer:
    """Adaptive moment estimation with bias correction and L2 weight decay."""

    def __init__(self, tensors: Sequence[Tensor], cfg: TrainConfig) -> None:
        self.tensors = list(tensors)
        self.cfg = cfg
        self.step_count = 0
        self.m: Dict[int, np.ndarray] = {id(t): np.zeros_like(t.data) for t in self.tensors}
        self.v: Dict[int, np.ndarray] = {id(t): np.zeros_like(t.data) for t in self.tensors}

    def step(self, grads: Dict[Tensor, np.ndarray]) -> None:
        cfg = self.cfg
        self.step_count += 1
        c1 = 1.0 - cfg.beta1 ** self.step_count
        c2 = 1.0 - cfg.beta2 ** self.step_count
        for t in self.tensors:
            g = grads.get(t)
            if g is None:
                continue
            g = g + cfg.weight_decay * t.data
            m = self.m[id(t)] = cfg.beta1 * self.m[id(t)] + (1.0 - cfg.beta1) * g
            v = self.v[id(t)] = cfg.beta2 * self.v[id(t)] + (1.0 - cfg.beta2) * g * g
            if cfg.lr == 0.0:
                continue
            t.assign(t.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: ModelParams
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    wall_time: float = 0.0


def minibatches(samples: Sequence[Sample], batch_size: int, rng: Optional[np.random.Generator],
                T: int) -> List[Batch]:
    """Shuffle (when rng is given), group by graph topology, then chunk."""
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    groups: Dict[bytes, List[Sample]] = {}
    for i in order:
        state, traj = samples[int(i)]
        groups.setdefault(state.graph.signature(), []).append((state, traj))
    batches: List[Batch] = []
    for group in groups.values():
        for start in range(0, len(group), batch_size):
            batches.append(Batch.from_samples(group[start:start + batch_size], T=T))
    return batches


def batch_loss(batch: Batch, params: ModelParams, T: int) -> Tensor:
    """Trajectory loss averaged over the samples of the batch."""
    frames = forward(batch, params, T)
    total = trajectory_loss_tensor(frames, batch.targets)
    return tn.scale(total, 1.0 / batch.positions.shape[0])


def evaluate_a_mse(samples: Sequence[Sample], params: ModelParams, T: int, batch_size: int = 64) -> float:
    """Trajectory-averaged per-particle MSE over a split; batches fan out on the pool."""
    if not samples:
        return float("nan")
    batches = minibatches(samples, batch_size, None, T)
    preds = list(executor.map(lambda b: predict_frames(b, params, T), batches))
    sq, count = 0.0, 0
    for batch, pred in zip(batches, preds):
        diff = pred - batch.targets
        sq += float((diff * diff).sum())
        count += diff.shape[0] * diff.shape[1] * diff.shape[2]
    return sq / count


def train(samples: Sequence[Sample], params: ModelParams, cfg: Optional[TrainConfig] = None,
          val_samples: Sequence[Sample] = (), on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Minibatch Adam with early stopping on validation A-MSE; keeps the best parameters."""
    if not samples:
        raise ContractError("training needs a non-empty dataset")
    cfg = cfg or params.train
    params.train = cfg
    T = params.config.horizon
    rng = np.random.default_rng(cfg.seed)
    tensors = [t for _, t in params.named_tensors()]
    optimizer = AdamOptimizer(tensors, cfg)
    result = TrainResult(params)
    best_score, best_state, waited = math.inf, params.state_dict(), 0
    started = time.perf_counter()
    logger.info(f"Training on {len(samples)} samples ({len(val_samples)} validation), horizon={T}, lr={cfg.lr}")
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in minibatches(samples, cfg.batch_size, rng, T):
            loss = batch_loss(batch, params, T)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"loss became {value} at epoch {epoch}; lower the learning rate (now {cfg.lr})")
            optimizer.step(tn.backward(loss))
            losses.append(value * batch.positions.shape[0])
        train_loss = float(np.sum(losses)) / len(samples)
        val_loss = evaluate_a_mse(val_samples, params, T) if val_samples else train_loss
        if not math.isfinite(val_loss):
            raise NumericError(f"validation A-MSE became {val_loss} at epoch {epoch}; lower the learning rate (now {cfg.lr})")
        record = EpochRecord(epoch, train_loss, val_loss)
        result.history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.debug(f"epoch {epoch}: train={train_loss:.6g} val={val_loss:.6g}")
        if val_loss < best_score:
            best_score, best_state, waited = val_loss, params.state_dict(), 0
            result.best_epoch = epoch
        else:
            waited += 1
            if waited >= cfg.patience:
                result.stopped_early = True
                logger.info(f"Early stopping at epoch {epoch} (best epoch {result.best_epoch})")
                break
    params.load_state_dict(best_state)
    result.wall_time = time.perf_counter() - started
    logger.info(f"Training finished in {result.wall_time:.1f}s, best validation {best_score:.6g} at epoch {result.best_epoch}")
    return result
