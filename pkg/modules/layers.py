# modules/layers.py
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from modules import tensor as tn
from modules.tensor import Tensor


@dataclass
class MLP:
    """Dense stack with SiLU between layers and a linear last layer."""
    weights: List[Tensor]
    biases: List[Tensor]

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, name: str = "mlp",
             zero_last: bool = False) -> "MLP":
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            w = np.zeros((fan_in, fan_out)) if (last and zero_last) else rng.normal(0.0, 1.0 / np.sqrt(max(fan_in, 1)), size=(fan_in, fan_out))
            weights.append(tn.parameter(w, name=f"{name}.w{i}"))
            biases.append(tn.parameter(np.zeros((1, fan_out)), name=f"{name}.b{i}"))
        return cls(weights, biases)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < len(self.weights) - 1:
                x = tn.silu(x)
        return x

    def tensors(self) -> List[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]
