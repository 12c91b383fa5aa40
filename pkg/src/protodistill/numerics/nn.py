"""Small MLP building blocks on top of the tensor engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": T.relu,
    "silu": T.silu,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
}


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=(n_out,)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias)


class MLP:
    """Fully connected stack; ``widths`` includes input and output widths.

    ``activation`` follows every hidden layer; ``output_activation`` (if any)
    follows the last one.
    """

    def __init__(
        self,
        widths: Sequence[int],
        rng: np.random.Generator,
        activation: str = "silu",
        output_activation: str | None = None,
    ):
        if len(widths) < 2:
            raise ValueError(f"MLP needs at least input and output widths, got {list(widths)}")
        self.widths = list(widths)
        self.activation = activation
        self.output_activation = output_activation
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def in_features(self) -> int:
        return self.widths[0]

    @property
    def out_features(self) -> int:
        return self.widths[-1]

    def forward(self, x: Tensor, return_hidden: bool = False):
        act = ACTIVATIONS[self.activation]
        h = x
        hidden = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = act(h)
                hidden = h
        if self.output_activation:
            h = ACTIVATIONS[self.output_activation](h)
        return (h, hidden) if return_hidden else h

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight.data
            out[f"{prefix}.{i}.bias"] = layer.bias.data
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str) -> None:
        for i, layer in enumerate(self.layers):
            for name, p in (("weight", layer.weight), ("bias", layer.bias)):
                key = f"{prefix}.{i}.{name}"
                if key not in state:
                    raise KeyError(f"missing tensor {key!r}")
                arr = np.asarray(state[key], dtype=np.float64)
                if arr.shape != p.shape:
                    raise ValueError(f"{key}: expected shape {p.shape}, got {arr.shape}")
                p.data = arr.copy()


def shapes_from_state(state: dict[str, np.ndarray], prefix: str) -> list[int]:
    """Recover MLP widths from a state dict written by ``MLP.state_dict``."""
    widths = []
    i = 0
    while f"{prefix}.{i}.weight" in state:
        w = state[f"{prefix}.{i}.weight"]
        if not widths:
            widths.append(int(w.shape[0]))
        widths.append(int(w.shape[1]))
        i += 1
    if not widths:
        raise KeyError(f"no tensors with prefix {prefix!r}")
    return widths


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
