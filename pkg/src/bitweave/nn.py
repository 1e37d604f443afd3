"""Small numpy neural networks with hand-written backprop."""
from __future__ import annotations

import logging
import os
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# Output layers start near zero: early bootstrap targets are not swamped by init noise,
# and the reward model does not carry a random input-dependent offset onto unseen states.
OUTPUT_INIT_SCALE = 0.01


def _he_uniform(rng, fan_in, shape):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError


class Conv3x3(Layer):
    """Stride-1 3x3 convolution with zero padding that keeps the spatial size."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.params["w"] = _he_uniform(rng, 9 * c_in, (c_out, c_in, 3, 3))
        self.params["b"] = np.zeros(c_out)

    def forward(self, x):
        b, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.stack([xp[:, :, i:i + h, j:j + w] for i in range(3) for j in range(3)], axis=2)
        cols = cols.transpose(0, 3, 4, 1, 2).reshape(b * h * w, c * 9)
        wmat = self.params["w"].reshape(self.params["w"].shape[0], -1)
        out = cols @ wmat.T + self.params["b"]
        self._cache = (x.shape, cols)
        return out.reshape(b, h, w, -1).transpose(0, 3, 1, 2)

    def backward(self, g):
        (b, c, h, w), cols = self._cache
        c_out = g.shape[1]
        g2 = g.transpose(0, 2, 3, 1).reshape(b * h * w, c_out)
        wmat = self.params["w"].reshape(c_out, -1)
        self.grads["w"] = (g2.T @ cols).reshape(self.params["w"].shape)
        self.grads["b"] = g2.sum(axis=0)
        dcols = (g2 @ wmat).reshape(b, h, w, c, 9).transpose(0, 3, 4, 1, 2)
        dxp = np.zeros((b, c, h + 2, w + 2))
        k = 0
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, k]
                k += 1
        return dxp[:, :, 1:-1, 1:-1]


class Dense(Layer):
    def __init__(self, n_in, n_out, rng, scale=1.0):
        super().__init__()
        self.params["w"] = scale * _he_uniform(rng, n_in, (n_in, n_out))
        self.params["b"] = np.zeros(n_out)

    def forward(self, x):
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, g):
        self.grads["w"] = self._x.T @ g
        self.grads["b"] = g.sum(axis=0)
        return g @ self.params["w"].T


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask


class Reshape(Layer):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        self._in = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, g):
        return g.reshape(self._in)


class Sequential:
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, g: np.ndarray) -> dict[str, np.ndarray]:
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return self.grads()

    def params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                src = params[f"{i}.{k}"]
                if src.shape != layer.params[k].shape:
                    raise ValueError(f"shape mismatch for {i}.{k}: {src.shape} vs {layer.params[k].shape}")
                layer.params[k][...] = src

    def copy_from(self, other: "Sequential") -> None:
        self.set_params(other.params())


def hidden_width(order: int, total_bits: int, scale: float = 4.0) -> int:
    return max(1, int(round(scale * order * total_bits)))


class QNetwork(Sequential):
    """Two 3x3 conv layers (16 and 32 maps) then two dense layers, one output per mode."""

    def __init__(self, order: int, total_bits: int, hidden_scale: float = 4.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.order, self.total_bits = order, total_bits
        self.hidden = hidden_width(order, total_bits, hidden_scale)
        cells = order * total_bits
        super().__init__([
            Reshape((1, order, total_bits)),
            Conv3x3(1, 16, rng), ReLU(),
            Conv3x3(16, 32, rng), ReLU(),
            Reshape((32 * cells,)),
            Dense(32 * cells, self.hidden, rng), ReLU(),
            Dense(self.hidden, order, rng, scale=OUTPUT_INIT_SCALE),
        ])

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-2:] != (self.order, self.total_bits):
            raise ValueError(f"expected states of shape {(self.order, self.total_bits)}, got {x.shape}")
        if x.ndim == 2:
            return super().forward(x[None])[0]
        return super().forward(x)

    __call__ = forward


class RewardModel(Sequential):
    """Fully connected regressor from a terminal state to predicted log-speedup."""

    def __init__(self, order: int, total_bits: int, hidden_scale: float = 4.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        cells = order * total_bits
        h = hidden_width(order, total_bits, hidden_scale)
        self.order, self.total_bits = order, total_bits
        super().__init__([
            Reshape((cells,)),
            Dense(cells, h, rng), ReLU(),
            Dense(h, h, rng), ReLU(),
            Dense(h, 1, rng, scale=OUTPUT_INIT_SCALE),
            Reshape(()),
        ])

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            return float(super().forward(x[None])[0])
        return super().forward(x)

    __call__ = forward


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> bool:
        """Update ``params`` in place. Returns False, leaving everything untouched, on non-finite grads."""
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                log.warning("rejected Adam step: non-finite gradient in %s", k)
                return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            params[k] -= lr * mhat / (np.sqrt(vhat) + self.eps)
        return True

    def state(self) -> dict[str, np.ndarray]:
        out = {"__t": np.array(self.t)}
        out.update({f"m/{k}": v for k, v in self.m.items()})
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["__t"])
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v/")}


def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray]) -> None:
    """Versioned ``.npz`` dump; arrays round-trip bitwise."""
    np.savez(path, __version__=np.array(CHECKPOINT_VERSION), **arrays)


def load_arrays(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with np.load(path) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return {k: data[k].copy() for k in data.files if k != "__version__"}


def numerical_gradient(f: Callable[[], float], param: np.ndarray, h: float = 1e-5,
                       index=None) -> float | np.ndarray:
    """Central difference of ``f`` with respect to ``param`` (mutated and restored in place)."""
    if index is not None:
        old = param[index]
        param[index] = old + h
        fp = f()
        param[index] = old - h
        fm = f()
        param[index] = old
        return (fp - fm) / (2 * h)
    grad = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        grad[idx] = numerical_gradient(f, param, h, idx)
    return grad
