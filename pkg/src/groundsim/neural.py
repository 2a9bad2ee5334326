"""Small dense networks in numpy: MLP forward/backward, losses, Adam.

Weights are kept as a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` of shape
``(fan_in, fan_out)`` so a batch ``X`` maps as ``X @ W + b``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("identity", "softmax", "relu")


class StaleCacheError(RuntimeError):
    """Backward called with a cache from before the latest weight update."""


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    hidden: str = "relu"
    output: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"need >= 2 layer widths, all >= 1; got {self.widths}")
        if self.hidden not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden!r}")
        if self.output not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output!r}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]


def glorot_init(spec: MlpSpec, rng: np.random.Generator) -> list[np.ndarray]:
    weights = []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        weights.append(np.zeros(fan_out))
    return weights


def zeros_init(spec: MlpSpec) -> list[np.ndarray]:
    weights = []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        weights += [np.zeros((fan_in, fan_out)), np.zeros(fan_out)]
    return weights


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Cache:
    spec: MlpSpec
    weights: list[np.ndarray]
    inputs: list[np.ndarray]  # input to each affine layer
    pre: list[np.ndarray]  # pre-activation of each layer
    squeeze: bool
    version: object = None


def mlp_forward(spec: MlpSpec, weights: Sequence[np.ndarray], x) -> tuple[np.ndarray, Cache]:
    """Affine + ReLU layers; the output layer applies ``spec.output``.

    ``softmax`` outputs raw logits here; the softmax is folded into
    :func:`cross_entropy_loss`.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ValueError(f"input width {x.shape[-1]} does not match network input {spec.n_in}")
    n_layers = len(spec.widths) - 1
    inputs, pre = [], []
    h = x
    for i in range(n_layers):
        W, b = weights[2 * i], weights[2 * i + 1]
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        if i < n_layers - 1 or spec.output == "relu":
            h = np.maximum(z, 0.0)
        else:
            h = z
    out = h[0] if squeeze else h
    return out, Cache(spec, list(weights), inputs, pre, squeeze)


def mlp_backward(cache: Cache, output_grad) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode gradients: ``(weight_grads, input_grad)``."""
    spec = cache.spec
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    n_layers = len(spec.widths) - 1
    grads: list[np.ndarray] = [None] * (2 * n_layers)
    for i in reversed(range(n_layers)):
        if i < n_layers - 1 or spec.output == "relu":
            g = g * (cache.pre[i] > 0.0)
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ cache.weights[2 * i].T
    return grads, (g[0] if cache.squeeze else g)


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def cross_entropy_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy. ``labels`` is an int (single logits vector) or int array."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    y = np.atleast_1d(np.asarray(labels))
    if y.shape[0] != z.shape[0]:
        raise ValueError("one label per row required")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise IndexError(f"class index out of range 0..{z.shape[1] - 1}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(log_norm - shifted[rows, y]))
    grad = softmax(z)
    grad[rows, y] -= 1.0
    grad /= z.shape[0]
    return loss, (grad[0] if single else grad)


def global_norm(arrays: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))


class Adam:
    """Adam with global-norm gradient clipping applied before the moment update."""

    def __init__(self, lr: float = 1e-3, grad_clip: float = 0.5, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if not lr > 0:
            raise ValueError("lr must be > 0")
        if not grad_clip > 0:
            raise ValueError("grad_clip must be > 0")
        self.lr = lr
        self.grad_clip = grad_clip
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def clip(self, grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        norm = global_norm(grads)
        if norm > self.grad_clip:
            scale = self.grad_clip / norm
            return [g * scale for g in grads]
        return list(grads)

    def step(self, weights: list[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Update ``weights`` in place and return them."""
        if len(weights) != len(grads) or any(w.shape != g.shape for w, g in zip(weights, grads)):
            raise ValueError("weights and gradients differ in shape")
        if self.m is None:
            self.m = [np.zeros_like(w) for w in weights]
            self.v = [np.zeros_like(w) for w in weights]
        grads = self.clip(grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for w, g, m, v in zip(weights, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return weights

    def state_dict(self) -> dict:
        return {"lr": self.lr, "grad_clip": self.grad_clip, "t": self.t}


class Mlp:
    """Weights plus a version counter so stale caches are detected."""

    def __init__(self, spec: MlpSpec, weights: list[np.ndarray] | None = None,
                 rng: np.random.Generator | None = None):
        self.spec = spec
        if weights is None:
            weights = glorot_init(spec, rng if rng is not None else np.random.default_rng(0))
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.version = 0

    def forward(self, x) -> tuple[np.ndarray, Cache]:
        out, cache = mlp_forward(self.spec, self.weights, x)
        cache.version = (id(self), self.version)
        return out, cache

    def __call__(self, x) -> np.ndarray:
        return mlp_forward(self.spec, self.weights, x)[0]

    def backward(self, cache: Cache, output_grad) -> tuple[list[np.ndarray], np.ndarray]:
        if cache.version != (id(self), self.version):
            raise StaleCacheError("cache predates the current weights")
        return mlp_backward(cache, output_grad)

    def apply_update(self, optimizer: Adam, grads: Sequence[np.ndarray]) -> None:
        optimizer.step(self.weights, grads)
        self.version += 1

    def copy(self) -> "Mlp":
        return Mlp(self.spec, [w.copy() for w in self.weights])

    def load_from(self, other: "Mlp") -> None:
        for dst, src in zip(self.weights, other.weights):
            dst[...] = src
        self.version += 1

    def save(self, path: str | Path) -> None:
        save_weights(self.spec, self.weights, path)

    @classmethod
    def load(cls, path: str | Path) -> "Mlp":
        spec, weights = load_weights(path)
        return cls(spec, weights)


_MAGIC = b"GSMLP1\n"


def dumps_weights(spec: MlpSpec, weights: Sequence[np.ndarray]) -> bytes:
    """Header line ``widths=..;hidden=..;output=..`` then little-endian float64 values.

    Values are written layer by layer: ``W`` row-major (fan_in x fan_out), then ``b``.
    """
    header = f"widths={','.join(map(str, spec.widths))};hidden={spec.hidden};output={spec.output}\n"
    body = b"".join(np.ascontiguousarray(w, dtype="<f8").tobytes() for w in weights)
    return _MAGIC + header.encode("ascii") + struct.pack("<Q", len(body) // 8) + body


def loads_weights(data: bytes) -> tuple[MlpSpec, list[np.ndarray]]:
    if not data.startswith(_MAGIC):
        raise ValueError("not a weight file")
    rest = data[len(_MAGIC):]
    line, _, rest = rest.partition(b"\n")
    fields = dict(item.split("=", 1) for item in line.decode("ascii").split(";"))
    spec = MlpSpec(tuple(int(w) for w in fields["widths"].split(",")), fields["hidden"], fields["output"])
    (count,) = struct.unpack("<Q", rest[:8])
    values = np.frombuffer(rest[8:8 + 8 * count], dtype="<f8").astype(np.float64)
    weights, offset = [], 0
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        weights.append(values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        offset += fan_in * fan_out
        weights.append(values[offset:offset + fan_out].copy())
        offset += fan_out
    if offset != count:
        raise ValueError("weight count does not match header")
    return spec, weights


def save_weights(spec: MlpSpec, weights: Sequence[np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(dumps_weights(spec, weights))


def load_weights(path: str | Path) -> tuple[MlpSpec, list[np.ndarray]]:
    return loads_weights(Path(path).read_bytes())
