"""Minimal dense-network kernel shared by the classifier heads and the
compatibility embedding: batched forward pass, analytic backprop, SGD with
momentum, finite-difference gradient verification, and the TGNN snapshot
format.

Parameters live in float64 so central finite differences at eps=1e-4 are
meaningful; snapshots store float32 (the file round-trips bitwise once a
model has passed through a save/load cycle).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .catalog import atomic_write_bytes

MODEL_MAGIC = b"TGNN"
MODEL_VERSION = 1

ACT_LINEAR = "linear"
ACT_PRELU = "prelu"
_ACT_CODES = {ACT_LINEAR: 0, ACT_PRELU: 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}

PRELU_INIT_SLOPE = 0.25


class ModelFormatError(ValueError):
    """Corrupt or unsupported model snapshot."""


def prelu(x, a):
    """x for x >= 0, a*x otherwise; continuous at 0. Vectorized."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, a * x)


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = ACT_LINEAR
    slopes: np.ndarray | None = None  # per-unit PReLU slopes, (out_dim,)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes: weights {self.weights.shape}, "
                f"bias {self.bias.shape}"
            )
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == ACT_PRELU:
            if self.slopes is None:
                self.slopes = np.full(self.out_dim, PRELU_INIT_SLOPE)
            self.slopes = np.asarray(self.slopes, dtype=np.float64)
            if self.slopes.shape != (self.out_dim,):
                raise ValueError(f"slopes shape {self.slopes.shape} != ({self.out_dim},)")
            if not np.all(np.isfinite(self.slopes)):
                raise ValueError("non-finite PReLU slopes")
        else:
            self.slopes = None

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class Mlp:
    """Stack of dense layers; inverted dropout after each hidden layer in
    training mode only."""

    layers: list[DenseLayer]
    dropout_prob: float = 0.0

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("Mlp needs at least one layer")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError(f"dropout_prob {self.dropout_prob} outside [0, 1)")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.in_dim != prev.out_dim:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "sgd_momentum"  # "sgd" or "sgd_momentum" (momentum 0.9)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def init_mlp(
    dims: Sequence[int],
    seed: int | np.random.Generator,
    hidden_activation: str = ACT_PRELU,
    output_activation: str = ACT_LINEAR,
    dropout_prob: float = 0.0,
) -> Mlp:
    """Seeded scaled-uniform init: weights in +-sqrt(6/(fan_in+fan_out)),
    zero biases, PReLU slopes at 0.25."""
    if len(dims) < 2:
        raise ValueError("dims needs an input and an output size")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        act = output_activation if i == len(dims) - 2 else hidden_activation
        layers.append(DenseLayer(weights=w, bias=np.zeros(fan_out), activation=act))
    return Mlp(layers=layers, dropout_prob=dropout_prob)


@dataclass
class DropoutRng:
    """Counter-based mask source: pass k of a given seed is reproducible
    without replaying passes 0..k-1."""

    seed: int
    counter: int = 0

    def next_pass(self) -> np.random.Generator:
        g = np.random.default_rng((self.seed, self.counter))
        self.counter += 1
        return g


@dataclass
class ForwardPass:
    """Everything backward() needs: inputs, pre-activations, activations and
    the dropout masks actually applied."""

    x: np.ndarray  # (B, in_dim)
    pre: list[np.ndarray]  # z per layer, (B, out_dim)
    post: list[np.ndarray]  # activation output per layer, before dropout
    out: list[np.ndarray]  # layer output after dropout (== post when none)
    masks: list[np.ndarray | None]  # scaled dropout mask per layer or None
    squeeze: bool  # input was a single vector

    @property
    def output(self) -> np.ndarray:
        y = self.out[-1]
        return y[0] if self.squeeze else y


def _as_batch(x: np.ndarray, in_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != in_dim:
            raise ValueError(f"input length {x.shape[0]} != in_dim {in_dim}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != in_dim:
            raise ValueError(f"input width {x.shape[1]} != in_dim {in_dim}")
        return x, False
    raise ValueError(f"input must be 1-D or 2-D, got ndim={x.ndim}")


def _activate(layer: DenseLayer, z: np.ndarray) -> np.ndarray:
    if layer.activation == ACT_PRELU:
        return np.where(z >= 0, z, layer.slopes * z)
    return z


def forward(
    net: Mlp,
    x: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardPass:
    """Run the network on a vector or a (B, in_dim) batch.

    Inference (train=False) is deterministic. Training mode applies inverted
    dropout after each hidden layer: kept units are scaled by 1/(1-p) so the
    expected activation equals the inference activation.
    """
    a, squeeze = _as_batch(x, net.in_dim)
    use_dropout = train and net.dropout_prob > 0.0
    if use_dropout and rng is None:
        raise ValueError("training with dropout needs an rng")
    keep = 1.0 - net.dropout_prob
    pre, post, out, masks = [], [], [], []
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        z = a @ layer.weights.T + layer.bias
        h = _activate(layer, z)
        if use_dropout and i < last:
            mask = (rng.random(h.shape) < keep).astype(np.float64) / keep
            a = h * mask
        else:
            mask = None
            a = h
        pre.append(z)
        post.append(h)
        out.append(a)
        masks.append(mask)
    return ForwardPass(x=np.asarray(x, dtype=np.float64).reshape(-1, net.in_dim),
                       pre=pre, post=post, out=out, masks=masks, squeeze=squeeze)


@dataclass
class Gradients:
    """Parameter gradients mirroring an Mlp, plus the input gradient."""

    weights: list[np.ndarray]
    bias: list[np.ndarray]
    slopes: list[np.ndarray | None]
    x: np.ndarray

    def scaled(self, factor: float) -> "Gradients":
        return Gradients(
            weights=[w * factor for w in self.weights],
            bias=[b * factor for b in self.bias],
            slopes=[None if s is None else s * factor for s in self.slopes],
            x=self.x * factor,
        )

    def add_(self, other: "Gradients") -> None:
        for i in range(len(self.weights)):
            self.weights[i] += other.weights[i]
            self.bias[i] += other.bias[i]
            if self.slopes[i] is not None:
                self.slopes[i] += other.slopes[i]


def zero_gradients(net: Mlp) -> Gradients:
    return Gradients(
        weights=[np.zeros_like(l.weights) for l in net.layers],
        bias=[np.zeros_like(l.bias) for l in net.layers],
        slopes=[None if l.slopes is None else np.zeros_like(l.slopes)
                for l in net.layers],
        x=np.zeros((0, net.in_dim)),
    )


def backward(net: Mlp, fwd: ForwardPass, upstream: np.ndarray) -> Gradients:
    """Backpropagate ``upstream`` (dLoss/dOutput, shaped like the forward
    output) through the recorded pass; gradients are summed over the batch.

    PReLU uses derivative 1 at exactly zero pre-activation; the slope
    gradient collects x*upstream only on the strictly negative side.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != fwd.out[-1].shape:
        raise ValueError(f"upstream shape {g.shape} != output {fwd.out[-1].shape}")
    dW: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    db: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    ds: list[np.ndarray | None] = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if fwd.masks[i] is not None:
            g = g * fwd.masks[i]
        z = fwd.pre[i]
        if layer.activation == ACT_PRELU:
            neg = z < 0
            ds[i] = np.sum(np.where(neg, g * z, 0.0), axis=0)
            dz = g * np.where(neg, layer.slopes, 1.0)
        else:
            dz = g
        a_prev = fwd.x if i == 0 else fwd.out[i - 1]
        dW[i] = dz.T @ a_prev
        db[i] = np.sum(dz, axis=0)
        g = dz @ layer.weights
    return Gradients(weights=dW, bias=db, slopes=ds, x=g)


# --- parameter addressing and the finite-difference harness --------------------

def _param_arrays(net: Mlp) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, layer in enumerate(net.layers):
        out.append((f"layer{i}.weights", layer.weights))
        out.append((f"layer{i}.bias", layer.bias))
        if layer.slopes is not None:
            out.append((f"layer{i}.slopes", layer.slopes))
    return out


def _grad_arrays(grads: Gradients) -> list[np.ndarray]:
    out = []
    for i in range(len(grads.weights)):
        out.append(grads.weights[i])
        out.append(grads.bias[i])
        if grads.slopes[i] is not None:
            out.append(grads.slopes[i])
    return out


def finite_diff_check(
    net: Mlp,
    loss: Callable[[Mlp], tuple[float, Gradients]],
    probes: int = 20,
    eps: float = 1e-4,
    seed: int = 0,
) -> float:
    """Compare ``loss``'s analytic gradients against central differences on
    ``probes`` randomly sampled parameters.

    Returns max over probed parameters of |analytic - numeric| /
    max(|numeric|, 1e-8). The probe set is seeded and the network is
    restored exactly after each perturbation.
    """
    _, grads = loss(net)
    params = _param_arrays(net)
    grad_arrays = _grad_arrays(grads)
    slots = [(ai, j) for ai, (_, arr) in enumerate(params) for j in range(arr.size)]
    rng = np.random.default_rng(seed)
    if len(slots) > probes:
        picked = [slots[k] for k in rng.choice(len(slots), size=probes, replace=False)]
    else:
        picked = slots
    worst = 0.0
    for ai, j in picked:
        arr = params[ai][1]
        flat = arr.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up, _ = loss(net)
        flat[j] = orig - eps
        down, _ = loss(net)
        flat[j] = orig
        numeric = (up - down) / (2.0 * eps)
        analytic = grad_arrays[ai].reshape(-1)[j]
        err = abs(analytic - numeric) / max(abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# --- optimizer -----------------------------------------------------------------

MOMENTUM = 0.9


class SgdOptimizer:
    """Plain SGD or SGD with momentum 0.9, applied in a fixed parameter order."""

    def __init__(self, net: Mlp, learning_rate: float, optimizer: str = "sgd_momentum"):
        if optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {optimizer!r}")
        self.net = net
        self.lr = learning_rate
        self.momentum = MOMENTUM if optimizer == "sgd_momentum" else 0.0
        self._velocity = [np.zeros_like(arr) for _, arr in _param_arrays(net)]

    def step(self, grads: Gradients) -> None:
        params = _param_arrays(self.net)
        garrs = _grad_arrays(grads)
        for v, (_, p), g in zip(self._velocity, params, garrs):
            if self.momentum:
                v *= self.momentum
                v += g
                p -= self.lr * v
            else:
                p -= self.lr * g


# --- snapshot format -----------------------------------------------------------

def _pack_model(net: Mlp, config: TrainConfig | None) -> bytes:
    parts = [MODEL_MAGIC, struct.pack("<HHd", MODEL_VERSION, len(net.layers),
                                      net.dropout_prob)]
    for layer in net.layers:
        parts.append(struct.pack("<IIB", layer.out_dim, layer.in_dim,
                                 _ACT_CODES[layer.activation]))
    for layer in net.layers:
        parts.append(layer.weights.astype("<f4").tobytes())
        parts.append(layer.bias.astype("<f4").tobytes())
        if layer.slopes is not None:
            parts.append(layer.slopes.astype("<f4").tobytes())
    if config is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        parts.append(struct.pack(
            "<dIIQB", config.learning_rate, config.epochs, config.batch_size,
            config.seed, 0 if config.optimizer == "sgd" else 1,
        ))
    return b"".join(parts)


def save_model(net: Mlp, path: str | Path, config: TrainConfig | None = None) -> None:
    atomic_write_bytes(path, _pack_model(net, config))


def _unpack_model(data: bytes, what: str) -> tuple[Mlp, TrainConfig | None]:
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ModelFormatError(
                f"{what}: truncated at byte {len(data)} (needed {pos + size})"
            )
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    def take_f32(count: int) -> np.ndarray:
        nonlocal pos
        size = 4 * count
        if pos + size > len(data):
            raise ModelFormatError(
                f"{what}: truncated at byte {len(data)} (needed {pos + size})"
            )
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        pos += size
        return arr.astype(np.float64)

    if take("<4s")[0] != MODEL_MAGIC:
        raise ModelFormatError(f"{what}: bad magic")
    version, n_layers, dropout_prob = take("<HHd")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{what}: unsupported version {version}")
    shapes = [take("<IIB") for _ in range(n_layers)]
    layers = []
    for out_dim, in_dim, act_code in shapes:
        if act_code not in _ACT_NAMES:
            raise ModelFormatError(f"{what}: unknown activation code {act_code}")
        act = _ACT_NAMES[act_code]
        w = take_f32(out_dim * in_dim).reshape(out_dim, in_dim)
        b = take_f32(out_dim)
        slopes = take_f32(out_dim) if act == ACT_PRELU else None
        layers.append(DenseLayer(weights=w, bias=b, activation=act, slopes=slopes))
    (has_config,) = take("<B")
    config = None
    if has_config:
        lr, epochs, batch, seed, opt = take("<dIIQB")
        config = TrainConfig(
            learning_rate=lr, epochs=epochs, batch_size=batch, seed=seed,
            optimizer="sgd" if opt == 0 else "sgd_momentum",
        )
    if pos != len(data):
        raise ModelFormatError(f"{what}: {len(data) - pos} trailing bytes")
    return Mlp(layers=layers, dropout_prob=dropout_prob), config


def load_model(path: str | Path) -> tuple[Mlp, TrainConfig | None]:
    path = Path(path)
    if not path.exists():
        raise ModelFormatError(f"no such model file: {path}")
    return _unpack_model(path.read_bytes(), what=str(path))
