"""Fully-connected networks with explicit backprop, Adam, and flat checkpoints.

Parameters are kept as a flat list ``[W1, b1, W2, b2, ...]`` where ``Wk`` has
shape ``(fan_in, fan_out)`` so a layer is ``h @ W + b``. Everything is computed
in float64; checkpoints are stored as little-endian float32.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu")
OUTPUTS = ("none", "softmax")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "none"
    negative_slope: float = 0.2

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least an input and an output size")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUTS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_sizes"] = list(self.layer_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(**{**d, "layer_sizes": tuple(d["layer_sizes"])})


@dataclass
class TrainConfig:
    """Hyperparameters of the feature generator.

    ``alpha`` weights the gradient penalty, ``beta`` the cycle term and
    ``gamma`` the cosine embedding term.
    """

    alpha: float = 10.0
    beta: float = 0.01
    gamma: float = 0.1
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    critic_steps_per_gen_step: int = 5
    d_z: int = 16
    hidden: int = 256
    seed: int = 0
    cycle_squared: bool = False
    cycle_on_real: bool = False
    generator_activation: str = "leaky_relu"
    adam_betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.critic_steps_per_gen_step < 1:
            raise ValueError("batch_size and critic_steps_per_gen_step must be >= 1, epochs >= 0")
        if self.d_z < 1 or self.hidden < 1:
            raise ValueError("d_z and hidden must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    d_z: int

    def __post_init__(self):
        if self.d_z <= 0:
            raise ValueError("d_z must be positive")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.d_z))


def init_mlp(spec: MlpSpec, seed: int) -> list[np.ndarray]:
    """Glorot-uniform weights, U(-sqrt(6/(fan_in+fan_out)), +...), zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def _act(a, spec):
    if spec.hidden_activation == "relu":
        return np.maximum(a, 0.0)
    return np.where(a > 0, a, spec.negative_slope * a)


def _act_slope(a, spec):
    if spec.hidden_activation == "relu":
        return (a > 0).astype(a.dtype)
    return np.where(a > 0, 1.0, spec.negative_slope)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_input(params, spec, x):
    if len(params) != 2 * spec.n_layers:
        raise ValueError("parameter list does not match spec")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.layer_sizes[0]:
        raise ValueError(
            f"input width mismatch: expected {spec.layer_sizes[0]}, got shape {x.shape}"
        )
    return x


def forward_cache(params, spec: MlpSpec, x):
    """Run the network and keep what backward() needs.

    Returns the pre-output-activation values (logits) and the cache. The
    output activation is left to the caller's loss.
    """
    h = _check_input(params, spec, x)
    inputs, pre = [h], []
    for k in range(spec.n_layers):
        a = h @ params[2 * k] + params[2 * k + 1]
        if k < spec.n_layers - 1:
            pre.append(a)
            h = _act(a, spec)
            inputs.append(h)
        else:
            out = a
    return out, (inputs, pre)


def forward(params, spec: MlpSpec, x) -> np.ndarray:
    out, _ = forward_cache(params, spec, x)
    if spec.output_activation == "softmax":
        return softmax(out)
    return out


def backward(params, spec: MlpSpec, cache, grad_out):
    """Backprop ``grad_out`` (gradient w.r.t. the logits) through the net.

    Returns ``(param_grads, grad_input)``.
    """
    inputs, pre = cache
    g = np.asarray(grad_out, dtype=np.float64)
    grads = [None] * len(params)
    for k in reversed(range(spec.n_layers)):
        grads[2 * k] = inputs[k].T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ params[2 * k].T
        if k > 0:
            g = g * _act_slope(pre[k - 1], spec)
    return grads, g


def input_gradient(params, spec: MlpSpec, x) -> np.ndarray:
    """Gradient of a scalar-output network w.r.t. each input row."""
    if spec.layer_sizes[-1] != 1:
        raise ValueError("input_gradient requires a scalar-output network")
    out, cache = forward_cache(params, spec, x)
    _, gx = backward(params, spec, cache, np.ones_like(out))
    return gx


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns new params and a new state."""
    if len(grads) != len(params):
        raise ValueError("number of gradients does not match number of parameters")
    for p, g in zip(params, grads):
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


class Adam:
    """Stateful convenience wrapper around :func:`adam_step`."""

    def __init__(self, params, lr: float, betas: tuple[float, float] = (0.9, 0.999)):
        self.lr = lr
        self.state = AdamState.zeros_like(params, beta1=betas[0], beta2=betas[1])

    def step(self, params, grads):
        params, self.state = adam_step(params, grads, self.state, self.lr)
        return params


@dataclass
class Network:
    spec: MlpSpec
    params: list[np.ndarray] = field(repr=False)

    @classmethod
    def init(cls, spec: MlpSpec, seed: int) -> "Network":
        return cls(spec, init_mlp(spec, seed))

    def __call__(self, x) -> np.ndarray:
        return forward(self.params, self.spec, x)

    def logits(self, x) -> np.ndarray:
        return forward_cache(self.params, self.spec, x)[0]


def save_checkpoint(net: Network, dir_path) -> None:
    """Write ``params.f32`` (W1, b1, W2, b2, ... flattened row-major) and ``shape.json``."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    flat = np.concatenate([p.ravel() for p in net.params]).astype("<f4")
    (d / "params.f32").write_bytes(flat.tobytes())
    meta = {
        "spec": net.spec.to_dict(),
        "shapes": [list(p.shape) for p in net.params],
        "order": "W1,b1,W2,b2,...; W is (fan_in, fan_out) row-major",
    }
    (d / "shape.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(dir_path) -> Network:
    d = Path(dir_path)
    meta = json.loads((d / "shape.json").read_text())
    spec = MlpSpec.from_dict(meta["spec"])
    flat = np.frombuffer((d / "params.f32").read_bytes(), dtype="<f4").astype(np.float64)
    shapes = [tuple(s) for s in meta["shapes"]]
    expected = sum(int(np.prod(s)) for s in shapes)
    if flat.size != expected or expected != spec.n_params:
        raise ValueError(f"checkpoint size mismatch: {flat.size} values, expected {expected}")
    params, off = [], 0
    for s in shapes:
        n = int(np.prod(s))
        params.append(flat[off:off + n].reshape(s).copy())
        off += n
    return Network(spec, params)
