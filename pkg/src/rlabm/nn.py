"""Small feedforward networks with exact reverse-mode gradients.

The same :class:`MlpParams` container backs the actor (softmax head over
actions), the local critic (one linear output) and the central Q critic (one
linear output per agent). Inputs may be a single feature vector or a batch
``(T, width)``; gradients from a batch are summed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, NumericError
from .rng import RngStream

ACTIVATIONS = ("tanh", "linear", "relu")

_MAGIC = b"RLMLP"
_FORMAT_VERSION = 1

# Standard tanh gain; with the plain fan-in bound a 4-deep tanh stack starts
# out almost linear in its inputs.
TANH_GAIN = 5.0 / 3.0


@dataclass
class MlpParams:
    """Weights ``W[l]`` of shape (in, out) and biases ``b[l]`` of shape (out,)."""

    layer_specs: list[tuple[int, int, str]]
    weights: list[np.ndarray]
    biases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.layer_specs = [(int(i), int(o), str(a)) for i, o, a in self.layer_specs]
        if len(self.weights) != len(self.layer_specs) or len(self.biases) != len(self.layer_specs):
            raise ContractViolation("one weight matrix and one bias vector per layer")
        prev_out = None
        for (n_in, n_out, act), w, b in zip(self.layer_specs, self.weights, self.biases):
            if act not in ACTIVATIONS:
                raise ContractViolation(f"unknown activation {act!r}")
            if prev_out is not None and n_in != prev_out:
                raise ContractViolation("adjacent layer widths are inconsistent")
            if w.shape != (n_in, n_out) or b.shape != (n_out,):
                raise ContractViolation(f"layer shape mismatch: {w.shape}, {b.shape} vs ({n_in}, {n_out})")
            prev_out = n_out

    @property
    def input_width(self) -> int:
        return self.layer_specs[0][0]

    @property
    def output_width(self) -> int:
        return self.layer_specs[-1][1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_specs), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_specs), [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases]
        )

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = vec[pos : pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = vec[pos : pos + b.size]
            pos += b.size

    def add_scaled(self, other: "MlpParams", scale: float) -> "MlpParams":
        """Return ``self + scale * other`` as a new parameter set."""
        return MlpParams(
            list(self.layer_specs),
            [w + scale * g for w, g in zip(self.weights, other.weights)],
            [b + scale * g for b, g in zip(self.biases, other.biases)],
        )

    def allclose(self, other: "MlpParams", atol: float = 0.0) -> bool:
        return all(np.allclose(a, b, rtol=0, atol=atol) for a, b in zip(self.weights, other.weights)) and all(
            np.allclose(a, b, rtol=0, atol=atol) for a, b in zip(self.biases, other.biases)
        )

    def equal(self, other: "MlpParams") -> bool:
        return (
            self.layer_specs == other.layer_specs
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


def layer_specs_for(n_in: int, hidden: list[int] | tuple[int, ...], n_out: int, activation: str = "tanh"):
    widths = [n_in, *hidden, n_out]
    specs = []
    for li in range(len(widths) - 1):
        act = activation if li < len(widths) - 2 else "linear"
        specs.append((widths[li], widths[li + 1], act))
    return specs


def init_mlp(
    n_in: int,
    hidden: list[int] | tuple[int, ...],
    n_out: int,
    rng: RngStream,
    activation: str = "tanh",
    gain: float = TANH_GAIN,
) -> MlpParams:
    """Weights ~ Uniform(-b, b) with ``b = gain * sqrt(3 / fan_in)``; zero biases."""
    specs = layer_specs_for(n_in, hidden, n_out, activation)
    weights, biases = [], []
    for fan_in, fan_out, _ in specs:
        bound = gain * math.sqrt(3.0 / fan_in)
        weights.append(rng.generator.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(specs, weights, biases)


def zero_mlp(n_in: int, hidden, n_out: int, activation: str = "tanh") -> MlpParams:
    specs = layer_specs_for(n_in, hidden, n_out, activation)
    return MlpParams(specs, [np.zeros((i, o)) for i, o, _ in specs], [np.zeros(o) for _, o, _ in specs])


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0).astype(float)
    return np.ones_like(z)


def _as_batch(params: MlpParams, obs) -> tuple[np.ndarray, bool]:
    x = np.asarray(obs, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_width:
        raise ContractViolation(f"observation width {x.shape[-1]} != network input width {params.input_width}")
    return x, single


def forward(params: MlpParams, obs) -> np.ndarray:
    """Raw network outputs (logits or values); batch-shaped like ``obs``."""
    x, single = _as_batch(params, obs)
    for (_, _, act), w, b in zip(params.layer_specs, params.weights, params.biases):
        x = _activate(x @ w + b, act)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite activation in forward pass")
    return x[0] if single else x


def _forward_cache(params: MlpParams, x: np.ndarray):
    zs, acts = [], [x]
    for (_, _, act), w, b in zip(params.layer_specs, params.weights, params.biases):
        z = acts[-1] @ w + b
        zs.append(z)
        acts.append(_activate(z, act))
    return zs, acts


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def forward_policy(params: MlpParams, obs) -> np.ndarray:
    """Action probabilities: softmax over the final-layer logits."""
    return softmax(forward(params, obs))


def forward_value(params: MlpParams, obs):
    """Scalar value head. With a batch input, returns a vector of values."""
    out = forward(params, obs)
    if params.output_width != 1:
        raise ContractViolation("forward_value expects a single-output network; use forward() for multi-head")
    return float(out[0]) if out.ndim == 1 else out[:, 0]


def backprop(params: MlpParams, obs, grad_out) -> MlpParams:
    """Gradient of ``sum(grad_out * forward(params, obs))`` w.r.t. all parameters.

    ``grad_out`` has the shape of the network output for ``obs`` (vector for a
    single observation, ``(T, out)`` for a batch). Batch contributions add.
    """
    x, single = _as_batch(params, obs)
    g = np.asarray(grad_out, dtype=float)
    if single:
        g = g[None, :]
    if g.shape != (x.shape[0], params.output_width):
        raise ContractViolation(f"upstream gradient shape {g.shape} does not match output")
    zs, acts = _forward_cache(params, x)
    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.biases)
    delta = g
    for li in range(len(params.weights) - 1, -1, -1):
        kind = params.layer_specs[li][2]
        delta = delta * _activation_grad(zs[li], acts[li + 1], kind)
        grad_w[li] = acts[li].T @ delta
        grad_b[li] = delta.sum(axis=0)
        if li > 0:
            delta = delta @ params.weights[li].T
    grads = MlpParams(list(params.layer_specs), grad_w, grad_b)
    for arr in grad_w + grad_b:
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite gradient")
    return grads


def log_policy_grad(params: MlpParams, obs, actions, weights=None) -> MlpParams:
    """Sum over the batch of ``weight_t * grad log pi(a_t | s_t)``."""
    x, single = _as_batch(params, obs)
    a = np.atleast_1d(np.asarray(actions, dtype=int))
    w = np.ones(len(a)) if weights is None else np.atleast_1d(np.asarray(weights, dtype=float))
    probs = softmax(forward(params, x))
    upstream = -probs
    upstream[np.arange(len(a)), a] += 1.0
    return backprop(params, x, upstream * w[:, None])


def sample_action(probs, rng: RngStream) -> tuple[int, float]:
    p = np.asarray(probs, dtype=float)
    u = rng.random()
    action = int(np.searchsorted(np.cumsum(p), u, side="right"))
    action = min(action, len(p) - 1)
    # searchsorted can land on a zero-probability tail entry only through rounding
    while p[action] == 0.0 and action > 0:
        action -= 1
    return action, float(np.log(p[action]))


def _scalar_loss(params: MlpParams, obs, head: str, action: int) -> float:
    if head == "value":
        return float(np.sum(forward(params, obs)[..., 0]))
    probs = forward_policy(params, obs)
    return float(np.log(probs[..., action]).sum())


def grad_check(params: MlpParams, obs, epsilon: float = 1e-5, head: str = "policy", action: int = 0) -> float:
    """Max relative error between backprop and central differences.

    The scalar checked is ``log pi(action | obs)`` for ``head="policy"`` and
    the first output for ``head="value"``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ContractViolation("epsilon must lie in [1e-7, 1e-3]")
    if head == "value":
        out_shape = np.shape(forward(params, obs))
        upstream = np.zeros(out_shape)
        upstream[..., 0] = 1.0
        analytic = backprop(params, obs, upstream).flat()
    else:
        analytic = log_policy_grad(params, np.atleast_2d(obs), [action] * np.atleast_2d(obs).shape[0]).flat()
    base = params.flat()
    probe = params.copy()
    numeric = np.empty_like(base)
    for idx in range(base.size):
        shifted = base.copy()
        shifted[idx] = base[idx] + epsilon
        probe.set_flat(shifted)
        up = _scalar_loss(probe, obs, head, action)
        shifted[idx] = base[idx] - epsilon
        probe.set_flat(shifted)
        down = _scalar_loss(probe, obs, head, action)
        numeric[idx] = (up - down) / (2.0 * epsilon)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-7)
    return float(np.max(np.abs(analytic - numeric) / denom))


# Persistence ---------------------------------------------------------------------


def save_bundle(path: str | Path, networks: dict[str, MlpParams]) -> None:
    """Binary layout: magic, version, JSON header length, JSON header, then
    float64 little-endian row-major arrays in header order."""
    header = {
        "version": _FORMAT_VERSION,
        "networks": [{"name": name, "layers": [list(s) for s in p.layer_specs]} for name, p in networks.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for p in networks.values():
            for w, b in zip(p.weights, p.biases):
                fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_bundle(path: str | Path) -> dict[str, MlpParams]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a policy bundle")
    pos = len(_MAGIC)
    version, hlen = struct.unpack_from("<II", data, pos)
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported bundle version {version}")
    pos += 8
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    out = {}
    for net in header["networks"]:
        specs = [tuple(s) for s in net["layers"]]
        ws, bs = [], []
        for n_in, n_out, _ in specs:
            w = np.frombuffer(data, dtype="<f8", count=n_in * n_out, offset=pos).reshape(n_in, n_out).copy()
            pos += 8 * n_in * n_out
            b = np.frombuffer(data, dtype="<f8", count=n_out, offset=pos).copy()
            pos += 8 * n_out
            ws.append(w)
            bs.append(b)
        out[net["name"]] = MlpParams(specs, ws, bs)
    return out
