"""Three-part network with hand-rolled forward/backward passes.

An extractor MLP (ReLU hidden layers, linear output) feeds a linear
classifier. During training a small residual head ("bias attractor", one
hidden ReLU layer) reads the normalized classifier scores through a
stop-gradient and adds a correction to the logits; at evaluation time the
head is dropped entirely. EMA shadows of extractor and classifier exist for
evaluation only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import softmax

NORM_MODES = ("softmax_input", "l2_input")

CHECKPOINT_VERSION = 1

Layer = tuple[np.ndarray, np.ndarray]  # (W: (fan_in, fan_out), b: (fan_out,))


@dataclass
class ModelState:
    theta: list[Layer]
    phi_w: np.ndarray
    phi_b: np.ndarray
    omega_w1: np.ndarray
    omega_b1: np.ndarray
    omega_w2: np.ndarray
    omega_b2: np.ndarray
    ema_theta: list[Layer] = field(default_factory=list)
    ema_phi_w: np.ndarray | None = None
    ema_phi_b: np.ndarray | None = None
    step_count: int = 0

    @property
    def num_classes(self) -> int:
        return self.phi_b.size

    @property
    def feature_dim(self) -> int:
        return self.phi_w.shape[0]

    @property
    def attractor_hidden(self) -> int:
        return self.omega_b1.size

    def extractor_dims(self) -> list[int]:
        return [self.theta[0][0].shape[0]] + [w.shape[1] for w, _ in self.theta]

    def omega_arrays(self) -> list[np.ndarray]:
        return [self.omega_w1, self.omega_b1, self.omega_w2, self.omega_b2]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _copy_layers(layers: list[Layer]) -> list[Layer]:
    return [(w.copy(), b.copy()) for w, b in layers]


def init_model(dims, num_classes: int, attractor_hidden: int, rng: np.random.Generator) -> ModelState:
    """Build a fresh model. dims lists the extractor layer widths, input
    first and feature dim last (so len(dims) >= 2). Extractor, classifier
    and attractor hidden weights get scaled-uniform init with zero biases;
    the attractor OUTPUT layer starts at exactly zero, so the residual
    correction is the identity at step 0.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"bad extractor dims {dims}")
    if num_classes < 2 or attractor_hidden < 1:
        raise ValueError("need num_classes >= 2 and attractor_hidden >= 1")
    theta = [
        (_glorot(rng, dims[i], dims[i + 1]), np.zeros(dims[i + 1]))
        for i in range(len(dims) - 1)
    ]
    phi_w = _glorot(rng, dims[-1], num_classes)
    phi_b = np.zeros(num_classes)
    omega_w1 = _glorot(rng, num_classes, attractor_hidden)
    omega_b1 = np.zeros(attractor_hidden)
    omega_w2 = np.zeros((attractor_hidden, num_classes))
    omega_b2 = np.zeros(num_classes)
    state = ModelState(theta, phi_w, phi_b, omega_w1, omega_b1, omega_w2, omega_b2)
    state.ema_theta = _copy_layers(theta)
    state.ema_phi_w = phi_w.copy()
    state.ema_phi_b = phi_b.copy()
    return state


def copy_state(state: ModelState) -> ModelState:
    return ModelState(
        _copy_layers(state.theta),
        state.phi_w.copy(),
        state.phi_b.copy(),
        state.omega_w1.copy(),
        state.omega_b1.copy(),
        state.omega_w2.copy(),
        state.omega_b2.copy(),
        _copy_layers(state.ema_theta),
        state.ema_phi_w.copy(),
        state.ema_phi_b.copy(),
        state.step_count,
    )


def forward_features(x: np.ndarray, theta: list[Layer]) -> np.ndarray:
    z, _ = features_with_cache(x, theta)
    return z


def features_with_cache(x: np.ndarray, theta: list[Layer]):
    """Extractor forward pass: ReLU after every layer except the last.
    Cache holds each layer's input plus hidden preactivations for backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != theta[0][0].shape[0]:
        raise ValueError(f"input shape {x.shape} does not match extractor width {theta[0][0].shape[0]}")
    inputs = []
    preacts = []
    h = x
    for li, (w, b) in enumerate(theta):
        inputs.append(h)
        pre = h @ w + b
        if li < len(theta) - 1:
            preacts.append(pre)
            h = np.maximum(pre, 0.0)
        else:
            h = pre
    return h, (inputs, preacts)


def features_backward(cache, theta: list[Layer], d_out: np.ndarray, need_dx: bool = False):
    """Backprop d_out through the extractor; returns per-layer (dW, db) and
    optionally the gradient w.r.t. the input."""
    inputs, preacts = cache
    grads: list[Layer] = [None] * len(theta)  # type: ignore[list-item]
    d = d_out
    for li in range(len(theta) - 1, -1, -1):
        w, _ = theta[li]
        grads[li] = (inputs[li].T @ d, d.sum(axis=0))
        if li > 0 or need_dx:
            d = d @ w.T
            if li > 0:
                d = d * (preacts[li - 1] > 0.0)
    dx = d if need_dx else None
    return grads, dx


def classifier_scores(z: np.ndarray, phi_w: np.ndarray, phi_b: np.ndarray) -> np.ndarray:
    return z @ phi_w + phi_b


def normalize_scores(s: np.ndarray, norm: str) -> np.ndarray:
    """Attractor input: softmax of the scores or their L2-normalized value.
    Callers must treat the result as a constant (stop-gradient); a zero score
    row under l2_input maps to the zero vector."""
    if norm == "softmax_input":
        return softmax(s)
    if norm == "l2_input":
        norms = np.linalg.norm(s, axis=1, keepdims=True)
        return np.where(norms > 0.0, s / np.where(norms > 0.0, norms, 1.0), 0.0)
    raise ValueError(f"unknown attractor norm {norm!r}")


def attractor_forward(state: ModelState, u: np.ndarray):
    h = u @ state.omega_w1 + state.omega_b1
    a = np.maximum(h, 0.0)
    delta = a @ state.omega_w2 + state.omega_b2
    return delta, (h, a)


def attractor_backward(state: ModelState, u: np.ndarray, h: np.ndarray, d_delta: np.ndarray):
    """Gradient of a scalar (whose dL/ddelta is d_delta) w.r.t. the four
    attractor arrays; u is a stop-gradient constant."""
    a = np.maximum(h, 0.0)
    d_w2 = a.T @ d_delta
    d_b2 = d_delta.sum(axis=0)
    d_a = d_delta @ state.omega_w2.T
    d_h = d_a * (h > 0.0)
    d_w1 = u.T @ d_h
    d_b1 = d_h.sum(axis=0)
    return [d_w1, d_b1, d_w2, d_b2]


@dataclass
class TrainForwardCache:
    z: np.ndarray
    feat_cache: tuple
    s: np.ndarray
    u: np.ndarray
    h: np.ndarray
    a: np.ndarray
    delta: np.ndarray
    logits: np.ndarray


def forward_train(x: np.ndarray, state: ModelState, norm: str) -> tuple[np.ndarray, TrainForwardCache]:
    """Training-path logits: classifier scores plus the residual attractor
    correction computed from the stop-gradient normalized scores."""
    z, feat_cache = features_with_cache(x, state.theta)
    s = classifier_scores(z, state.phi_w, state.phi_b)
    u = normalize_scores(s, norm)
    delta, (h, a) = attractor_forward(state, u)
    logits = s + delta
    return logits, TrainForwardCache(z, feat_cache, s, u, h, a, delta, logits)


def forward_eval(x: np.ndarray, state: ModelState, use_ema: bool = False) -> np.ndarray:
    """Evaluation-path logits: extractor + linear classifier only; the
    attractor is never read."""
    if use_ema:
        z = forward_features(x, state.ema_theta)
        return classifier_scores(z, state.ema_phi_w, state.ema_phi_b)
    z = forward_features(x, state.theta)
    return classifier_scores(z, state.phi_w, state.phi_b)


def ema_update(state: ModelState, decay: float) -> ModelState:
    """shadow <- decay * shadow + (1 - decay) * param for theta and phi."""
    if not (0.0 <= decay <= 1.0):
        raise ValueError(f"decay {decay} outside [0, 1]")
    for (sw, sb), (w, b) in zip(state.ema_theta, state.theta):
        sw *= decay
        sw += (1.0 - decay) * w
        sb *= decay
        sb += (1.0 - decay) * b
    state.ema_phi_w *= decay
    state.ema_phi_w += (1.0 - decay) * state.phi_w
    state.ema_phi_b *= decay
    state.ema_phi_b += (1.0 - decay) * state.phi_b
    return state


def save_checkpoint(path, state: ModelState, norm: str) -> None:
    """Versioned npz checkpoint of every parameter array plus dims and the
    attractor norm mode; round-trips bit-exactly."""
    arrays = {}
    for i, (w, b) in enumerate(state.theta):
        arrays[f"theta_w{i}"] = w
        arrays[f"theta_b{i}"] = b
    for i, (w, b) in enumerate(state.ema_theta):
        arrays[f"ema_theta_w{i}"] = w
        arrays[f"ema_theta_b{i}"] = b
    arrays.update(
        phi_w=state.phi_w,
        phi_b=state.phi_b,
        ema_phi_w=state.ema_phi_w,
        ema_phi_b=state.ema_phi_b,
        omega_w1=state.omega_w1,
        omega_b1=state.omega_b1,
        omega_w2=state.omega_w2,
        omega_b2=state.omega_b2,
    )
    meta = {
        "version": CHECKPOINT_VERSION,
        "extractor_dims": state.extractor_dims(),
        "num_classes": state.num_classes,
        "attractor_hidden": state.attractor_hidden,
        "norm": norm,
        "step_count": state.step_count,
        "num_theta_layers": len(state.theta),
    }
    np.savez(Path(path), meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[ModelState, str]:
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        n_layers = meta["num_theta_layers"]
        theta = [(z[f"theta_w{i}"], z[f"theta_b{i}"]) for i in range(n_layers)]
        ema_theta = [(z[f"ema_theta_w{i}"], z[f"ema_theta_b{i}"]) for i in range(n_layers)]
        state = ModelState(
            theta,
            z["phi_w"],
            z["phi_b"],
            z["omega_w1"],
            z["omega_b1"],
            z["omega_w2"],
            z["omega_b2"],
            ema_theta,
            z["ema_phi_w"],
            z["ema_phi_b"],
            int(meta["step_count"]),
        )
    return state, meta["norm"]
