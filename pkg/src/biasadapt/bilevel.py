"""Bi-level training engine.

Each iteration runs four stages: (i) lower-level loss over the labeled batch
plus confidence-masked pseudo-labeled batch, through the residual-head
training path; (ii) gradient step on extractor and classifier, where the
classifier gradient's dependence on the head parameters is kept for the
unroll; (iii) balanced cross-entropy at the stepped parameters through the
plain classifier path; (iv) a backward-on-backward step on the head
parameters that differentiates only the classifier-gradient expression.

The head hypergradient has a closed form (per-sample inner products between
classifier-gradient Jacobian rows and the mean balanced gradient) that is
implemented separately in `omega_grad_closed_form` as an independent oracle;
`hypergrad_fd` checks both against central differences of the composite map.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .data import BalancedBatchSpec, Dataset, balanced_batch, one_hot
from .model import (
    ModelState,
    TrainForwardCache,
    attractor_backward,
    classifier_scores,
    copy_state,
    ema_update,
    features_backward,
    features_with_cache,
    forward_train,
    init_model,
)
from .numcore import child_seeds, log_softmax, make_rng
from .pseudo import PseudoBatch, assign_pseudo_labels, augment

MODES = ("l2ac", "baseline", "plain_attractor", "single_level")
SCHEDULES = ("constant", "theorem_f")
OPTIMIZERS = ("sgd", "adam")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    mode: str = "l2ac"
    alpha: float = 2e-3
    eta: float = 1e-4
    tau: float = 0.95
    lambda_u: float = 1.0
    batch_n: int = 64
    batch_m: int = 128
    balanced_n: int = 64
    iters: int = 4000
    ema_decay: float = 0.999
    schedule: str = "constant"
    c1: float = 1.0
    c2: float = 1.0
    lower_optimizer: str = "sgd"
    lambda_bal: float = 1.0
    pseudo_mode: str = "hard"
    pseudo_source: str = "plain"
    sharpen_temperature: float = 0.5
    sigma_weak: float = 0.05
    sigma_strong: float = 0.5
    extractor_hidden: tuple = (64,)
    feature_dim: int = 32
    attractor_hidden: int = 256
    attractor_norm: str = "softmax_input"
    log_timings: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.lower_optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.lower_optimizer!r}")
        if self.alpha <= 0 or self.eta <= 0:
            raise ValueError("alpha and eta must be > 0")
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError("tau must lie in [0, 1]")
        if self.lambda_u < 0 or self.lambda_bal < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_n < 1 or self.batch_m < 0 or self.iters < 0:
            raise ValueError("batch_n must be >= 1, batch_m and iters >= 0")
        if not (0.0 <= self.ema_decay <= 1.0):
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.pseudo_mode not in ("hard", "sharpen"):
            raise ValueError(f"unknown pseudo mode {self.pseudo_mode!r}")
        if self.pseudo_source not in ("plain", "biased"):
            raise ValueError(f"unknown pseudo source {self.pseudo_source!r}")
        if not (0.0 <= self.sigma_weak < self.sigma_strong):
            raise ValueError("need 0 <= sigma_weak < sigma_strong")


@dataclass
class StepTrace:
    iteration: int
    lower_loss: float
    upper_loss: float
    grad_norm_theta: float
    grad_norm_phi: float
    grad_norm_omega: float
    second_order_seconds: float
    backward_seconds: float


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, traces: list[StepTrace]):
        super().__init__(message)
        self.traces = traces


def schedule_rates(config: TrainConfig, t: int) -> tuple[float, float]:
    """(alpha_t, eta_t) for iteration t >= 1: the configured constants, or
    the decaying pair (c1/t, c2/sqrt(t))."""
    if t < 1:
        raise ValueError(f"iteration must be >= 1, got {t}")
    if config.schedule == "constant":
        return config.alpha, config.eta
    return config.c1 / t, config.c2 / math.sqrt(t)


# ---------------------------------------------------------------------------
# lower-level loss and parameter step


@dataclass
class UnrollInputs:
    """Per-sample quantities from the lower forward pass that the head
    hypergradient needs: features, probabilities, targets, per-row loss
    coefficients, and the attractor's (stop-gradient) input and preactivation."""

    z: np.ndarray
    p: np.ndarray
    targets: np.ndarray
    coeff: np.ndarray
    u: np.ndarray
    h: np.ndarray


@dataclass
class LowerLossResult:
    loss: float
    grads_theta: list
    grad_phi_w: np.ndarray
    grad_phi_b: np.ndarray
    grads_omega: list
    unroll: UnrollInputs | None


@dataclass
class _LowerInternals:
    cache: TrainForwardCache
    d_logits: np.ndarray
    coeff: np.ndarray
    targets: np.ndarray
    p: np.ndarray


def _stack_lower_batch(x_l, y_l, pseudo: PseudoBatch | None):
    """Stack labeled rows (weight 1/n each) with pseudo-labeled strong views
    (weight lam_i/m each); returns (X, targets, per-row coefficients)."""
    n = x_l.shape[0]
    if n == 0:
        raise ValueError("labeled batch must be non-empty")
    if pseudo is None or len(pseudo) == 0:
        coeff = np.full(n, 1.0 / n)
        return x_l, y_l, coeff
    m = len(pseudo)
    x = np.vstack([x_l, pseudo.x_strong])
    targets = np.vstack([y_l, pseudo.y_hat])
    coeff = np.concatenate([np.full(n, 1.0 / n), pseudo.lam / m])
    return x, targets, coeff


def _weighted_ce(logits, targets, coeff):
    """loss = sum_i coeff[i] * H(logits[i], targets[i]); also returns
    probabilities and the exact logit gradient coeff[i] * (p[i]-targets[i])."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    loss = float((coeff * -(targets * logp).sum(axis=1)).sum())
    d_logits = coeff[:, None] * (p - targets)
    return loss, p, d_logits


def _lower_forward(x_l, y_l, pseudo, state: ModelState, norm: str):
    x, targets, coeff = _stack_lower_batch(x_l, y_l, pseudo)
    logits, cache = forward_train(x, state, norm)
    loss, p, d_logits = _weighted_ce(logits, targets, coeff)
    return loss, _LowerInternals(cache, d_logits, coeff, targets, p)


def _lower_backward(state: ModelState, internals: _LowerInternals):
    """Gradients of the stacked lower loss w.r.t. extractor, classifier and
    attractor. The logit gradient feeds both the classifier scores (direct
    shortcut) and the attractor output; the attractor input is stop-gradient
    so no second path reaches the classifier."""
    cache = internals.cache
    d_logits = internals.d_logits
    grads_omega = attractor_backward(state, cache.u, cache.h, d_logits)
    grad_phi_w = cache.z.T @ d_logits
    grad_phi_b = d_logits.sum(axis=0)
    d_z = d_logits @ state.phi_w.T
    grads_theta, _ = features_backward(cache.feat_cache, state.theta, d_z)
    return grads_theta, grad_phi_w, grad_phi_b, grads_omega


def lower_loss(x_l, y_l, pseudo: PseudoBatch | None, state: ModelState, norm: str) -> LowerLossResult:
    """Lower-level loss and its analytic gradients w.r.t. every parameter
    block, through the residual-head training path."""
    loss, internals = _lower_forward(x_l, y_l, pseudo, state, norm)
    grads_theta, gw, gb, grads_omega = _lower_backward(state, internals)
    unroll = UnrollInputs(
        z=internals.cache.z,
        p=internals.p,
        targets=internals.targets,
        coeff=internals.coeff,
        u=internals.cache.u,
        h=internals.cache.h,
    )
    return LowerLossResult(loss, grads_theta, gw, gb, grads_omega, unroll)


def _theta_phi_arrays(state: ModelState) -> list[np.ndarray]:
    arrays = []
    for w, b in state.theta:
        arrays.extend([w, b])
    arrays.extend([state.phi_w, state.phi_b])
    return arrays


def _theta_phi_grads(res: LowerLossResult) -> list[np.ndarray]:
    grads = []
    for gw, gb in res.grads_theta:
        grads.extend([gw, gb])
    grads.extend([res.grad_phi_w, res.grad_phi_b])
    return grads


class LowerOptimizer:
    """Plain SGD, or Adam (beta1 0.9, beta2 0.999, eps 1e-8) with moment
    slots for a fixed list of parameter arrays."""

    def __init__(self, kind: str, templates: list[np.ndarray]):
        if kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        if kind == "adam":
            self.m = [np.zeros_like(a) for a in templates]
            self.v = [np.zeros_like(a) for a in templates]
            self.t = 0

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray], alpha: float) -> None:
        if self.kind == "sgd":
            for p, g in zip(arrays, grads):
                p -= alpha * g
            return
        self.t += 1
        c1 = 1.0 - ADAM_BETA1**self.t
        c2 = 1.0 - ADAM_BETA2**self.t
        for p, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * np.square(g)
            p -= alpha * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


@dataclass
class UnrollCache:
    step_count: int
    alpha: float
    inputs: UnrollInputs


def lower_step(
    state: ModelState,
    res: LowerLossResult,
    alpha: float,
    optimizer: LowerOptimizer,
) -> UnrollCache:
    """Update extractor and classifier in place (head untouched) and package
    the unroll cache: the classifier gradient's dependence on the head is
    retained via the cached forward quantities; the extractor's dependence is
    dropped by construction."""
    optimizer.step(_theta_phi_arrays(state), _theta_phi_grads(res), alpha)
    state.step_count += 1
    return UnrollCache(state.step_count, alpha, res.unroll)


# ---------------------------------------------------------------------------
# upper-level loss and the head hypergradient


def upper_loss(x, y, state: ModelState, need_theta: bool = False):
    """Mean cross-entropy of the plain (no attractor) path at the state's
    current parameters, with the gradient w.r.t. the classifier; extractor
    gradients only on request (joint single-level mode)."""
    z, feat_cache = features_with_cache(x, state.theta)
    s = classifier_scores(z, state.phi_w, state.phi_b)
    coeff = np.full(x.shape[0], 1.0 / x.shape[0])
    loss, _, d_logits = _weighted_ce(s, y, coeff)
    v_w = z.T @ d_logits
    v_b = d_logits.sum(axis=0)
    grads_theta = None
    if need_theta:
        d_z = d_logits @ state.phi_w.T
        grads_theta, _ = features_backward(feat_cache, state.theta, d_z)
    return loss, (v_w, v_b), grads_theta


def _hypergrad_unrolled(state: ModelState, cache: UnrollCache, upper_grad) -> list[np.ndarray]:
    """Backward-on-backward through the classifier-gradient expression only.

    With v the balanced gradient at the stepped classifier, the scalar
    s(omega) = <g_phi(omega), v> is differentiated at the cached point: the
    per-sample contraction r_i = V_w^T z_i + v_b flows back through the
    softmax Jacobian into the attractor output, then through the attractor
    arrays (its input is a stop-gradient constant). The hypergradient is
    -alpha times that, matching a gradient-descent lower step.
    """
    v_w, v_b = upper_grad
    ui = cache.inputs
    r = ui.z @ v_w + v_b
    d_xi = ui.coeff[:, None] * r
    tmp = ui.p * d_xi
    d_delta = tmp - ui.p * tmp.sum(axis=1, keepdims=True)
    s_grads = attractor_backward(state, ui.u, ui.h, d_delta)
    return [-cache.alpha * g for g in s_grads]


def omega_step(state: ModelState, cache: UnrollCache, upper_grad, eta: float) -> list[np.ndarray]:
    """Descend the head parameters along the unrolled hypergradient; returns
    the hypergradient arrays. Never touches the extractor or classifier."""
    if cache.step_count != state.step_count:
        raise ValueError(
            f"stale unroll cache: iteration {cache.step_count} vs state {state.step_count}"
        )
    hyper = _hypergrad_unrolled(state, cache, upper_grad)
    for arr, g in zip(state.omega_arrays(), hyper):
        arr -= eta * g
    return hyper


def apply_sgd_theta_phi(state: ModelState, res: LowerLossResult, alpha: float) -> None:
    for p, g in zip(_theta_phi_arrays(state), _theta_phi_grads(res)):
        p -= alpha * g


def omega_grad_closed_form(
    x_l,
    y_l,
    pseudo: PseudoBatch | None,
    bal_x,
    bal_y,
    state: ModelState,
    norm: str,
    alpha: float,
) -> list[np.ndarray]:
    """Independent oracle for the head hypergradient (SGD lower step only).

    Recomputes the whole chain from raw batches: lower gradients at the given
    state, the SGD step, the balanced gradient at the stepped parameters, and
    then assembles per sample i the vector G_i = J_i (V_w^T z_i + v_b) (J_i
    the softmax Jacobian at the pre-step logits) and the explicit K x P
    Jacobian of the head output w.r.t. its parameters, accumulating
    -alpha * sum_i coeff_i * M_i^T G_i.
    """
    work = copy_state(state)
    res = lower_loss(x_l, y_l, pseudo, work, norm)
    apply_sgd_theta_phi(work, res, alpha)
    _, (v_w, v_b), _ = upper_loss(bal_x, bal_y, work)

    ui = res.unroll
    k = state.num_classes
    hidden = state.attractor_hidden
    sizes = [a.size for a in state.omega_arrays()]
    total = sum(sizes)
    accum = np.zeros(total)
    w2 = state.omega_w2
    for i in range(ui.z.shape[0]):
        if ui.coeff[i] == 0.0:
            continue
        p_i = ui.p[i]
        jac_softmax = np.diag(p_i) - np.outer(p_i, p_i)
        g_i = jac_softmax @ (v_w.T @ ui.z[i] + v_b)
        gate = (ui.h[i] > 0.0).astype(np.float64)
        m_rows = np.empty((k, total))
        for c in range(k):
            d_w1 = np.outer(ui.u[i], gate * w2[:, c])
            d_b1 = gate * w2[:, c]
            d_w2 = np.zeros((hidden, k))
            d_w2[:, c] = gate * ui.h[i]
            d_b2 = np.zeros(k)
            d_b2[c] = 1.0
            m_rows[c] = np.concatenate([d_w1.ravel(), d_b1, d_w2.ravel(), d_b2])
        accum += ui.coeff[i] * (m_rows.T @ g_i)
    flat = -alpha * accum
    out = []
    start = 0
    for a in state.omega_arrays():
        out.append(flat[start : start + a.size].reshape(a.shape))
        start += a.size
    return out


def hypergrad_fd(
    x_l,
    y_l,
    pseudo: PseudoBatch | None,
    bal_x,
    bal_y,
    state: ModelState,
    norm: str,
    alpha: float,
    eps: float = 1e-6,
) -> list[np.ndarray]:
    """Central-difference hypergradient of the composite map
    omega -> balanced loss at (theta' fixed, phi' (omega)), where theta' is
    the SGD-stepped extractor at the unperturbed head (its dependence on the
    head is dropped by construction) and phi'(omega) re-runs the lower
    gradient at the perturbed head."""
    base = copy_state(state)
    res0 = lower_loss(x_l, y_l, pseudo, base, norm)
    theta_prime = [
        (w - alpha * gw, b - alpha * gb)
        for (w, b), (gw, gb) in zip(state.theta, res0.grads_theta)
    ]

    def bal_at(omega_flat: np.ndarray) -> float:
        work = copy_state(state)
        start = 0
        for arr in work.omega_arrays():
            arr[...] = omega_flat[start : start + arr.size].reshape(arr.shape)
            start += arr.size
        res = lower_loss(x_l, y_l, pseudo, work, norm)
        work.theta = [(w.copy(), b.copy()) for w, b in theta_prime]
        work.phi_w = state.phi_w - alpha * res.grad_phi_w
        work.phi_b = state.phi_b - alpha * res.grad_phi_b
        loss, _, _ = upper_loss(bal_x, bal_y, work)
        return loss

    omega0 = np.concatenate([a.ravel() for a in state.omega_arrays()])
    grad = np.empty_like(omega0)
    for i in range(omega0.size):
        delta = np.zeros_like(omega0)
        delta[i] = eps
        grad[i] = (bal_at(omega0 + delta) - bal_at(omega0 - delta)) / (2.0 * eps)
    out = []
    start = 0
    for a in state.omega_arrays():
        out.append(grad[start : start + a.size].reshape(a.shape))
        start += a.size
    return out


# ---------------------------------------------------------------------------
# plain (no attractor anywhere) loss path for the baseline mode


def _plain_lower_loss(x_l, y_l, pseudo: PseudoBatch | None, state: ModelState):
    x, targets, coeff = _stack_lower_batch(x_l, y_l, pseudo)
    z, feat_cache = features_with_cache(x, state.theta)
    s = classifier_scores(z, state.phi_w, state.phi_b)
    loss, _, d_logits = _weighted_ce(s, targets, coeff)
    grad_phi_w = z.T @ d_logits
    grad_phi_b = d_logits.sum(axis=0)
    d_z = d_logits @ state.phi_w.T
    grads_theta, _ = features_backward(feat_cache, state.theta, d_z)
    zero_omega = [np.zeros_like(a) for a in state.omega_arrays()]
    return LowerLossResult(loss, grads_theta, grad_phi_w, grad_phi_b, zero_omega, None)


# ---------------------------------------------------------------------------
# training loop


def _block_norms(res: LowerLossResult, omega_grads) -> tuple[float, float, float]:
    sq_theta = sum(float(np.sum(np.square(g))) for pair in res.grads_theta for g in pair)
    sq_phi = float(np.sum(np.square(res.grad_phi_w))) + float(np.sum(np.square(res.grad_phi_b)))
    sq_omega = sum(float(np.sum(np.square(g))) for g in omega_grads)
    return math.sqrt(sq_theta), math.sqrt(sq_phi), math.sqrt(sq_omega)


def _sample_rows(rng: np.random.Generator, n_rows: int, size: int) -> np.ndarray:
    if size <= n_rows:
        return rng.choice(n_rows, size=size, replace=False)
    return rng.integers(0, n_rows, size=size)


def train(
    config: TrainConfig,
    d_l: Dataset,
    d_u: Dataset | None,
    eval_hook=None,
    eval_interval: int = 0,
) -> tuple[ModelState, list[StepTrace]]:
    """Run the configured number of iterations and return the final state
    plus one trace row per iteration. Deterministic given config.seed: the
    seed fans out into separate init / batch-sampling / augmentation streams.
    The unlabeled dataset's hidden true labels are never read here.
    """
    config.validate()
    k = d_l.num_classes
    seeds = child_seeds(config.seed, 3)
    init_rng = make_rng(seeds[0])
    batch_rng = make_rng(seeds[1])
    aug_rng = make_rng(seeds[2])

    dims = [d_l.dim, *config.extractor_hidden, config.feature_dim]
    state = init_model(dims, k, config.attractor_hidden, init_rng)

    needs_balanced = config.mode in ("l2ac", "single_level")
    if needs_balanced:
        if config.balanced_n % k != 0:
            raise ValueError(f"balanced_n {config.balanced_n} not divisible by {k} classes")
        bal_spec = BalancedBatchSpec(config.balanced_n, k)

    optimizer = LowerOptimizer(config.lower_optimizer, _theta_phi_arrays(state))
    omega_opt = None
    if config.mode in ("plain_attractor", "single_level"):
        omega_opt = LowerOptimizer(config.lower_optimizer, state.omega_arrays())

    x_all_l = d_l.features
    y_all_l = one_hot(d_l.labels, k)
    labels_l = d_l.labels
    have_unlabeled = d_u is not None and len(d_u) > 0 and config.batch_m > 0
    biased_labels = config.mode != "baseline" and config.pseudo_source == "biased"

    traces: list[StepTrace] = []
    for t in range(1, config.iters + 1):
        alpha_t, eta_t = schedule_rates(config, t)

        l_idx = _sample_rows(batch_rng, len(d_l), config.batch_n)
        x_l = x_all_l[l_idx]
        y_l = y_all_l[l_idx]

        upper_val = math.nan
        sec_seconds = 0.0
        omega_norm_grads: list = []

        try:
            pseudo = None
            if have_unlabeled:
                u_idx = _sample_rows(batch_rng, len(d_u), config.batch_m)
                x_u = d_u.features[u_idx]
                x_weak, x_strong = augment(x_u, config.sigma_weak, config.sigma_strong, aug_rng)
                if biased_labels:
                    logits_weak, _ = forward_train(x_weak, state, config.attractor_norm)
                else:
                    z_w = features_with_cache(x_weak, state.theta)[0]
                    logits_weak = classifier_scores(z_w, state.phi_w, state.phi_b)
                y_hat, lam = assign_pseudo_labels(
                    logits_weak, config.tau, config.lambda_u, config.pseudo_mode,
                    config.sharpen_temperature,
                )
                pseudo = PseudoBatch(x_weak, x_strong, y_hat, lam)

            if needs_balanced:
                bal_idx = balanced_batch(d_l, bal_spec, batch_rng)
                bal_x = x_all_l[bal_idx]
                bal_y = one_hot(labels_l[bal_idx], k)

            if config.mode == "baseline":
                t0 = time.perf_counter()
                res = _plain_lower_loss(x_l, y_l, pseudo, state)
                back_seconds = time.perf_counter() - t0
                optimizer.step(_theta_phi_arrays(state), _theta_phi_grads(res), alpha_t)
                state.step_count += 1
            elif config.mode == "plain_attractor":
                loss_val, internals = _lower_forward(x_l, y_l, pseudo, state, config.attractor_norm)
                t0 = time.perf_counter()
                gt, gw, gb, gomega = _lower_backward(state, internals)
                back_seconds = time.perf_counter() - t0
                res = LowerLossResult(loss_val, gt, gw, gb, gomega, None)
                optimizer.step(_theta_phi_arrays(state), _theta_phi_grads(res), alpha_t)
                omega_opt.step(state.omega_arrays(), gomega, alpha_t)
                omega_norm_grads = gomega
                state.step_count += 1
            elif config.mode == "single_level":
                res = lower_loss(x_l, y_l, pseudo, state, config.attractor_norm)
                t0 = time.perf_counter()
                upper_val, (v_w, v_b), bal_theta = upper_loss(bal_x, bal_y, state, need_theta=True)
                back_seconds = time.perf_counter() - t0
                lam_b = config.lambda_bal
                combined = LowerLossResult(
                    res.loss,
                    [
                        (gw + lam_b * bw, gb + lam_b * bb)
                        for (gw, gb), (bw, bb) in zip(res.grads_theta, bal_theta)
                    ],
                    res.grad_phi_w + lam_b * v_w,
                    res.grad_phi_b + lam_b * v_b,
                    res.grads_omega,
                    None,
                )
                optimizer.step(_theta_phi_arrays(state), _theta_phi_grads(combined), alpha_t)
                omega_opt.step(state.omega_arrays(), res.grads_omega, alpha_t)
                omega_norm_grads = res.grads_omega
                res = combined
                state.step_count += 1
            else:  # l2ac
                loss_val, internals = _lower_forward(x_l, y_l, pseudo, state, config.attractor_norm)
                t0 = time.perf_counter()
                gt, gw, gb, gomega = _lower_backward(state, internals)
                back_seconds = time.perf_counter() - t0
                unroll = UnrollInputs(
                    internals.cache.z, internals.p, internals.targets,
                    internals.coeff, internals.cache.u, internals.cache.h,
                )
                res = LowerLossResult(loss_val, gt, gw, gb, gomega, unroll)
                cache = lower_step(state, res, alpha_t, optimizer)
                upper_val, upper_grad, _ = upper_loss(bal_x, bal_y, state)
                t0 = time.perf_counter()
                omega_norm_grads = omega_step(state, cache, upper_grad, eta_t)
                sec_seconds = time.perf_counter() - t0
        except ValueError as exc:
            # overflow inside a forward pass surfaces as a finiteness error
            if "non-finite" in str(exc):
                raise TrainingDiverged(f"iteration {t}: {exc}", traces) from exc
            raise

        if not math.isfinite(res.loss) or (
            config.mode in ("l2ac", "single_level") and not math.isfinite(upper_val)
        ):
            raise TrainingDiverged(
                f"non-finite loss at iteration {t}: lower={res.loss} upper={upper_val}",
                traces,
            )

        ema_update(state, config.ema_decay)

        nt, nphi, nomega = _block_norms(res, omega_norm_grads)
        traces.append(
            StepTrace(t, res.loss, upper_val, nt, nphi, nomega, sec_seconds, back_seconds)
        )
        if eval_hook is not None and eval_interval > 0 and t % eval_interval == 0:
            eval_hook(t, state)

    return state, traces


def write_trace_csv(traces: list[StepTrace], path, include_timings: bool = False) -> None:
    """One row per iteration. Timing columns are opt-in: they vary run to
    run, and the default trace must be byte-identical for equal seeds."""
    cols = ["iter", "lower_loss", "upper_loss", "grad_norm_theta", "grad_norm_phi", "grad_norm_omega"]
    if include_timings:
        cols += ["second_order_seconds", "backward_seconds"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for tr in traces:
            row = [
                str(tr.iteration),
                repr(tr.lower_loss),
                repr(tr.upper_loss),
                repr(tr.grad_norm_theta),
                repr(tr.grad_norm_phi),
                repr(tr.grad_norm_omega),
            ]
            if include_timings:
                row += [repr(tr.second_order_seconds), repr(tr.backward_seconds)]
            fh.write(",".join(row) + "\n")
