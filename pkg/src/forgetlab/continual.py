"""Forgetting countermeasures: importance maps, EWC penalties, attenuation.

Two families share one plumbing path (the optimizer hooks). Anchored
penalties pull parameters back toward a stored snapshot by injecting an
extra gradient before the optimizer. Velocity attenuation multiplies the
gradient or the emitted step by a per-parameter factor that shrinks as
importance grows, and stores no snapshots at all.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import TaskDataset
from .model import (
    Gradients,
    MlpParams,
    check_congruent,
    flatten,
    forward,
    global_norm,
    leaky_relu_grad,
    map_blocks,
    zeros_like_params,
)
from .numerics import NonFiniteError, matmul
from .optim import StepHook

# Importance maps are parameter-shaped containers of non-negative values.
ImportanceMap = MlpParams

ATTENUATION_KINDS = ("hyperbolic", "exponential")
TARGETS = ("gradient", "step")
ESTIMATORS = ("fisher", "total_abs_signal")
STRATEGY_KINDS = ("none", "ewc", "ewc_multi_anchor", "wva")


@dataclass(frozen=True)
class Anchor:
    """Parameter snapshot a quadratic penalty attracts toward."""

    values: MlpParams
    task_label: int


def check_importance(omega: ImportanceMap):
    for kind in ("weights", "biases"):
        for block in getattr(omega, kind):
            if not np.isfinite(block).all():
                raise NonFiniteError("importance map contains non-finite entries")
            if np.any(block < 0):
                raise ValueError("importance map contains negative entries")


def estimate_fisher(
    params: MlpParams, dataset: TaskDataset, chunk_size: int = 512
) -> ImportanceMap:
    """Diagonal empirical Fisher over the task's train split.

    F_i is the mean over samples of the squared per-sample gradient of
    log p(true label). Samples are processed in chunks but each sample's
    gradient is squared individually: for weight (i, j) the per-sample
    gradient factors as delta_i * a_j, so the squared sum is the matrix
    product of delta**2 and a**2.
    """
    x, y = dataset.train_images, dataset.train_labels
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot estimate importance from an empty dataset")
    sums = zeros_like_params(params)
    for start in range(0, n, chunk_size):
        xb = x[start : start + chunk_size]
        yb = y[start : start + chunk_size]
        trace = forward(params, xb)
        delta = trace.probabilities.copy()
        delta[np.arange(len(yb)), yb] -= 1.0
        for l in range(params.num_layers - 1, -1, -1):
            below = trace.inputs if l == 0 else trace.activations[l - 1]
            sums.weights[l] += matmul((delta**2).T, below**2)
            sums.biases[l] += (delta**2).sum(axis=0)
            if l > 0:
                delta = matmul(delta, params.weights[l]) * leaky_relu_grad(
                    trace.pre_activations[l - 1]
                )
    return map_blocks(lambda s: s / n, sums)


def estimate_total_abs_signal(
    params: MlpParams, dataset: TaskDataset, chunk_size: int = 512
) -> ImportanceMap:
    """Mean absolute signal through each weight, from forward passes only.

    For weight w_ij with input activation a_j the importance is the mean
    over samples of |a_j * w_ij|, which factors into |w_ij| times the mean
    of |a_j|. Biases contribute a constant signal, so their importance is
    |b_i|.
    """
    x = dataset.train_images
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot estimate importance from an empty dataset")
    abs_sums = [np.zeros(w.shape[1]) for w in params.weights]
    for start in range(0, n, chunk_size):
        trace = forward(params, x[start : start + chunk_size])
        for l in range(params.num_layers):
            below = trace.inputs if l == 0 else trace.activations[l - 1]
            abs_sums[l] += np.abs(below).sum(axis=0)
    return MlpParams(
        weights=[
            np.abs(w) * (s / n)[None, :] for w, s in zip(params.weights, abs_sums)
        ],
        biases=[np.abs(b) for b in params.biases],
    )


def accumulate(total: ImportanceMap, new: ImportanceMap, gamma: float) -> ImportanceMap:
    """Fold a new task's importances into the running map: gamma*total + new."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return map_blocks(lambda t, n: gamma * t + n, total, new)


def max_normalize(omega: ImportanceMap) -> ImportanceMap:
    """Scale the whole map so its largest entry becomes 1 (zero map unchanged)."""
    peak = float(flatten(omega).max(initial=0.0))
    if peak <= 0.0:
        return omega.copy()
    return map_blocks(lambda o: o / peak, omega)


def ewc_penalty(
    params: MlpParams, anchor: Anchor, omega: ImportanceMap, lam: float
) -> tuple[float, Gradients]:
    """Quadratic pull toward the anchor: value and gradient.

    value = (lam/2) * sum_i omega_i * (theta_i - anchor_i)**2
    gradient_i = lam * omega_i * (theta_i - anchor_i)
    """
    check_congruent(params, anchor.values, "params and anchor")
    check_congruent(params, omega, "params and importance map")
    diff = map_blocks(np.subtract, params, anchor.values)
    value = 0.0
    for kind in ("weights", "biases"):
        for o, d in zip(getattr(omega, kind), getattr(diff, kind)):
            value += float(np.sum(o * d * d))
    gradient = map_blocks(lambda o, d: lam * o * d, omega, diff)
    return 0.5 * lam * value, gradient


def ewc_penalty_multi_anchor(
    params: MlpParams,
    anchors: list[Anchor],
    omegas: list[ImportanceMap],
    lams: list[float],
) -> tuple[float, Gradients]:
    """Sum of independent per-task quadratic penalties.

    An empty anchor list is a valid state (nothing consolidated yet) and
    yields value 0 with a zero gradient.
    """
    if not len(anchors) == len(omegas) == len(lams):
        raise ValueError(
            f"got {len(anchors)} anchors, {len(omegas)} importance maps, "
            f"{len(lams)} lambdas"
        )
    value = 0.0
    gradient = zeros_like_params(params)
    for anchor, omega, lam in zip(anchors, omegas, lams):
        part_value, part_grad = ewc_penalty(params, anchor, omega, lam)
        value += part_value
        gradient = map_blocks(np.add, gradient, part_grad)
    return value, gradient


def safe_coefficient(omega, alpha: float, lam: float):
    """Saturating replacement for omega: omega / (alpha*lam*omega + 1).

    Bounded above by 1/(alpha*lam), which keeps a single penalty step
    from overshooting the anchor no matter how large omega grows. Accepts
    scalars or arrays.
    """
    if alpha < 0 or lam < 0:
        raise ValueError("alpha and lam must be >= 0")
    arr = np.asarray(omega, dtype=np.float64)
    out = arr / (alpha * lam * arr + 1.0)
    return float(out) if arr.ndim == 0 else out


def _clip_to_norm(grad: Gradients, threshold: float) -> Gradients:
    norm = global_norm(grad)
    if norm <= threshold:
        return grad
    return map_blocks(lambda g: g * (threshold / norm), grad)


def clip_separately(
    task_grad: Gradients, penalty_grad: Gradients, threshold: float
) -> Gradients:
    """Rescale each gradient to global L2 norm <= threshold, then sum them.

    Clipping the two parts independently keeps a huge penalty gradient
    from drowning out the task gradient (and vice versa).
    """
    if not threshold > 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    check_congruent(task_grad, penalty_grad, "task and penalty gradients")
    return map_blocks(
        np.add, _clip_to_norm(task_grad, threshold), _clip_to_norm(penalty_grad, threshold)
    )


def wva_factor(omega, lam: float, kind: str):
    """Attenuation factor in (0, 1]: hyperbolic 1/(lam*omega+1) or exp(-lam*omega)."""
    if kind not in ATTENUATION_KINDS:
        raise ValueError(f"kind must be one of {ATTENUATION_KINDS}, got {kind!r}")
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    arr = np.asarray(omega, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("omega must be >= 0")
    if kind == "hyperbolic":
        out = 1.0 / (lam * arr + 1.0)
    else:
        out = np.exp(-lam * arr)
    return float(out) if arr.ndim == 0 else out


def make_wva_hook(omega: ImportanceMap, lam: float, kind: str, target: str) -> StepHook:
    """Hook multiplying the gradient or the step by per-parameter factors.

    lam == 0 returns a bare hook with no transforms, so such runs take
    exactly the same code path as an unprotected run.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
    if kind not in ATTENUATION_KINDS:
        raise ValueError(f"kind must be one of {ATTENUATION_KINDS}, got {kind!r}")
    check_importance(omega)
    if lam == 0.0:
        return StepHook()
    factors = map_blocks(lambda o: wva_factor(o, lam, kind), omega)

    def scale(container: Gradients) -> Gradients:
        return map_blocks(np.multiply, container, factors)

    if target == "gradient":
        return StepHook(pre_optimizer=scale)
    return StepHook(post_optimizer=scale)


@dataclass(frozen=True)
class StrategyConfig:
    """Which countermeasure runs and how it is parameterized.

    ``target`` selects where attenuation applies and only matters for
    kind="wva"; the anchored penalties always inject their gradient before
    the optimizer. ``safe_coefficient`` and ``separate_clip_threshold``
    modify the penalty and are rejected for non-anchored kinds.
    """

    kind: str = "none"
    lam: float = 0.0
    online_decay: float = 1.0
    attenuation: str = "hyperbolic"
    target: str = "step"
    estimator: str = "total_abs_signal"
    safe_coefficient: bool = False
    separate_clip_threshold: Optional[float] = None
    normalize_importance: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"kind must be one of {STRATEGY_KINDS}, got {self.kind!r}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 0.0 <= self.online_decay <= 1.0:
            raise ValueError(f"online_decay must lie in [0, 1], got {self.online_decay}")
        if self.attenuation not in ATTENUATION_KINDS:
            raise ValueError(
                f"attenuation must be one of {ATTENUATION_KINDS}, got {self.attenuation!r}"
            )
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(
                f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}"
            )
        anchored = self.kind in ("ewc", "ewc_multi_anchor")
        if self.safe_coefficient and not anchored:
            raise ValueError("safe_coefficient modifies the anchored penalty; use kind=ewc")
        if self.separate_clip_threshold is not None:
            if not anchored:
                raise ValueError("separate_clip_threshold applies to anchored penalties only")
            if not self.separate_clip_threshold > 0:
                raise ValueError(
                    f"separate_clip_threshold must be > 0, got {self.separate_clip_threshold}"
                )
        if self.kind == "ewc_multi_anchor" and self.online_decay != 1.0:
            raise ValueError(
                "online_decay applies to the consolidated map; per-task anchors keep "
                "their own importances"
            )


def _estimate(config: StrategyConfig, params: MlpParams, task: TaskDataset) -> ImportanceMap:
    if config.estimator == "fisher":
        return estimate_fisher(params, task)
    return estimate_total_abs_signal(params, task)


class NoStrategy:
    """Unprotected sequential training."""

    def step_hook(self, params: MlpParams) -> Optional[StepHook]:
        return None

    def finish_task(self, params: MlpParams, task: TaskDataset):
        pass

    def importance(self) -> Optional[ImportanceMap]:
        return None


class WvaStrategy:
    """Attenuates updates by accumulated importance; stores no anchors."""

    def __init__(self, config: StrategyConfig):
        self.config = config
        self.omega_total: Optional[ImportanceMap] = None
        self._hook: Optional[StepHook] = None

    def step_hook(self, params: MlpParams) -> Optional[StepHook]:
        return self._hook

    def finish_task(self, params: MlpParams, task: TaskDataset):
        new = _estimate(self.config, params, task)
        if self.omega_total is None:
            self.omega_total = new
        else:
            self.omega_total = accumulate(self.omega_total, new, self.config.online_decay)
        if self.config.lam == 0.0:
            return
        used = self.omega_total
        if self.config.normalize_importance:
            used = max_normalize(used)
        self._hook = make_wva_hook(
            used, self.config.lam, self.config.attenuation, self.config.target
        )

    def importance(self) -> Optional[ImportanceMap]:
        return self.omega_total


class EwcStrategy:
    """Single consolidated anchor with a summed (optionally decayed) map."""

    def __init__(self, config: StrategyConfig, learning_rate: float):
        self.config = config
        self.learning_rate = learning_rate
        self.omega_total: Optional[ImportanceMap] = None
        self.anchor: Optional[Anchor] = None
        self._omega_eff: Optional[ImportanceMap] = None

    def _effective_omega(self) -> ImportanceMap:
        used = self.omega_total
        if self.config.normalize_importance:
            used = max_normalize(used)
        if self.config.safe_coefficient:
            alpha, lam = self.learning_rate, self.config.lam
            used = map_blocks(lambda o: safe_coefficient(o, alpha, lam), used)
        return used

    def step_hook(self, params: MlpParams) -> Optional[StepHook]:
        if self.anchor is None or self.config.lam == 0.0:
            return None
        anchor, omega, lam = self.anchor, self._omega_eff, self.config.lam
        threshold = self.config.separate_clip_threshold

        def pre(task_grad: Gradients) -> Gradients:
            _, penalty_grad = ewc_penalty(params, anchor, omega, lam)
            if threshold is not None:
                return clip_separately(task_grad, penalty_grad, threshold)
            return map_blocks(np.add, task_grad, penalty_grad)

        return StepHook(pre_optimizer=pre)

    def finish_task(self, params: MlpParams, task: TaskDataset):
        new = _estimate(self.config, params, task)
        if self.omega_total is None:
            self.omega_total = new
        else:
            self.omega_total = accumulate(self.omega_total, new, self.config.online_decay)
        self.anchor = Anchor(values=params.copy(), task_label=task.task_id)
        self._omega_eff = self._effective_omega()

    def importance(self) -> Optional[ImportanceMap]:
        return self.omega_total


class EwcMultiAnchorStrategy:
    """One quadratic penalty per finished task, each with its own anchor."""

    def __init__(self, config: StrategyConfig, learning_rate: float):
        self.config = config
        self.learning_rate = learning_rate
        self.anchors: list[Anchor] = []
        self.omegas: list[ImportanceMap] = []
        self._omegas_eff: list[ImportanceMap] = []

    def step_hook(self, params: MlpParams) -> Optional[StepHook]:
        if not self.anchors or self.config.lam == 0.0:
            return None
        anchors, omegas, lam = self.anchors, self._omegas_eff, self.config.lam
        threshold = self.config.separate_clip_threshold

        def pre(task_grad: Gradients) -> Gradients:
            _, penalty_grad = ewc_penalty_multi_anchor(
                params, anchors, omegas, [lam] * len(anchors)
            )
            if threshold is not None:
                return clip_separately(task_grad, penalty_grad, threshold)
            return map_blocks(np.add, task_grad, penalty_grad)

        return StepHook(pre_optimizer=pre)

    def finish_task(self, params: MlpParams, task: TaskDataset):
        new = _estimate(self.config, params, task)
        self.anchors.append(Anchor(values=params.copy(), task_label=task.task_id))
        self.omegas.append(new)
        used = new
        if self.config.normalize_importance:
            used = max_normalize(used)
        if self.config.safe_coefficient:
            alpha, lam = self.learning_rate, self.config.lam
            used = map_blocks(lambda o: safe_coefficient(o, alpha, lam), used)
        self._omegas_eff.append(used)

    def importance(self) -> Optional[ImportanceMap]:
        if not self.omegas:
            return None
        total = self.omegas[0].copy()
        for omega in self.omegas[1:]:
            total = accumulate(total, omega, 1.0)
        return total


Strategy = NoStrategy | WvaStrategy | EwcStrategy | EwcMultiAnchorStrategy


def build_strategy(config: StrategyConfig, learning_rate: float) -> Strategy:
    """Instantiate the configured strategy; ``learning_rate`` feeds the
    safe coefficient's alpha."""
    if config.kind == "none":
        return NoStrategy()
    if config.kind == "wva":
        return WvaStrategy(config)
    if config.kind == "ewc":
        return EwcStrategy(config, learning_rate)
    return EwcMultiAnchorStrategy(config, learning_rate)
