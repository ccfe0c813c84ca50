"""SGD and Adam emitting explicit steps, with hooks around the optimizer.

A strategy can transform the gradient before the optimizer sees it
(``pre_optimizer``) or transform the step the optimizer emits
(``post_optimizer``). Internally each optimizer reports its step as a
``(direction, scale)`` pair whose product is the step: SGD's direction is
the negated gradient and its scale is the learning rate, applied after
the post hook runs. Multiplying by an attenuation factor on either side
of the optimizer then rounds identically, so for SGD the two hook sides
produce bit-equal trajectories rather than merely close ones. Adam's
scale is 1.0, which leaves its update semantics untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import Gradients, MlpParams, check_congruent, map_blocks, zeros_like_params
from .numerics import ShapeError


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.2

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class AdamState:
    """Adam hyperparameters plus its moment accumulators and step counter."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    first_moment: Optional[MlpParams] = None
    second_moment: Optional[MlpParams] = None
    t: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.t < 0:
            raise ValueError(f"step counter must be >= 0, got {self.t}")


Optimizer = SgdConfig | AdamState


@dataclass(frozen=True)
class StepHook:
    """Optional gradient and step transforms, both shape-preserving."""

    pre_optimizer: Optional[Callable[[Gradients], Gradients]] = None
    post_optimizer: Optional[Callable[[Gradients], Gradients]] = None


IDENTITY_HOOK = StepHook()


def sgd_step(config: SgdConfig, grads: Gradients) -> Gradients:
    """Plain gradient descent step, -lr * g elementwise."""
    lr = config.learning_rate
    return map_blocks(lambda g: (-g) * lr, grads)


def _adam_direction(state: AdamState, grads: Gradients) -> Gradients:
    if state.first_moment is None:
        state.first_moment = zeros_like_params(grads)
        state.second_moment = zeros_like_params(grads)
    check_congruent(state.first_moment, grads, "Adam state and grads")
    b1, b2 = state.beta1, state.beta2
    state.t += 1
    state.first_moment = map_blocks(
        lambda m, g: b1 * m + (1 - b1) * g, state.first_moment, grads
    )
    state.second_moment = map_blocks(
        lambda v, g: b2 * v + (1 - b2) * g * g, state.second_moment, grads
    )
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    lr, eps = state.learning_rate, state.epsilon
    return map_blocks(
        lambda m, v: (-lr * (m / c1)) / (np.sqrt(v / c2) + eps),
        state.first_moment,
        state.second_moment,
    )


def adam_step(state: AdamState, grads: Gradients) -> Gradients:
    """Bias-corrected Adam step; advances the moments and counter in place.

    Epsilon sits outside the square root: -lr * m_hat / (sqrt(v_hat) + eps).
    """
    return _adam_direction(state, grads)


def step_parts(optimizer: Optimizer, grads: Gradients) -> tuple[Gradients, float]:
    """The optimizer's step as (direction, deferred scalar)."""
    if isinstance(optimizer, SgdConfig):
        return map_blocks(np.negative, grads), optimizer.learning_rate
    if isinstance(optimizer, AdamState):
        return _adam_direction(optimizer, grads), 1.0
    raise TypeError(f"unknown optimizer {type(optimizer).__name__}")


def reset_state(optimizer: Optimizer):
    """Drop accumulated optimizer state; a no-op for SGD."""
    if isinstance(optimizer, AdamState):
        optimizer.first_moment = None
        optimizer.second_moment = None
        optimizer.t = 0


def _checked_hook_output(result, template: Gradients, label: str) -> Gradients:
    if not isinstance(result, MlpParams):
        raise ShapeError(f"{label} hook returned {type(result).__name__}, not parameters")
    check_congruent(result, template, f"{label} hook output and gradients")
    return result


def apply(
    params: MlpParams,
    grads: Gradients,
    optimizer: Optimizer,
    hook: Optional[StepHook] = None,
) -> MlpParams:
    """One update: pre-hook the gradient, step, post-hook the step, add.

    Returns new parameters; the inputs are not mutated (optimizer state
    is).
    """
    check_congruent(params, grads, "params and grads")
    g = grads
    if hook is not None and hook.pre_optimizer is not None:
        g = _checked_hook_output(hook.pre_optimizer(g), grads, "pre_optimizer")
    direction, scale = step_parts(optimizer, g)
    if hook is not None and hook.post_optimizer is not None:
        direction = _checked_hook_output(hook.post_optimizer(direction), grads, "post_optimizer")
    step = direction if scale == 1.0 else map_blocks(lambda d: d * scale, direction)
    return map_blocks(np.add, params, step)
