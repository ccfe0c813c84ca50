"""Shared test oracles: finite-difference gradients and a scalar Adam."""

import numpy as np

from forgetlab.model import MlpParams, backward, cross_entropy, forward


def finite_difference_grads(params, batch, labels, h=1e-5):
    """Central-difference gradient of the mean cross-entropy, parameter by parameter."""

    def loss_at(p):
        return cross_entropy(forward(p, batch), labels)

    grads = MlpParams(
        weights=[np.zeros_like(w) for w in params.weights],
        biases=[np.zeros_like(b) for b in params.biases],
    )
    for kind in ("weights", "biases"):
        for block, out in zip(getattr(params, kind), getattr(grads, kind)):
            it = np.nditer(block, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                original = block[idx]
                block[idx] = original + h
                up = loss_at(params)
                block[idx] = original - h
                down = loss_at(params)
                block[idx] = original
                out[idx] = (up - down) / (2 * h)
    return grads


def max_relative_gradient_error(params, batch, labels, h=1e-5):
    """Worst-case relative disagreement between backprop and central differences.

    The denominator is floored at 1 so coordinates whose true gradient is
    near zero compare absolutely, where finite-difference round-off
    (about 1e-11 at h=1e-5) would otherwise dominate the ratio.
    """
    analytic = backward(params, forward(params, batch), labels)
    numeric = finite_difference_grads(params, batch, labels, h=h)
    worst = 0.0
    for kind in ("weights", "biases"):
        for a, n in zip(getattr(analytic, kind), getattr(numeric, kind)):
            scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
            worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst


class ScalarAdam:
    """Independent single-parameter Adam, written directly from the update rules."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = 0.0
        self.v = 0.0
        self.t = 0

    def step(self, g):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return -self.lr * m_hat / (v_hat**0.5 + self.epsilon)
