"""First-order update rules on ParamVectors."""

from dataclasses import dataclass, replace

import numpy as np

from .nn import ParamVector


@dataclass(frozen=True)
class OptState:
    kind: str = "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moment1: ParamVector = None
    moment2: ParamVector = None

    @classmethod
    def adam(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls("adam", lr, beta1, beta2, eps, 0, params.zeros_like(), params.zeros_like())


def sgd_step(params, grad, lr):
    if lr <= 0:
        raise ValueError("lr must be positive")
    return params.axpy(-lr, grad)


def adam_step(state, params, grad):
    """Bias-corrected Adam.  Returns ``(new_params, new_state)``."""
    if state.kind != "adam":
        raise ValueError(f"adam_step needs an adam state, got {state.kind!r}")
    params._check(grad)
    params._check(state.moment1)
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.moment1.values + (1.0 - b1) * grad.values
    v = b2 * state.moment2.values + (1.0 - b2) * grad.values * grad.values
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    layout = params.layout
    new_state = replace(
        state, step_count=t, moment1=ParamVector(m, layout), moment2=ParamVector(v, layout)
    )
    return ParamVector(new, layout), new_state


def outer_step(origin, endpoint, lr):
    """Move ``origin`` a fraction ``lr`` of the way toward ``endpoint``.

    ``lr == 1`` returns the endpoint exactly; ``lr == 0`` returns the origin.
    """
    if not 0.0 <= lr <= 1.0:
        raise ValueError(f"outer lr must be in [0, 1], got {lr}")
    origin._check(endpoint)
    if lr == 1.0:
        return endpoint.copy()
    return origin.axpy(lr, endpoint - origin)


class Stepper:
    """A first-order optimizer with its own (replaceable) state.

    Strategies call ``step`` repeatedly; the trainer that owns the stepper
    keeps its Adam moments across epochs.
    """

    def __init__(self, kind="sgd", lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.kind = kind
        self.lr = lr
        self._hyper = (beta1, beta2, eps)
        self.state = None

    def step(self, params, grad):
        if self.kind == "sgd":
            return sgd_step(params, grad, self.lr)
        if self.state is None:
            self.state = OptState.adam(params, self.lr, *self._hyper)
        params, self.state = adam_step(self.state, params, grad)
        return params

    def clone(self):
        other = Stepper(self.kind, self.lr, *self._hyper)
        other.state = self.state
        return other
