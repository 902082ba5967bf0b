from dataclasses import dataclass, field

import numpy as np

from cocktail.errors import ContractError


@dataclass
class OptimizerState:
    lr: float = 3e-4
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state):
    """One AdamW update (decoupled weight decay), in place on ``params``.

    ``params`` and ``grads`` are parallel lists of arrays; a ``None`` gradient
    is treated as zero.
    """
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float32) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float32) for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ContractError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if state.weight_decay:
            p *= np.float32(1.0 - state.lr * state.weight_decay)
        m *= np.float32(b1)
        m += np.float32(1.0 - b1) * g
        v *= np.float32(b2)
        v += np.float32(1.0 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


class AdamW:
    """Thin wrapper binding an ``OptimizerState`` to a list of parameter tensors."""

    def __init__(self, params, lr=3e-4, weight_decay=1e-2):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay)

    def step(self):
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
