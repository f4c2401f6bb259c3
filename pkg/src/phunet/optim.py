"""AdamW with decoupled weight decay and bias-corrected moments."""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, DimensionError


@dataclass
class AdamWConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ContractError("eps must be positive and weight_decay non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamWState:
    step: int
    m: list
    v: list

    @classmethod
    def zeros_like(cls, params):
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params, grads, state, config):
    """One AdamW update. Returns new parameter arrays and a new state.

    Inputs are not modified. A ``None`` gradient is treated as zero, so such
    parameters still receive weight decay.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("params, grads and optimizer state differ in length")
    t = state.step + 1
    b1, b2, lr = config.beta1, config.beta2, config.learning_rate
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        if g is None:
            g = np.zeros_like(p)
        if not (p.shape == g.shape == m.shape == v.shape):
            raise DimensionError(
                f"parameter {i}: shapes {p.shape}, grad {g.shape}, state {m.shape}/{v.shape} disagree"
            )
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        p = p * (1.0 - lr * config.weight_decay) - lr * update
        new_p.append(p.astype(params[i].dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamWState(t, new_m, new_v)


class AdamW:
    """Stateful wrapper updating a list of :class:`~phunet.autodiff.Tensor` in place."""

    def __init__(self, params, config=None):
        self.params = list(params)
        self.config = config or AdamWConfig()
        self.state = AdamWState.zeros_like([p.data for p in self.params])

    def step(self):
        arrays = [p.data for p in self.params]
        grads = [p.grad for p in self.params]
        new, self.state = adamw_step(arrays, grads, self.state, self.config)
        for p, a in zip(self.params, new):
            p.data = a

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        """(step, first moments, second moments) in parameter order."""
        return self.state.step, list(self.state.m), list(self.state.v)

    def load_state(self, step, m, v):
        shapes = [p.shape for p in self.params]
        if [a.shape for a in m] != shapes or [a.shape for a in v] != shapes:
            raise DimensionError("optimizer state does not match parameter shapes")
        self.state = AdamWState(int(step), [np.array(a) for a in m], [np.array(a) for a in v])
