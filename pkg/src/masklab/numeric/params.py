"""Named parameter collections and the Adam optimizer."""
from __future__ import annotations

import numpy as np

from ..errors import FrozenParameterError, UsageError
from .tensor import Tensor, no_grad


class ParamStore:
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, params=None, frozen=False):
        self._params = {}
        self.frozen = frozen
        for name, t in (params or {}).items():
            self.add(name, t)

    def add(self, name, tensor):
        if name in self._params:
            raise UsageError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = not self.frozen
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(k, self._params[k]) for k in self.names()]

    def values(self):
        return [self._params[k] for k in self.names()]

    def count(self):
        return sum(t.size for t in self._params.values())

    def freeze(self):
        self.frozen = True
        for t in self._params.values():
            t.requires_grad = False
            t.grad = None

    def thaw(self):
        self.frozen = False
        for t in self._params.values():
            t.requires_grad = True

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.items()}

    def load_state_dict(self, state):
        missing = set(self._params) - set(state)
        if missing:
            raise UsageError(f"missing parameters in state: {sorted(missing)}")
        for k, arr in state.items():
            if k not in self._params:
                raise UsageError(f"unexpected parameter {k!r}")
            t = self._params[k]
            if tuple(arr.shape) != t.shape:
                raise UsageError(f"shape mismatch for {k!r}: {arr.shape} vs {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.data.dtype).copy()

    def sum_of_squares(self):
        """Differentiable sum of squared entries over all parameters."""
        from .tensor import reduce_sum, square
        total = None
        for t in self.values():
            term = reduce_sum(square(t))
            total = term if total is None else total + term
        return total if total is not None else Tensor(0.0)


class Adam:
    """Adam with bias correction; moment buffers are kept per parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        if lr <= 0:
            raise UsageError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: ParamStore):
        if params.frozen:
            raise FrozenParameterError("cannot apply an optimizer step to frozen parameters")
        items = params.items()
        for name, p in items:
            if p.grad is None:
                raise UsageError(f"parameter {name!r} has no gradient; run backward first")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        with no_grad():
            for name, p in items:
                g = p.grad.astype(np.float64)
                if self.weight_decay:
                    g = g + self.weight_decay * p.data
                if name not in self.m:
                    self.m[name] = np.zeros(p.shape)
                    self.v[name] = np.zeros(p.shape)
                self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
                self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
                m_hat = self.m[name] / bc1
                v_hat = self.v[name] / bc2
                update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
                p.data = (p.data - update).astype(p.data.dtype)


def adam_step(params, optimizer=None, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One Adam update; returns the optimizer so its moment state persists."""
    opt = optimizer or Adam(lr, beta1, beta2, eps, weight_decay)
    opt.step(params)
    return opt
