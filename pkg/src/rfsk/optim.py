"""First-order optimizers.

`Adam` implements the bias-corrected update; `rectified=True` switches to the
variance-rectified variant (warmup steps fall back to an unadapted momentum
update until the variance estimate has enough degrees of freedom), and
`lookahead_k` wraps either rule with slow weights that the fast weights are
pulled toward every k steps. Rectified + lookahead is the training default;
plain Adam stays available behind a flag.

Updates mutate parameter arrays in place; everything else in the engine
treats tensors as immutable.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 rectified=False, lookahead_k=None, lookahead_alpha=0.5):
        self.params = [p for p in params]
        for p in self.params:
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise ContractError("optimizer parameters must be trainable tensors")
        if lookahead_k is not None and lookahead_k < 1:
            raise ContractError(f"lookahead sync period must be >= 1, got {lookahead_k}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.rectified = bool(rectified)
        self.lookahead_k = lookahead_k
        self.lookahead_alpha = float(lookahead_alpha)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.slow = ([p.data.copy() for p in self.params]
                     if lookahead_k is not None else None)
        # rho_inf: asymptotic degrees of freedom of the variance estimate
        self._rho_inf = 2.0 / (1.0 - self.beta2) - 1.0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        if self.rectified:
            rho = self._rho_inf - 2.0 * t * (b2 ** t) / bc2
            if rho > 4.0:
                r_num = (rho - 4.0) * (rho - 2.0) * self._rho_inf
                r_den = (self._rho_inf - 4.0) * (self._rho_inf - 2.0) * rho
                rect = float(np.sqrt(r_num / r_den))
            else:
                rect = None  # unadapted update this step
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                raise ContractError(
                    f"optimizer step with missing gradient on parameter {i}")
            g = np.asarray(g, dtype=p.data.dtype)
            if g.shape != p.data.shape:
                raise ContractError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            if self.rectified and rect is None:
                upd = self.lr * m_hat
            else:
                v_hat = self.v[i] / bc2
                step_lr = self.lr * (rect if self.rectified else 1.0)
                upd = step_lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.data -= upd.astype(p.data.dtype, copy=False)
        if self.slow is not None and self.t % self.lookahead_k == 0:
            a = self.lookahead_alpha
            for i, p in enumerate(self.params):
                self.slow[i] += a * (p.data - self.slow[i])
                p.data[...] = self.slow[i]


def make_optimizer(kind: str, params, lr: float, beta1=0.9, beta2=0.999,
                   eps=1e-8, lookahead_k=5, lookahead_alpha=0.5) -> Adam:
    """kind: 'adam' (plain), 'radam' (rectified), 'ranger' (rectified + lookahead)."""
    if kind == "adam":
        return Adam(params, lr, beta1, beta2, eps)
    if kind == "radam":
        return Adam(params, lr, beta1, beta2, eps, rectified=True)
    if kind == "ranger":
        return Adam(params, lr, beta1, beta2, eps, rectified=True,
                    lookahead_k=lookahead_k, lookahead_alpha=lookahead_alpha)
    raise ContractError(f"unknown optimizer kind {kind!r}")
