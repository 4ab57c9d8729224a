"""Shared test utilities: the finite-difference gradient oracle."""

import numpy as np

from rfsk.tensor import backward, zero_grads

FD_H = 1e-3
FD_TOL = 1e-4


def numeric_grads(build, params, h=FD_H):
    """Central finite differences of a scalar-valued graph builder.

    `build` must re-run the forward pass from `params` data (graphs capture
    values eagerly). Parameters are perturbed in place and restored.
    """
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(build().data)
            flat[i] = orig - h
            fm = float(build().data)
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(p.data.shape))
    return grads


def rel_error(a, b, eps=1e-12):
    na = float(np.linalg.norm(a.reshape(-1)))
    nb = float(np.linalg.norm(b.reshape(-1)))
    return float(np.linalg.norm((a - b).reshape(-1))) / max(na, nb, eps)


def check_gradients(build, params, h=FD_H, tol=FD_TOL):
    """Assert analytic gradients match central differences.

    Relative error is ||a - n|| / max(||a||, ||n||); graphs must be built in
    float64 for the tolerance to be meaningful.
    """
    for p in params:
        assert p.data.dtype == np.float64, "gradient checks run in float64"
    loss = build()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    zero_grads(params)
    numeric = numeric_grads(build, params, h=h)
    worst = 0.0
    for p, a, n in zip(params, analytic, numeric):
        err = rel_error(a, n)
        worst = max(worst, err)
        assert err < tol, (
            f"gradient mismatch on param {p.shape}: rel err {err:.3e} >= {tol}")
    return worst
