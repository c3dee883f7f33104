"""Central finite-difference check of analytic gradients."""

import numpy as np


def grad_check(f, params, step=1e-5, max_coords=200, seed=0):
    """Return the max relative error between backprop and central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from
    ``params``; it must be deterministic (infer-mode dropout). At most
    ``max_coords`` coordinates per tensor are probed, picked with ``seed``.
    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: f is not finite at the base point")
    loss.backward()

    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("grad_check: f is not finite near the base point")
            numeric = (fp - fm) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
