"""Central-finite-difference gradient verification."""

import numpy as np


def finite_difference_grads(loss_fn, params, coords_per_param=None, h=1e-6, rng=None):
    """Numerically differentiate loss_fn() w.r.t. selected parameter coords.

    loss_fn must be a deterministic closure over `params` returning a float.
    Returns a list of (flat_indices, fd_values) per parameter. When
    coords_per_param is None every coordinate is probed.
    """
    out = []
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if coords_per_param is None or coords_per_param >= n:
            idx = np.arange(n)
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(n, size=coords_per_param, replace=False)
            idx.sort()
        vals = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            vals[j] = (up - down) / (2.0 * h)
        out.append((idx, vals))
    return out


def relative_grad_error(loss_fn, backward_fn, params, coords_per_param=64, h=1e-6, seed=0):
    """Compare analytic gradients against central differences.

    backward_fn must populate p.grad for every parameter (one full
    forward+backward). Returns the worst relative error
    ||g_fd - g_an|| / max(||g_fd||, ||g_an||, 1e-12) over parameters.
    """
    backward_fn()
    analytic = [p.grad.reshape(-1).copy() if p.grad is not None else np.zeros(p.data.size)
                for p in params]
    rng = np.random.default_rng(seed)
    fd = finite_difference_grads(loss_fn, params, coords_per_param, h, rng)
    worst = 0.0
    for an, (idx, vals) in zip(analytic, fd):
        a = an[idx]
        denom = max(np.linalg.norm(vals), np.linalg.norm(a), 1e-12)
        err = np.linalg.norm(vals - a) / denom
        worst = max(worst, err)
    return worst
