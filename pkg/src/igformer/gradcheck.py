"""Central finite-difference gradient checking.

The numeric side only ever calls the forward pass, so it stays an
independent oracle for the backward closures in `tensor`.
"""

from __future__ import annotations

import numpy as np


def numeric_grad(f, x, h=1e-5):
    """d f / d x by central differences, elementwise on the array `x`.

    `f` takes no arguments and returns a python float; it must read `x`
    through a live reference so in-place perturbations are visible.
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-6):
    """Worst-case |a - n| / max(floor, |a|, |n|) over the array."""
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def check_gradients(build_loss, params, h=1e-5, tol=1e-4):
    """Compare backward gradients of `build_loss()` against finite differences.

    `build_loss` rebuilds the forward graph from scratch on every call and
    returns a scalar Tensor. Returns the worst relative error over all
    `params`; raises AssertionError when it exceeds `tol`.
    """
    for p in params:
        p.grad = None
    loss = build_loss()
    loss.backward()
    # snapshot now: build_loss may zero gradients on every later call
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    worst = 0.0
    worst_name = None
    for i, p in enumerate(params):
        numeric = numeric_grad(lambda: float(build_loss().data), p.data, h=h)
        err = max_rel_err(analytic[i], numeric)
        if err > worst:
            worst = err
            worst_name = i
    if worst > tol:
        raise AssertionError(
            f"gradient mismatch on parameter {worst_name}: rel err {worst:.3e} > {tol:.0e}")
    return worst
