"""Finite-difference gradient oracle shared by the test modules."""

import numpy as np

from tinydistill.autodiff import Tensor, backward


def numeric_grad(f, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``tensor.data``."""
    flat = tensor.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(tensor.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def check_grads(loss_fn, tensors, tol=1e-4, h=1e-5):
    """Compare backward() against finite differences for every tensor; return max rel error."""
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numeric_grad(lambda: loss_fn().item(), t, h)
        err = rel_error(analytic, numeric)
        worst = max(worst, float(err.max()))
        assert err.max() < tol, f"max rel err {err.max():.3g} for tensor {t.shape}"
    return worst

