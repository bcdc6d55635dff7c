"""Shared test oracles: finite differences and relative error."""

import numpy as np

from feddiv.tensor import Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max() / denom)


def check_grads(build_loss, params: list[Tensor], tol: float = 1e-4, h: float = 1e-5):
    """Compare autodiff grads of build_loss() against central differences.

    ``build_loss`` must rebuild the graph from the current parameter data
    on every call; ``params`` are the leaves to check.
    """
    loss = build_loss()
    for p in params:
        p.zero_grad()
    loss.backward()
    for p in params:
        num = numeric_grad(lambda _x, p=p: float(build_loss().data), p.data, h=h)
        assert p.grad is not None, "parameter received no gradient"
        err = rel_err(p.grad, num)
        assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
