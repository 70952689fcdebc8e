"""
Finite-difference gradient checking
中心差分校验解析梯度，供梯度测试使用
"""
from typing import Callable, List, Sequence

import numpy as np

from eaformer.utils.tensor import Tape, Tensor


def analytic_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor]) -> List[np.ndarray]:
    """Run ``fn`` on a fresh tape and return d fn / d leaf for every leaf."""
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy() for leaf in leaves]


def numerical_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5) -> List[np.ndarray]:
    """
    Central differences of a scalar ``fn`` w.r.t. every entry of every leaf.

    Leaf data is perturbed in place and always restored.
    """
    grads = []
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        g = np.zeros_like(flat)
        for k in range(flat.size):
            orig = flat[k]
            try:
                flat[k] = orig + h
                up = fn().item()
                flat[k] = orig - h
                down = fn().item()
            finally:
                flat[k] = orig
            g[k] = (up - down) / (2.0 * h)
        grads.append(g.reshape(leaf.shape))
    return grads


def relative_error(analytic: np.ndarray, numerical: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor)."""
    diff = np.linalg.norm(np.asarray(analytic) - np.asarray(numerical))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numerical), floor)
    return float(diff / scale)


def max_relative_error(fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between analytic and numerical gradients over ``leaves``."""
    analytic = analytic_gradients(fn, leaves)
    numerical = numerical_gradients(fn, leaves, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numerical))
