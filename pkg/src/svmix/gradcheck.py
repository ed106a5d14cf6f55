"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. each entry of ``param``.

    ``param.data`` is perturbed in place and restored afterwards.
    """
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Worst entrywise |a - n| / max(|a|, |n|, floor).

    The floor keeps entries whose true gradient is ~0 from being judged on
    finite-difference round-off alone.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    h: float = 1e-5) -> Dict[int, float]:
    """Compare backprop against central differences for every tensor in ``params``.

    Returns the worst relative error per parameter position.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    errors = {}
    for k, p in enumerate(params):
        num = numeric_grad(lambda: loss_fn().item(), p, h)
        errors[k] = relative_error(analytic[k], num)
    return errors


def norm_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||) over a whole parameter tensor."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return float(np.linalg.norm(a - n) / scale) if scale > 0 else 0.0
