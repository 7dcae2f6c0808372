"""Central finite-difference validation of tape gradients.

Used by the test suite and by the ``check-grads`` CLI subcommand. The
numeric side perturbs raw float64 buffers one coordinate at a time with a
symmetric step, which is fully independent of the backward pass it checks.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tensor


def numeric_gradient(f: Callable[[], Tensor], t: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``t``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   scale_floor: float = 1e-2) -> float:
    """Max-norm error relative to the larger of the two gradient scales.

    The denominator is floored at ``scale_floor`` so structurally-zero
    gradients (where the numeric side is pure rounding noise) are compared
    absolutely: at the 1e-5 tolerance the floor corresponds to an absolute
    agreement of 1e-7.
    """
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), scale_floor)
    return diff / scale


def check_gradients(f: Callable[[], Tensor], wrt: dict[str, Tensor],
                    step: float = 1e-6) -> dict[str, float]:
    """Compare tape gradients of scalar ``f()`` against central differences.

    Returns the relative error per tensor name. ``f`` must rebuild the graph
    on every call (it is invoked 2N+1 times for N total coordinates).
    """
    for t in wrt.values():
        t.grad = None
    out = f()
    out.backward()
    analytic = {}
    for name, t in wrt.items():
        if t.grad is None:
            analytic[name] = np.zeros_like(t.data)
        else:
            analytic[name] = t.grad.copy()
        t.grad = None
    errors = {}
    for name, t in wrt.items():
        num = numeric_gradient(f, t, step=step)
        errors[name] = relative_error(analytic[name], num)
    return errors


def max_error(errors: dict[str, float]) -> float:
    return max(errors.values()) if errors else 0.0
