"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad, tape


class GradCheckError(FloatingPointError):
    """A NaN turned up in the analytic or numeric gradient."""


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-6,
    indices: np.ndarray | None = None,
) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and
    central differences, |a - n| / max(1, |a|).

    ``indices`` restricts the check to a subset of flat coordinates, which
    keeps large inputs affordable.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with tape() as tp:
        y = f(leaf)
        grads = backward(tp, y, set_leaf_grads=False)
    analytic = grads.get(leaf, np.zeros_like(x0)).reshape(-1)

    coords = np.arange(x0.size) if indices is None else np.asarray(indices).reshape(-1)
    worst = 0.0
    flat = x0.reshape(-1)
    for i in coords:
        orig = flat[i]
        with no_grad():
            flat[i] = orig + h
            fp = float(f(Tensor(x0)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(x0)).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[i]
        if np.isnan(a) or np.isnan(numeric):
            raise GradCheckError(
                f"NaN gradient at flat coordinate {int(i)}: analytic={a}, numeric={numeric}"
            )
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
