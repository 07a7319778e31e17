"""Central finite differences, the independent oracle for ``Tensor.backward``."""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, no_grad

# Gradients smaller than this are compared absolutely rather than relatively.
REL_FLOOR = 1e-6


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return float(value.data)
    return float(value)


def finite_diff_grad(
    f: Callable[[Tensor], object],
    x: Tensor,
    h: float = 1e-5,
    indices: Optional[Iterable[Tuple[int, ...]]] = None,
) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for every (or each listed) coordinate.

    ``x`` is perturbed in place and restored, so ``f`` may ignore its argument
    and read ``x`` through a closure (e.g. a model parameter).  Coordinates not
    listed in ``indices`` are left at zero.
    """
    grad = np.zeros_like(x.data)
    coords = np.ndindex(x.shape) if indices is None else indices
    with no_grad():
        for idx in coords:
            orig = x.data[idx]
            x.data[idx] = orig + h
            fp = _scalar(f(x))
            x.data[idx] = orig - h
            fm = _scalar(f(x))
            x.data[idx] = orig
            grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def sample_coordinates(shape: Sequence[int], count: int, rng: np.random.Generator):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(int(i), shape) for i in sorted(flat)]
