"""Central finite-difference gradient checking at 64-bit precision."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, precision, sum_


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8, scale_floor: float = 1e-3) -> float:
    """Largest entry-wise ``|a - n| / max(|a|, |n|, scale_floor * max|n|, floor)``.

    The scale-relative floor keeps near-zero entries from turning finite
    difference truncation error (about ``h**2``) into spurious failures.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor, scale_floor * float(np.abs(n).max())))
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    h: float = 1e-5,
    seed: int = 0,
    max_entries: Optional[int] = None,
) -> float:
    """Compare analytic gradients of ``fn`` with central differences.

    ``fn`` maps Tensors to a Tensor of any shape; it is reduced to a scalar by
    a fixed random projection so every output entry contributes. When
    ``max_entries`` is set, only that many randomly chosen coordinates per
    input are perturbed.

    Returns:
        The maximum relative error over all checked coordinates.
    """
    rng = np.random.default_rng(seed)
    with precision("float64"):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*tensors)
        proj = rng.standard_normal(out.shape)

        def scalar(*xs):
            with no_grad():
                return float(np.sum(fn(*[Tensor(x) for x in xs]).data * proj))

        backward(sum_(out * Tensor(proj)))
        worst = 0.0
        for k, (arr, t) in enumerate(zip(arrays, tensors)):
            analytic = t.grad if t.grad is not None else np.zeros_like(arr)
            flat_idx = np.arange(arr.size)
            if max_entries is not None and arr.size > max_entries:
                flat_idx = rng.choice(arr.size, size=max_entries, replace=False)
            numeric = np.empty(len(flat_idx))
            for m, i in enumerate(flat_idx):
                idx = np.unravel_index(i, arr.shape)
                xs = [a.copy() for a in arrays]
                xs[k][idx] += h
                fp = scalar(*xs)
                xs[k][idx] -= 2 * h
                fm = scalar(*xs)
                numeric[m] = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(analytic.ravel()[flat_idx], numeric))
    return worst
