"""Central finite differences, used as the independent oracle for backward()."""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor, backward, no_grad


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value, dtype=np.float64)
    if arr.size != 1:
        raise ValueError(f"function must return a scalar, got shape {arr.shape}")
    return float(arr.reshape(()))


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5,
                     indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Estimate d f / d x elementwise as (f(x + h e_i) - f(x - h e_i)) / 2h.

    ``f`` receives a constant tensor holding the perturbed values.  When
    ``indices`` is given only those elements are estimated; the rest stay 0.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    base = np.array(x.data, dtype=x.dtype)
    grad = np.zeros(base.shape, dtype=np.float64)
    idx_iter = np.ndindex(base.shape) if indices is None else indices
    with no_grad():
        for idx in idx_iter:
            idx = tuple(idx)
            orig = base[idx]
            base[idx] = orig + h
            fp = _scalar(f(Tensor._wrap(base.copy())))
            base[idx] = orig - h
            fm = _scalar(f(Tensor._wrap(base.copy())))
            base[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite function value at index {idx}")
            grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_inplace(loss_fn: Callable[[], object], param: Tensor, h: float = 1e-5,
                        indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Same estimate, but perturbs ``param.data`` in place and calls ``loss_fn()``.

    This is how model parameters are checked: the closure re-runs the forward
    pass with whatever values the parameter currently holds.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    data = param.data
    grad = np.zeros(data.shape, dtype=np.float64)
    idx_iter = np.ndindex(data.shape) if indices is None else indices
    with no_grad():
        for idx in idx_iter:
            idx = tuple(idx)
            orig = data[idx]
            data[idx] = orig + h
            fp = _scalar(loss_fn())
            data[idx] = orig - h
            fm = _scalar(loss_fn())
            data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss perturbing {param.name or 'tensor'} at {idx}")
            grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, mask: np.ndarray | None = None) -> float:
    """max |a - n| / max(1, |n|), optionally over a subset of elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
    if mask is not None:
        err = err[mask]
    return float(err.max()) if err.size else 0.0


def sample_indices(shape: tuple[int, ...], limit: int | None, rng: np.random.Generator) -> list[tuple]:
    total = int(np.prod(shape)) if shape else 1
    if limit is None or total <= limit:
        return [tuple(i) for i in np.ndindex(shape)]
    flat = rng.choice(total, size=limit, replace=False)
    return [tuple(int(v) for v in np.unravel_index(i, shape)) for i in sorted(flat)]


def gradient_report(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5,
                    max_elements: int | None = None, seed: int = 0) -> dict[str, float]:
    """Compare backward() against finite differences for every named parameter.

    Returns the max relative error per parameter.  ``loss_fn`` must be
    deterministic (dropout off, batch norm statistics frozen or recomputed
    identically on each call).
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        idx = sample_indices(p.shape, max_elements, rng)
        numeric = finite_diff_inplace(loss_fn, p, h, idx)
        mask = np.zeros(p.shape, dtype=bool)
        for i in idx:
            mask[i] = True
        report[name] = relative_error(analytic[name], numeric, mask)
    return report
