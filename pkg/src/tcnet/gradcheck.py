"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Tape, Tensor, no_grad


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _numeric(f: Callable[[], float], arr: np.ndarray, eps: float, coords) -> np.ndarray:
    flat = arr.reshape(-1)
    out = np.empty(len(coords))
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"function is non-finite near coordinate {i}")
        out[n] = (fp - fm) / (2.0 * eps)
    return out


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    point: np.ndarray,
    eps: float = 1e-5,
    coords: Optional[np.ndarray] = None,
) -> float:
    """Worst relative error between the tape gradient of scalar ``f`` at
    ``point`` and central differences, with denominator max(|a|, |b|, 1e-8).

    ``coords`` optionally restricts the comparison to a subset of flat indices.
    Functions with a hard-threshold gate must be evaluated on their relaxed
    (surrogate) path; the threshold itself has no finite-difference derivative.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if not np.isfinite(y.data).all():
        raise FloatingPointError("function is non-finite at the check point")
    tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    if coords is None:
        coords = np.arange(x.size)

    probe = Tensor(x.data.copy())

    def value() -> float:
        with no_grad():
            return float(f(probe).data)

    numeric = _numeric(value, probe.data, eps, coords)
    return _rel_err(analytic.reshape(-1)[coords], numeric)


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """Finite-difference check of every named parameter of a closure.

    ``loss_fn`` rebuilds the forward pass from the live parameter tensors.
    When ``max_coords`` is set, that many coordinates per parameter are
    sampled with ``rng``. Returns the worst relative error per parameter.
    """
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    def value() -> float:
        with no_grad():
            return float(loss_fn().data)

    errors = {}
    for name, p in params.items():
        n = p.size
        if max_coords is not None and n > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = np.arange(n)
        numeric = _numeric(value, p.data, eps, coords)
        errors[name] = _rel_err(analytic[name].reshape(-1)[coords], numeric)
    return errors
