"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckResult:
    rel_errors: np.ndarray

    @property
    def worst(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    def fraction_below(self, tol: float) -> float:
        if not self.rel_errors.size:
            return 1.0
        return float(np.mean(self.rel_errors < tol))

    def passes(self, tol: float = 1e-4, worst_tol: float = 1e-3, quantile: float = 0.99) -> bool:
        return self.fraction_below(tol) >= quantile and self.worst < worst_tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor): tiny gradients are compared absolutely."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
              max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None,
              floor: float = 1e-6) -> GradCheckResult:
    """Compare tape gradients of the scalar ``fn()`` with central differences.

    ``max_coords`` limits the number of perturbed entries per parameter
    (sampled with ``rng``); ``None`` checks every entry.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    errs = []
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            num[j] = (fp - fm) / (2 * h)
        errs.append(relative_error(ga.reshape(-1)[idx], num, floor))
    return GradCheckResult(np.concatenate(errs) if errs else np.zeros(0))
