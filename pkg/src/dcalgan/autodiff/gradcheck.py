"""Central finite-difference gradient checking."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import GraphError
from . import ops
from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


@dataclass(frozen=True)
class GradCheckReport:
    max_error: float
    checked: int
    skipped: int  # coordinates whose perturbation crossed a kink


@contextmanager
def _recording_branches() -> Iterator[list[np.ndarray]]:
    log: list[np.ndarray] = []
    previous, ops._branch_log = ops._branch_log, log
    try:
        yield log
    finally:
        ops._branch_log = previous


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_report(f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
                      inputs: Tensor | Sequence[Tensor], step: float = 1e-4,
                      max_coords: int | None = None, seed: int = 0,
                      skip_kinks: bool = False) -> GradCheckReport:
    """Compare backprop against central differences coordinate by coordinate.

    ``f`` builds a fresh graph and returns a scalar tensor. When a single
    tensor is passed as ``inputs``, ``f`` receives it as its argument;
    otherwise ``f`` takes no arguments and closes over the tensors being
    checked (typically network parameters). With ``max_coords`` only a random
    subsample of coordinates (across all inputs) is perturbed.

    Functions with kinks (relu, max-pool) are only differentiable away from
    ties. With ``skip_kinks`` the branch taken by every piecewise op is
    recorded and a coordinate whose +/- perturbation changes any branch is
    left out of the maximum and counted in ``skipped``.
    """
    single = isinstance(inputs, Tensor)
    tensors = [inputs] if single else list(inputs)

    def evaluate() -> tuple[float, list[np.ndarray]]:
        with _recording_branches() as log:
            out = f(tensors[0]) if single else f()  # type: ignore[call-arg]
        if out.size != 1:
            raise GraphError(f"grad_check needs a scalar function, got shape {out.shape}")
        return float(out.data), log

    for t in tensors:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    with _recording_branches() as base:
        out = f(tensors[0]) if single else f()  # type: ignore[call-arg]
    if out.size != 1:
        raise GraphError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    coords = [(ti, j) for ti, t in enumerate(tensors) for j in range(t.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst, checked, skipped = 0.0, 0, 0
    for ti, j in coords:
        flat = tensors[ti].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        plus, plus_log = evaluate()
        flat[j] = orig - step
        minus, minus_log = evaluate()
        flat[j] = orig
        if skip_kinks and not (_same_branches(base, plus_log) and _same_branches(base, minus_log)):
            skipped += 1
            continue
        numeric = (plus - minus) / (2 * step)
        a = float(analytic[ti].reshape(-1)[j])
        worst = max(worst, float(relative_error(np.array(a), np.array(numeric))))
        checked += 1
    for t in tensors:
        t.grad = None
    return GradCheckReport(worst, checked, skipped)


def grad_check(f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
               inputs: Tensor | Sequence[Tensor], step: float = 1e-4,
               max_coords: int | None = None, seed: int = 0, skip_kinks: bool = False) -> float:
    """Max relative error between backprop and central differences."""
    return grad_check_report(f, inputs, step, max_coords, seed, skip_kinks).max_error
