"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class InputReport:
    name: str
    max_rel_error: float
    mean_rel_error: float
    checked: int
    nonfinite: bool = False


@dataclass
class GradCheckReport:
    inputs: list[InputReport] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.inputs), default=0.0)

    @property
    def mean_rel_error(self) -> float:
        if not self.inputs:
            return 0.0
        return float(np.mean([r.mean_rel_error for r in self.inputs]))

    @property
    def flagged(self) -> bool:
        return any(r.nonfinite for r in self.inputs)

    def passed(self, tol: float) -> bool:
        return not self.flagged and self.max_rel_error < tol

    def __str__(self) -> str:
        rows = [
            f"{r.name:>24s}  max {r.max_rel_error:.3e}  mean {r.mean_rel_error:.3e}  n={r.checked}"
            + ("  NONFINITE" if r.nonfinite else "")
            for r in self.inputs
        ]
        return "\n".join(rows)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    op_closure: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    names: Optional[Sequence[str]] = None,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
    analytic: Optional[Sequence[np.ndarray]] = None,
) -> GradCheckReport:
    """Compare backprop gradients of a scalar closure with central differences.

    ``op_closure`` must rebuild the graph from the current values of ``inputs``
    and return a single-element tensor (reduce with ``ops.sum`` first). With
    ``max_coords`` only a random subset of coordinates per input is perturbed.
    Pass ``analytic`` to check externally supplied gradients instead of
    running backward, which is how a corrupted gradient can be fed in.
    """
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    if analytic is None:
        for t in inputs:
            t.zero_grad()
        out = op_closure()
        if out.data.size != 1:
            raise ValueError("op_closure must return a scalar; reduce with ops.sum")
        out.backward()
        analytic = [
            t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
        ]
    rng = rng if rng is not None else np.random.default_rng(0)

    report = GradCheckReport()
    for name, tensor, grad in zip(names, inputs, analytic):
        grad = np.asarray(grad, dtype=np.float64)
        size = tensor.data.size
        coords = np.arange(size)
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        flat = tensor.data.reshape(-1)
        numeric = np.empty(len(coords))
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = op_closure().item()
            flat[i] = orig - eps
            f_minus = op_closure().item()
            flat[i] = orig
            numeric[j] = (f_plus - f_minus) / (2.0 * eps)
        a = grad.reshape(-1)[coords]
        nonfinite = not np.all(np.isfinite(a))
        rel = relative_error(a, numeric, floor)
        if nonfinite:
            rel = np.where(np.isfinite(rel), rel, np.inf)
        report.inputs.append(
            InputReport(
                name=name,
                max_rel_error=float(rel.max()) if rel.size else 0.0,
                mean_rel_error=float(rel.mean()) if rel.size else 0.0,
                checked=len(coords),
                nonfinite=nonfinite,
            )
        )
    return report
