"""Central-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    worst: str
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error <= self.tol


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(loss_and_grads, params, h: float = 1e-5, tol: float = 1e-5, n_coords: int = 64,
               seed: int = 0, floor: float = 1e-8, pattern=None) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_and_grads()`` must run a forward and backward pass, leaving the
    analytic gradient in each ``Parameter.grad``, and return the loss.
    ``n_coords`` coordinates (or all, if fewer exist) are checked.

    ``pattern()``, if given, returns a fingerprint of every piecewise-linear
    branch taken in the last forward pass (ReLU masks).  Coordinates whose
    +-h perturbation flips a branch sit on a kink, where no derivative
    exists; they are skipped and replaced by fresh draws.
    """
    for p in params:
        p.zero_grad()
    loss_and_grads()
    analytic = [p.grad.copy() for p in params]
    base = pattern() if pattern else None

    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst, worst_at, checked, skipped = 0.0, "", 0, 0
    for flat in order:
        if checked >= n_coords:
            break
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, idx = params[k], int(flat - offsets[k])
        view = p.value.reshape(-1)
        orig = view[idx]
        view[idx] = orig + h
        f_plus = loss_and_grads()
        kink = pattern is not None and pattern() != base
        view[idx] = orig - h
        f_minus = loss_and_grads()
        kink = kink or (pattern is not None and pattern() != base)
        view[idx] = orig
        if kink:
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * h)
        err = rel_error(analytic[k].reshape(-1)[idx], numeric, floor)
        checked += 1
        if err > worst:
            worst, worst_at = err, f"{p.name}[{idx}] analytic={analytic[k].reshape(-1)[idx]:.6e} numeric={numeric:.6e}"
    for p, g in zip(params, analytic):
        p.grad[...] = g
    return GradCheckReport(worst, checked, tol, worst_at, skipped)
