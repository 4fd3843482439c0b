"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Tensor


@dataclass
class GradReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_err: float
    worst_param: str
    ok: bool
    detail: str = ""

    def __post_init__(self):
        if not (self.max_rel_err >= 0.0):
            raise ValueError("max_rel_err must be non-negative")


def finite_diff_check(loss_fn, params: list[Tensor], eps: float = 1e-5,
                      tol: float = 1e-4) -> GradReport:
    """Compare analytic gradients of loss_fn against central differences.

    loss_fn takes no arguments and must rebuild the forward graph from the
    current ``param.data`` contents on every call (it is invoked 2 * n_elements
    times with perturbed parameters). Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("loss_fn must return a scalar Tensor")
    if not np.isfinite(loss.data).all():
        return GradReport(np.inf, "<loss>", False, "non-finite loss value")
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    max_rel = 0.0
    worst = ""
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            lp = float(loss_fn().data)
            flat[j] = orig - eps
            lm = float(loss_fn().data)
            flat[j] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                name = p.name or f"param[{pi}]"
                return GradReport(np.inf, f"{name}[{j}]", False,
                                  "non-finite loss during perturbation")
            fd = (lp - lm) / (2.0 * eps)
            a = analytic[pi].reshape(-1)[j]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if rel > max_rel:
                max_rel = rel
                worst = f"{p.name or f'param[{pi}]'}[{j}]"
    return GradReport(max_rel, worst, max_rel < tol)
