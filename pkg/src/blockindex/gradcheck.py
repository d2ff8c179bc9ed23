"""Finite-difference verification of the analytic gradients.

Central differences with step h on every entry of every matrix, against
the gradients from loss_and_grads.  An entry passes when the relative
error |a - n| / max(|a|, |n|) is below tol, or when the absolute
difference sits below the resolution of the difference quotient itself:
with float64 losses of order 1 and h = 1e-5, rounding alone perturbs the
quotient by about eps/(2h) ~ 5e-12, so entries that agree to 1e-9 are as
equal as central differences can certify (this also covers disconnected
parameters, where both sides are legitimately zero).
"""

from dataclasses import dataclass

import numpy as np

from .indexing_net import (
    NetworkConfig,
    NetworkParams,
    batch_loss,
    forward_batch,
    init_params,
    loss_and_grads,
)

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-6
ABS_FLOOR = 1e-9  # below the difference quotient's own rounding noise


@dataclass
class GradCheckResult:
    ok: bool
    max_rel_err: float
    per_matrix: dict  # name -> worst relative error


def finite_difference_grad(X, y, params: NetworkParams, cfg: NetworkConfig,
                           name: str, step: float = DEFAULT_STEP) -> np.ndarray:
    mat = getattr(params, name)
    grad = np.zeros_like(mat)
    flat = mat.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = batch_loss(forward_batch(X, params, cfg, train=True), y, cfg)
        flat[i] = keep - step
        lo = batch_loss(forward_batch(X, params, cfg, train=True), y, cfg)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def gradient_check(X, y, params: NetworkParams, cfg: NetworkConfig,
                   step: float = DEFAULT_STEP, tol: float = DEFAULT_TOL) -> GradCheckResult:
    """Compare analytic and numeric gradients for every non-frozen matrix."""
    b = forward_batch(X, params, cfg, train=True)
    _, analytic = loss_and_grads(b, y, params, cfg)
    worst = 0.0
    per_matrix = {}
    for name, a in analytic.items():
        if name in params.frozen:
            continue
        n = finite_difference_grad(X, y, params, cfg, name, step=step)
        diff = np.abs(a - n)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR)
        rel = np.where(diff <= ABS_FLOOR, 0.0, diff / denom)
        per_matrix[name] = float(rel.max()) if rel.size else 0.0
        worst = max(worst, per_matrix[name])
    return GradCheckResult(ok=worst <= tol, max_rel_err=worst, per_matrix=per_matrix)


def random_tiny_instance(rng, objective: str, residual: bool):
    """A small random network plus a labeled batch, for checking."""
    cfg = NetworkConfig(
        d=5, n_bins=3, M=2, K=3, n_classes=2,
        residual_enabled=residual, d_r=4, h=3,
        objective=objective,
        mu1=0.7, gamma1=0.9, mu2=0.4, gamma2=0.6,
    )
    params = init_params(cfg, rng)
    X = rng.normal(size=(4, cfg.d))
    y = rng.integers(0, cfg.n_classes, size=4)
    return X, y, params, cfg


def run_gradient_suite(seed: int = 7, nets_per_combo: int = 4,
                       step: float = DEFAULT_STEP, tol: float = DEFAULT_TOL):
    """The full objective x residual grid; returns (all_ok, report rows)."""
    rng = np.random.default_rng(seed)
    rows = []
    all_ok = True
    for objective in ("F11", "F10", "F2"):
        for residual in (False, True):
            for trial in range(nets_per_combo):
                X, y, params, cfg = random_tiny_instance(rng, objective, residual)
                res = gradient_check(X, y, params, cfg, step=step, tol=tol)
                rows.append({
                    "objective": objective,
                    "residual": residual,
                    "trial": trial,
                    "ok": res.ok,
                    "max_rel_err": res.max_rel_err,
                })
                all_ok = all_ok and res.ok
    return all_ok, rows
