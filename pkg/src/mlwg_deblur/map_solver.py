"""MAP estimate of the smoothed TV posterior by majorization-minimization.

At the iterate ``x_k`` the concavity of the square root gives

    sqrt(s) <= sqrt(s_k) + (s - s_k) / (2 sqrt(s_k)),   s = dv^2 + dh^2 + eps

so ``l(x) + phi_eps(x)`` is majorized by the quadratic

    lam/2 ||y - A x||^2 + delta/2 (Dv x)' W (Dv x) + delta/2 (Dh x)' W (Dh x) + const

with ``W = diag(1 / sqrt(s_k))`` (lagged diffusivity).  Its minimizer solves

    (lam A'A + delta (Dv' W Dv + Dh' W Dh)) x = lam A' y

by conjugate gradients warm-started at ``x_k``.  CG iterates decrease the
quadratic monotonically from its value at ``x_k``, which equals the objective
there, so every outer step is a descent step even when CG stops early.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import Image
from .potentials import DiffOps, PosteriorSpec, grad_log_posterior, likelihood_potential, smoothed_tv

__all__ = ["MapResult", "objective", "solve_map", "conjugate_gradient", "stationarity"]


@dataclass(frozen=True)
class MapResult:
    x_map: Image
    objective: tuple          # l + phi_eps at the start and after every outer step
    iterations: int
    converged: bool
    cg_restarts: int = 0


def objective(spec: PosteriorSpec, x) -> float:
    """``l(x) + phi_eps(x)``, the negative log posterior up to a constant."""
    return likelihood_potential(spec, x) + smoothed_tv(spec.diff, x, spec.delta, spec.epsilon)


def conjugate_gradient(matvec, rhs: np.ndarray, x0: np.ndarray, rtol: float = 1e-8,
                       max_iter: int = 500):
    """Plain CG on arrays of any shape.

    Returns ``(x, iterations, breakdown)``; ``breakdown`` is True when a
    direction of non-positive curvature was met (the operator is singular or
    indefinite along it) and the iteration stopped there.
    """
    x = x0.copy()
    r = rhs - matvec(x)
    p = r.copy()
    rs = float(np.vdot(r, r))
    stop = (rtol * math.sqrt(float(np.vdot(rhs, rhs)))) ** 2
    for it in range(max_iter):
        if rs <= stop:
            return x, it, False
        ap = matvec(p)
        curv = float(np.vdot(p, ap))
        if not curv > 0:
            return x, it, True
        alpha = rs / curv
        x += alpha * p
        r -= alpha * ap
        rs_new = float(np.vdot(r, r))
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, max_iter, False


def solve_map(spec: PosteriorSpec, init=None, tol: float = 1e-8, max_outer: int = 200,
              max_cg: int = 500, cg_rtol: float = 1e-8) -> MapResult:
    """Lagged-diffusivity MM; stops when the relative objective decrease drops below ``tol``."""
    if spec.delta > 0 and spec.epsilon <= 0:
        raise ValueError("MAP estimation needs epsilon > 0")
    conv = spec.conv
    if init is None:
        x = np.array(spec.y, dtype=float)
    else:
        x = init.to_array() if isinstance(init, Image) else np.array(init, dtype=float)
    rhs = spec.lam * conv.adjoint(spec.y)
    trace = [objective(spec, x)]
    damping = 0.0
    restarts = 0
    converged = False
    outer = 0
    while outer < max_outer:
        outer += 1
        if spec.delta > 0:
            dv, dh = DiffOps.vertical(x), DiffOps.horizontal(x)
            weight = spec.delta / np.sqrt(dv * dv + dh * dh + spec.epsilon)
        else:
            weight = None

        def matvec(v, weight=weight):
            out = spec.lam * conv.adjoint(conv.apply(v))
            if weight is not None:
                out += DiffOps.vertical_t(weight * DiffOps.vertical(v))
                out += DiffOps.horizontal_t(weight * DiffOps.horizontal(v))
            if damping:
                out += damping * v
            return out

        x_new, _, breakdown = conjugate_gradient(matvec, rhs + damping * x, x, cg_rtol, max_cg)
        if breakdown:
            # singular system: retry with a proximal term damping/2 ||x - x_k||^2,
            # which keeps the quadratic a majorizer
            restarts += 1
            scale = spec.lam * float(np.abs(conv.psf.weights).sum()) ** 2
            damping = max(damping * 10.0, 1e-12 * scale)
            x_new, _, _ = conjugate_gradient(matvec, rhs + damping * x, x, cg_rtol, max_cg)
        f_new = objective(spec, x_new)
        f_old = trace[-1]
        if f_new > f_old:
            # only rounding can cause this; keep the previous iterate
            trace.append(f_old)
            converged = True
            break
        x = x_new
        trace.append(f_new)
        if f_old - f_new <= tol * max(abs(f_old), 1e-300):
            converged = True
            break
    return MapResult(Image.from_array(x), tuple(trace), outer, converged, restarts)


def stationarity(spec: PosteriorSpec, x) -> float:
    """``max |grad (l + phi_eps)(x)|``."""
    return float(np.max(np.abs(grad_log_posterior(spec, x))))
