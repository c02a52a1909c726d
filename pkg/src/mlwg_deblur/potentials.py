"""Global potentials of the smoothed TV posterior.

    log pi_eps(x) = -l(x) - phi_eps(x) + const
    l(x)          = lam/2 ||y - A x||^2
    phi_eps(x)    = delta * sum_a sqrt((Dv x)_a^2 + (Dh x)_a^2 + eps)

``Dv`` and ``Dh`` are forward differences with a zero Dirichlet boundary:
``(Dv x)(a, b) = x(a+1, b) - x(a, b)`` where ``x(n, b) = 0``, and likewise
along columns for ``Dh``.  In column-major vector form these are
``I_n kron D_n`` and ``D_n kron I_n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .forward import ConvOperator
from .grid import Image

__all__ = [
    "DiffOps",
    "PosteriorSpec",
    "likelihood_potential",
    "tv",
    "smoothed_tv",
    "grad_log_posterior",
    "log_posterior_unnorm",
]


def _array(x, n=None) -> np.ndarray:
    if isinstance(x, Image):
        x = x.to_array()
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"expected a square image, got shape {x.shape}")
    if n is not None and x.shape[0] != n:
        raise ValueError(f"image side {x.shape[0]} does not match {n}")
    return x


def _fsum(a: np.ndarray) -> float:
    return math.fsum(a.ravel())


@dataclass(frozen=True)
class DiffOps:
    """Matrix-free forward differences for ``n x n`` images."""

    n: int

    @staticmethod
    def vertical(x: np.ndarray) -> np.ndarray:
        out = -x.copy()
        out[..., :-1, :] += x[..., 1:, :]
        return out

    @staticmethod
    def horizontal(x: np.ndarray) -> np.ndarray:
        out = -x.copy()
        out[..., :, :-1] += x[..., :, 1:]
        return out

    @staticmethod
    def vertical_t(t: np.ndarray) -> np.ndarray:
        out = -t.copy()
        out[..., 1:, :] += t[..., :-1, :]
        return out

    @staticmethod
    def horizontal_t(t: np.ndarray) -> np.ndarray:
        out = -t.copy()
        out[..., :, 1:] += t[..., :, :-1]
        return out


@dataclass(frozen=True)
class PosteriorSpec:
    """Smoothed TV posterior ``pi_eps``.

    ``delta = 0`` is accepted and yields the pure Gaussian likelihood, which
    the conjugate test cases rely on.  ``epsilon = 0`` selects exact TV; it
    can be evaluated but not differentiated.
    """

    lam: float
    delta: float
    epsilon: float
    y: np.ndarray
    conv: ConvOperator

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"noise precision must be positive and finite, got {self.lam}")
        if self.delta < 0:
            raise ValueError(f"prior rate must be non-negative, got {self.delta}")
        if self.epsilon < 0:
            raise ValueError(f"smoothing parameter must be non-negative, got {self.epsilon}")
        y = _array(self.y, self.conv.n).copy()
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.conv.n

    @property
    def diff(self) -> DiffOps:
        return DiffOps(self.n)


def likelihood_potential(spec: PosteriorSpec, x) -> float:
    """``lam/2 ||y - A x||^2``."""
    res = spec.y - spec.conv.apply(_array(x, spec.n))
    return 0.5 * spec.lam * _fsum(res * res)


def _tv_terms(x: np.ndarray, epsilon: float) -> np.ndarray:
    dv = DiffOps.vertical(x)
    dh = DiffOps.horizontal(x)
    return np.sqrt(dv * dv + dh * dh + epsilon)


def tv(diff: DiffOps, x) -> float:
    """Isotropic total variation with zero boundary."""
    return _fsum(_tv_terms(_array(x, diff.n), 0.0))


def smoothed_tv(diff: DiffOps, x, delta: float, epsilon: float) -> float:
    """``phi_eps(x)``; equals ``delta * tv(x)`` at ``epsilon = 0``."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    return delta * _fsum(_tv_terms(_array(x, diff.n), epsilon))


def log_posterior_unnorm(spec: PosteriorSpec, x) -> float:
    """``-l(x) - phi_eps(x)``; the normalizing constant is never computed."""
    x = _array(x, spec.n)
    return -likelihood_potential(spec, x) - smoothed_tv(spec.diff, x, spec.delta, spec.epsilon)


def tv_gradient(x: np.ndarray, delta: float, epsilon: float) -> np.ndarray:
    """Gradient of ``phi_eps`` for an image or a stack of images."""
    dv = DiffOps.vertical(x)
    dh = DiffOps.horizontal(x)
    inv = 1.0 / np.sqrt(dv * dv + dh * dh + epsilon)
    return delta * (DiffOps.vertical_t(dv * inv) + DiffOps.horizontal_t(dh * inv))


def grad_log_posterior(spec: PosteriorSpec, x) -> np.ndarray:
    """``-grad l(x) - grad phi_eps(x)`` as a ``[row, col]`` array."""
    if spec.epsilon <= 0 and spec.delta > 0:
        raise ValueError("the exact TV posterior (epsilon = 0) has no gradient")
    x = _array(x, spec.n)
    g = spec.lam * spec.conv.adjoint(spec.y - spec.conv.apply(x))
    if spec.delta > 0:
        g -= tv_gradient(x, spec.delta, spec.epsilon)
    return g
