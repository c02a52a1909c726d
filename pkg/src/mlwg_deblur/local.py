"""Local block conditionals of the smoothed TV posterior.

For block ``i`` with the rest of the image held fixed,

    log pi(x_i | rest) = -l_i(x_i) - phi_i(x_i) + const
    l_i(x_i)   = lam/2 ||y_eff - A_i x_i||^2                   (rows of the +r frame)
    phi_i(x_i) = delta * sum_a sqrt((Dv_i x_i + b_v)_a^2 + (Dh_i x_i + b_h)_a^2 + eps)

``y_eff`` is the data on the ``+r`` frame minus the blur of the fixed pixels
(core zeroed), and ``b_v``/``b_h`` are the differences of the ``+1`` frame
with the core zeroed.  The prior sum runs over every difference row whose
stencil touches the core: the core itself, the row above it and the column
to its left.  Rows that only see fixed pixels are constant and dropped.

Everything here is batched over a leading block axis.  Blocks are read
through windows of a zero-padded copy of the image; positions that fall
outside the image are masked out, so results match the clipped geometry.
Core blocks are ``(m, m)`` arrays in ``[row, col]`` order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .forward import Psf, convolve_t, correlate
from .grid import BlockPartition, Image
from .potentials import PosteriorSpec

__all__ = [
    "LocalProblem",
    "LocalLikelihoodCtx",
    "LocalPriorCtx",
    "build_contexts",
    "local_like_potential",
    "local_like_grad",
    "local_prior_potential",
    "local_prior_grad",
    "local_logdensity_and_grad",
]


def _rowsum(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.reshape(a.shape[0], -1).sum(axis=1)


@dataclass(frozen=True)
class LocalLikelihoodCtx:
    """Fixed part of the local block likelihood for a batch of blocks."""

    block_ids: np.ndarray
    y_eff: np.ndarray      # (k, m+2r, m+2r), zero outside the image
    mask: np.ndarray       # (k, m+2r, m+2r), 1 inside the image
    psf: Psf
    lam: float
    bands: tuple | None = None  # (rows, cols) banded factors of a separable blur, (m+2r, m) each

    @property
    def r(self) -> int:
        return self.psf.radius

    def blur(self, xb: np.ndarray) -> np.ndarray:
        """``A_i x_i``: blur of the core alone, on the ``+r`` frame."""
        if self.bands is not None:
            rows, cols = self.bands
            return (rows @ xb @ cols.T) * self.mask
        r = self.r
        if r == 0:
            return correlate(xb, self.psf) * self.mask
        padded = np.pad(xb, ((0, 0), (r, r), (r, r)))
        return correlate(padded, self.psf) * self.mask

    def blur_t(self, v: np.ndarray) -> np.ndarray:
        """``A_i^T v`` for ``v`` on the ``+r`` frame."""
        if self.bands is not None:
            rows, cols = self.bands
            return rows.T @ (v * self.mask) @ cols
        r = self.r
        out = convolve_t(v * self.mask, self.psf)
        return out[:, r:out.shape[1] - r, r:out.shape[2] - r] if r else out

    def residual(self, xb: np.ndarray) -> np.ndarray:
        return self.y_eff - self.blur(xb)


@dataclass(frozen=True)
class LocalPriorCtx:
    """Fixed part of the local block prior; arrays live on the ``(m+1)^2`` row grid.

    Row-grid position ``(a, b)`` is the difference row at image pixel
    ``(r0 - 1 + a, c0 - 1 + b)`` where ``(r0, c0)`` is the block origin.
    """

    block_ids: np.ndarray
    b_v: np.ndarray
    b_h: np.ndarray
    mask: np.ndarray

    def differences(self, xb: np.ndarray):
        m = xb.shape[1]
        dv = np.array(np.broadcast_to(self.b_v, (xb.shape[0], m + 1, m + 1)))
        dh = np.array(np.broadcast_to(self.b_h, dv.shape))
        # core embedded in a zero +1 frame: V[1:m+1, 1:m+1] = xb
        dv[:, 1:, 1:] -= xb
        dv[:, :m, 1:] += xb
        dh[:, 1:, 1:] -= xb
        dh[:, 1:, :m] += xb
        dv *= self.mask
        dh *= self.mask
        return dv, dh


class LocalProblem:
    """Per-partition geometry and cached data windows for local conditionals."""

    def __init__(self, spec: PosteriorSpec, partition: BlockPartition):
        if spec.n != partition.n:
            raise ValueError(f"partition side {partition.n} does not match image side {spec.n}")
        if spec.conv.radius != partition.r:
            raise ValueError(
                f"partition built for radius {partition.r}, operator has radius {spec.conv.radius}"
            )
        self.spec, self.partition = spec, partition
        n, m, r = partition.n, partition.m, partition.r
        self.n, self.m, self.r = n, m, r
        self.pad = max(2 * r, 1)
        self.window = m + 2 * self.pad
        nb = partition.blocks_per_side
        ids = np.arange(partition.b)
        self.block_rows = ids % nb
        self.block_cols = ids // nb

        inside = np.pad(np.ones((n, n)), self.pad)
        P = self.pad
        lo, hi = P - r, P + m + r
        self.like_mask = self._windows(inside)[:, lo:hi, lo:hi].copy()
        ypad = np.pad(spec.y, self.pad)
        self.y_frame = self._windows(ypad)[:, lo:hi, lo:hi] * self.like_mask

        # separable kernels blur small windows fastest as banded matrix products:
        # S[a, p] = f[p - a] maps a (m + 4r) window to its (m + 2r) frame
        self.bands = None
        psf = spec.conv.psf
        if r and psf.factors is not None:
            F, G = m + 2 * r, m + 4 * r
            offs = np.arange(G)[None, :] - np.arange(F)[:, None]
            ok = (offs >= 0) & (offs <= 2 * r)
            self.bands = tuple(np.where(ok, f[np.clip(offs, 0, 2 * r)], 0.0) for f in psf.factors)

        pm = np.ones((partition.b, m + 1, m + 1))
        pm[:, 0, 0] = 0.0
        pm[self.block_rows == 0, 0, :] = 0.0
        pm[self.block_cols == 0, :, 0] = 0.0
        self.prior_mask = pm

    def padded(self, x: np.ndarray) -> np.ndarray:
        return np.pad(np.asarray(x, dtype=float), self.pad)

    def _windows(self, xp: np.ndarray, ids=None) -> np.ndarray:
        view = sliding_window_view(xp, (self.window, self.window))[:: self.m, :: self.m]
        if ids is None:
            return view[self.block_rows, self.block_cols]
        return view[self.block_rows[ids], self.block_cols[ids]]

    def core_slices(self, block_id: int):
        P, m = self.pad, self.m
        r0 = P + self.block_rows[block_id] * m
        c0 = P + self.block_cols[block_id] * m
        return slice(r0, r0 + m), slice(c0, c0 + m)

    def cores(self, xp: np.ndarray, ids) -> np.ndarray:
        P, m = self.pad, self.m
        return self._windows(xp, ids)[:, P:P + m, P:P + m]

    def contexts(self, xp: np.ndarray, ids) -> tuple[LocalLikelihoodCtx, LocalPriorCtx]:
        """Contexts for blocks ``ids`` given the padded current state ``xp``."""
        ids = np.atleast_1d(np.asarray(ids, dtype=np.intp))
        P, m, r = self.pad, self.m, self.r
        win = self._windows(xp, ids)          # fancy indexing copies
        win[:, P:P + m, P:P + m] = 0.0        # projector onto the fixed pixels

        lo = P - 2 * r
        fixed = win[:, lo:P + m + 2 * r, lo:P + m + 2 * r]
        if self.bands is not None:
            rows, cols = self.bands
            blurred = rows @ fixed @ cols.T
            core_bands = (rows[:, 2 * r:2 * r + m], cols[:, 2 * r:2 * r + m])
        else:
            blurred = correlate(fixed, self.spec.conv.psf)
            if r:
                blurred = blurred[:, r:-r, r:-r]
            core_bands = None
        mask = self.like_mask[ids]
        y_eff = (self.y_frame[ids] - blurred) * mask
        like = LocalLikelihoodCtx(ids, y_eff, mask, self.spec.conv.psf, self.spec.lam, core_bands)

        v = win[:, P - 1:P + m + 1, P - 1:P + m + 1]
        pmask = self.prior_mask[ids]
        b_v = (v[:, 1:, :m + 1] - v[:, :m + 1, :m + 1]) * pmask
        b_h = (v[:, :m + 1, 1:] - v[:, :m + 1, :m + 1]) * pmask
        prior = LocalPriorCtx(ids, b_v, b_h, pmask)
        return like, prior

    def logdensity_and_grad(self, like: LocalLikelihoodCtx, prior: LocalPriorCtx, xb: np.ndarray):
        """Batched log conditional density (up to a constant) and its gradient."""
        return local_logdensity_and_grad(like, prior, xb, self.spec)


def _prior_value_grad(prior: LocalPriorCtx, xb, delta, epsilon, need_grad):
    dv, dh = prior.differences(xb)
    lam_diag = np.sqrt(dv * dv + dh * dh + epsilon)
    value = delta * _rowsum(lam_diag * prior.mask)
    if not need_grad:
        return value, None
    if epsilon <= 0:
        raise ValueError("the local prior gradient needs epsilon > 0")
    inv = 1.0 / lam_diag
    tv = dv * inv
    th = dh * inv
    grad = tv[:, :-1, 1:] - tv[:, 1:, 1:] + th[:, 1:, :-1] - th[:, 1:, 1:]
    return value, delta * grad


# -- single-block convenience API ----------------------------------------------------


def _state_array(x) -> np.ndarray:
    return x.to_array() if isinstance(x, Image) else np.asarray(x, dtype=float)


def _batch(x_block):
    xb = np.asarray(x_block, dtype=float)
    return (xb[None], True) if xb.ndim == 2 else (xb, False)


def build_contexts(spec: PosteriorSpec, partition: BlockPartition, x_current, block_id,
                   problem: LocalProblem | None = None):
    """Local contexts for ``block_id`` (an int or a sequence of ids)."""
    problem = problem or LocalProblem(spec, partition)
    xp = problem.padded(_state_array(x_current))
    return problem.contexts(xp, block_id)


def local_like_potential(ctx: LocalLikelihoodCtx, x_block):
    xb, single = _batch(x_block)
    res = ctx.residual(xb)
    val = 0.5 * ctx.lam * _rowsum(res * res)
    return float(val[0]) if single else val


def local_like_grad(ctx: LocalLikelihoodCtx, x_block) -> np.ndarray:
    xb, single = _batch(x_block)
    g = -ctx.lam * ctx.blur_t(ctx.residual(xb))
    return g[0] if single else g


def local_prior_potential(ctx: LocalPriorCtx, x_block, delta: float, epsilon: float):
    xb, single = _batch(x_block)
    val, _ = _prior_value_grad(ctx, xb, delta, epsilon, need_grad=False)
    return float(val[0]) if single else val


def local_prior_grad(ctx: LocalPriorCtx, x_block, delta: float, epsilon: float) -> np.ndarray:
    xb, single = _batch(x_block)
    _, g = _prior_value_grad(ctx, xb, delta, epsilon, need_grad=True)
    return g[0] if single else g


def local_logdensity_and_grad(like: LocalLikelihoodCtx, prior: LocalPriorCtx, x_block,
                              spec: PosteriorSpec):
    """``(-l_i - phi_i, gradient)`` of the block's full conditional, up to a constant."""
    xb, single = _batch(x_block)
    res = like.residual(xb)
    logd = -0.5 * spec.lam * _rowsum(res * res)
    grad = spec.lam * like.blur_t(res)
    if spec.delta > 0:
        value, g_prior = _prior_value_grad(prior, xb, spec.delta, spec.epsilon, need_grad=True)
        logd = logd - value
        grad = grad - g_prior
    if single:
        return float(logd[0]), grad[0]
    return logd, grad
