"""Point spread functions and the matrix-free blur operator.

The blur ``A`` uses zero padding outside the image:

    (A x)(a, b) = sum_{mu, nu} w(mu, nu) x(a + mu, b + nu)

Convolution is evaluated by direct summation.  Rank-one kernels (every
Gaussian PSF) are applied as two 1-D passes, which is exact up to rounding.
All array helpers act on the last two axes, so stacks of images or block
windows are processed in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import BlockPartition, Image, extended_block

__all__ = [
    "Psf",
    "ConvOperator",
    "DominanceCertificate",
    "gaussian_psf",
    "motion_psf",
    "delta_psf",
    "box_psf",
    "correlate",
    "convolve_t",
    "convolve",
    "convolve_adjoint",
    "generate_data",
    "dominance_check",
    "dense_matrix",
]


@dataclass(frozen=True)
class Psf:
    """Discrete PSF of radius ``r``; ``weights[r + mu, r + nu] = w(mu, nu)``."""

    weights: np.ndarray
    factors: tuple[np.ndarray, np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ValueError(f"PSF weights must be a square odd-sized array, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("PSF weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.factors is None:
            object.__setattr__(self, "factors", _rank_one_factors(w))

    @property
    def radius(self) -> int:
        return self.weights.shape[0] // 2

    @property
    def size(self) -> int:
        return self.weights.shape[0]


def _rank_one_factors(w: np.ndarray):
    if w.shape[0] == 1:
        return None
    u, s, vt = np.linalg.svd(w)
    if s[0] == 0 or s[1] > 1e-14 * s[0]:
        return None
    col = u[:, 0] * math.sqrt(s[0])
    row = vt[0] * math.sqrt(s[0])
    if col.sum() < 0:
        col, row = -col, -row
    return col, row


def delta_psf() -> Psf:
    return Psf(np.ones((1, 1)))


def box_psf(radius: int) -> Psf:
    """Uniform ``(2r+1)^2`` kernel summing to one."""
    k = 2 * radius + 1
    return Psf(np.full((k, k), 1.0 / (k * k)))


def gaussian_psf(radius: int, sigma: float) -> Psf:
    """Isotropic Gaussian kernel truncated to ``radius`` and normalized to unit mass."""
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    g = np.exp(-np.arange(-radius, radius + 1) ** 2 / (2.0 * sigma**2))
    g /= g.sum()
    return Psf(np.outer(g, g), factors=(g, g.copy()))


def motion_psf(length: int, angle_deg: float) -> Psf:
    """Linear motion blur of ``length`` pixels along ``angle_deg``.

    The segment is sampled at ``length`` points spaced one pixel apart along
    its dominant axis and each point is rounded to the nearest pixel, so
    axis-aligned and diagonal segments cover exactly ``length`` pixels.
    Angles are counter-clockwise from the positive column axis (image "up" is
    decreasing row).  The radius is the smallest one containing the segment.
    """
    if length < 1 or int(length) != length:
        raise ValueError(f"length must be a positive integer, got {length}")
    theta = math.radians(angle_deg)
    dc, dr = math.cos(theta), -math.sin(theta)
    step = 1.0 / max(abs(dc), abs(dr))
    t = (np.arange(length) - (length - 1) / 2.0) * step
    rows = np.floor(t * dr + 0.5 + 1e-9).astype(int)
    cols = np.floor(t * dc + 0.5 + 1e-9).astype(int)
    radius = int(max(np.abs(rows).max(), np.abs(cols).max()))
    w = np.zeros((2 * radius + 1, 2 * radius + 1))
    np.add.at(w, (rows + radius, cols + radius), 1.0)
    return Psf(w / w.sum())


# -- array-level direct summation -------------------------------------------------


def correlate(x: np.ndarray, psf: Psf) -> np.ndarray:
    """``A x`` over the last two axes with zero padding (same-size output)."""
    x = np.asarray(x, dtype=float)
    if psf.size == 1:
        return x * psf.weights[0, 0]
    if psf.factors is not None:
        col, row = psf.factors
        tmp = ndimage.correlate1d(x, col, axis=-2, mode="constant")
        return ndimage.correlate1d(tmp, row, axis=-1, mode="constant")
    w = psf.weights.reshape((1,) * (x.ndim - 2) + psf.weights.shape)
    return ndimage.correlate(x, w, mode="constant")


def convolve_t(x: np.ndarray, psf: Psf) -> np.ndarray:
    """``A^T x`` over the last two axes (correlation with the flipped kernel)."""
    x = np.asarray(x, dtype=float)
    if psf.size == 1:
        return x * psf.weights[0, 0]
    if psf.factors is not None:
        col, row = psf.factors
        tmp = ndimage.convolve1d(x, col, axis=-2, mode="constant")
        return ndimage.convolve1d(tmp, row, axis=-1, mode="constant")
    w = psf.weights.reshape((1,) * (x.ndim - 2) + psf.weights.shape)
    return ndimage.convolve(x, w, mode="constant")


@dataclass(frozen=True)
class ConvOperator:
    """Blur operator ``A`` for ``n x n`` images."""

    psf: Psf
    n: int

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-2:] != (self.n, self.n):
            raise ValueError(f"image shape {x.shape[-2:]} does not match operator side {self.n}")
        return x

    def apply(self, x: np.ndarray) -> np.ndarray:
        return correlate(self._check(x), self.psf)

    def adjoint(self, x: np.ndarray) -> np.ndarray:
        return convolve_t(self._check(x), self.psf)

    @property
    def radius(self) -> int:
        return self.psf.radius


def convolve(op: ConvOperator, image):
    """``A x``; accepts an :class:`Image` or a ``[row, col]`` array and returns the same kind."""
    if isinstance(image, Image):
        if image.n != op.n:
            raise ValueError(f"image side {image.n} does not match operator side {op.n}")
        return Image.from_array(op.apply(image.to_array()))
    return op.apply(image)


def convolve_adjoint(op: ConvOperator, image):
    """``A^T x``; same conventions as :func:`convolve`."""
    if isinstance(image, Image):
        if image.n != op.n:
            raise ValueError(f"image side {image.n} does not match operator side {op.n}")
        return Image.from_array(op.adjoint(image.to_array()))
    return op.adjoint(image)


def dense_matrix(op: ConvOperator) -> np.ndarray:
    """Assemble ``A`` as a ``d x d`` matrix in column-major pixel order (small ``n`` only)."""
    n, r = op.n, op.radius
    d = n * n
    A = np.zeros((d, d))
    w = op.psf.weights
    for b in range(n):
        for a in range(n):
            row = b * n + a
            for mu in range(-r, r + 1):
                for nu in range(-r, r + 1):
                    aa, bb = a + mu, b + nu
                    if 0 <= aa < n and 0 <= bb < n:
                        A[row, bb * n + aa] += w[mu + r, nu + r]
    return A


def generate_data(op: ConvOperator, x_true, noise_std: float, seed: int):
    """Blurred, noisy observation ``y = A x_true + noise``.

    Returns ``(y, lam)`` where ``lam = 1 / noise_std**2`` is the noise
    precision (``inf`` for noise-free data).  ``y`` has the type of ``x_true``.
    """
    if noise_std < 0:
        raise ValueError(f"noise_std must be non-negative, got {noise_std}")
    as_image = isinstance(x_true, Image)
    x = x_true.to_array() if as_image else np.asarray(x_true, dtype=float)
    y = op.apply(x)
    if noise_std > 0:
        y = y + noise_std * np.random.default_rng(seed).standard_normal(y.shape)
    lam = math.inf if noise_std == 0 else 1.0 / noise_std**2
    return (Image.from_array(y) if as_image else y), lam


# -- c-diagonal block dominance ------------------------------------------------------


@dataclass(frozen=True)
class DominanceCertificate:
    m_matrix: np.ndarray
    c: float
    dominant: bool


def _block_columns(op: ConvOperator, partition: BlockPartition, block_id: int):
    """Local columns of ``A`` for one block.

    Returns ``(rows, cols)`` where ``rows`` are the global flat indices of the
    clipped ``+r`` frame and ``cols`` is the ``len(rows) x q`` matrix whose
    k-th column is the blur of the k-th core pixel (column-major core order).
    """
    m, r = partition.m, op.radius
    q = partition.q
    unit = np.zeros((q, m + 2 * r, m + 2 * r))
    k = np.arange(q)
    unit[k, r + k % m, r + k // m] = 1.0
    blurred = correlate(unit, op.psf)
    frame = extended_block(partition, block_id, "+r")
    r0, c0 = partition.block_origin(block_id)
    lo_r, hi_r = frame.rows[0] - (r0 - r), frame.rows[1] - (r0 - r)
    lo_c, hi_c = frame.cols[0] - (c0 - r), frame.cols[1] - (c0 - r)
    clipped = blurred[:, lo_r:hi_r, lo_c:hi_c]
    # rows in column-major frame order, matching frame.pixel_indices
    cols = clipped.transpose(0, 2, 1).reshape(q, -1).T
    return frame.pixel_indices, cols


def _geometry(partition: BlockPartition, block_id: int, width: int):
    """Which sides of the block's frame are clipped, and by how much."""
    n, m = partition.n, partition.m
    r0, c0 = partition.block_origin(block_id)
    return (min(r0, width), min(n - r0 - m, width), min(c0, width), min(n - c0 - m, width))


def dominance_check(op: ConvOperator, partition: BlockPartition) -> DominanceCertificate:
    """Best scalar certificate ``M`` for ``A^T A`` being c-diagonal block dominant.

    ``M_ii`` is the smallest eigenvalue of ``(A^T A)_ii = A_i^T A_i`` and
    ``M_ij`` the spectral norm of ``(A^T A)_ij = A_i^T A_j``, where ``A_i``
    holds the columns of ``A`` belonging to block ``i``.  The columns are
    built locally by blurring unit images on the block's frame, so no
    ``d x d`` matrix is formed.  Blocks and block pairs with the same frame
    clipping share their values (the blur is translation invariant).
    Pairs whose frames do not overlap contribute exactly zero.
    """
    if partition.n != op.n:
        raise ValueError(f"partition side {partition.n} does not match operator side {op.n}")
    if partition.r != op.radius:
        raise ValueError(f"partition built for radius {partition.r}, operator has radius {op.radius}")
    b, r, m = partition.b, op.radius, partition.m
    columns = [None] * b

    def cols(i):
        if columns[i] is None:
            columns[i] = _block_columns(op, partition, i)
        return columns[i]

    M = np.zeros((b, b))
    diag_cache, pair_cache = {}, {}
    for i in range(b):
        key = _geometry(partition, i, r)
        if key not in diag_cache:
            _, a_i = cols(i)
            diag_cache[key] = float(np.linalg.eigvalsh(a_i.T @ a_i)[0])
        M[i, i] = diag_cache[key]
    for i in range(b):
        bri, bci = partition.block_coords(i)
        for j in range(i + 1, b):
            brj, bcj = partition.block_coords(j)
            if abs(bri - brj) > 1 or abs(bci - bcj) > 1 or r == 0:
                continue  # frames of width r around blocks m > 2r apart never meet
            key = (brj - bri, bcj - bci, _geometry(partition, i, r), _geometry(partition, j, r))
            if key not in pair_cache:
                rows_i, a_i = cols(i)
                rows_j, a_j = cols(j)
                common, ii, jj = np.intersect1d(rows_i, rows_j, assume_unique=True, return_indices=True)
                x, y = a_i[ii], a_j[jj]
                x = x[:, np.any(x != 0, axis=0)]
                y = y[:, np.any(y != 0, axis=0)]
                pair_cache[key] = float(np.linalg.norm(x.T @ y, 2)) if x.size and y.size else 0.0
            M[i, j] = M[j, i] = pair_cache[key]
    off = M.sum(axis=1) - np.diag(M)
    c = float(np.min(np.diag(M) - off))
    return DominanceCertificate(M, c, c > 0)
