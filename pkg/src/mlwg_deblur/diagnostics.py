"""Chain storage and convergence diagnostics.

* ``psrf``: split-R-hat per pixel.  Every chain is cut into two halves and
  the classic between/within variance ratio is taken over the halves.
* ``ness``: effective sample size from Geyer's initial monotone sequence,
  per chain, averaged over chains, as a percentage of the saved count.
  Autocovariances are direct lag sums, evaluated lag pair by lag pair only
  until every pixel has truncated.
* ``summary_images``: pooled mean, standard deviation and equal-tailed
  credible interval widths (linear interpolation between order statistics).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Image

__all__ = [
    "PSRF_THRESHOLD",
    "ChainStore",
    "psrf",
    "ess",
    "ness",
    "summary_images",
    "converged",
]

PSRF_THRESHOLD = 1.1
PSRF_UNMIXED = float(np.finfo(float).max)  # zero within-variance, halves disagree
_CHUNK = 4096  # pixels per vectorized pass


@dataclass(frozen=True)
class ChainStore:
    """Saved states of one or more chains.

    ``samples`` has shape ``(n_chains, n_saved, d)`` with pixels in
    column-major order.  ``accept_rate`` and ``tau`` hold the post-burn-in
    acceptance rate and final step size of every block, ``(n_chains, b)``.
    """

    samples: np.ndarray
    thin: int
    accept_rate: np.ndarray
    tau: np.ndarray
    n: int
    burn_in: int = 0
    sampler: str = ""
    chain_ids: tuple = field(default=())

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 3:
            raise ValueError(f"samples must be (chains, saved, d), got shape {s.shape}")
        if s.shape[2] != self.n * self.n:
            raise ValueError(f"samples carry {s.shape[2]} pixels, expected {self.n * self.n}")
        if self.thin < 1:
            raise ValueError(f"thin must be >= 1, got {self.thin}")
        acc = np.asarray(self.accept_rate, dtype=float).reshape(s.shape[0], -1)
        tau = np.asarray(self.tau, dtype=float).reshape(s.shape[0], -1)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "accept_rate", acc)
        object.__setattr__(self, "tau", tau)
        ids = tuple(self.chain_ids) or tuple(range(s.shape[0]))
        if len(ids) != s.shape[0]:
            raise ValueError("one chain id per chain required")
        object.__setattr__(self, "chain_ids", ids)

    @property
    def n_chains(self) -> int:
        return self.samples.shape[0]

    @property
    def n_saved(self) -> int:
        return self.samples.shape[1]

    @property
    def d(self) -> int:
        return self.samples.shape[2]

    def chain(self, k: int) -> "ChainStore":
        return ChainStore(self.samples[k:k + 1], self.thin, self.accept_rate[k:k + 1],
                          self.tau[k:k + 1], self.n, self.burn_in, self.sampler,
                          (self.chain_ids[k],))

    @classmethod
    def merge(cls, stores) -> "ChainStore":
        """Stack chains from compatible stores."""
        stores = list(stores)
        if not stores:
            raise ValueError("nothing to merge")
        first = stores[0]
        for s in stores[1:]:
            if (s.d, s.thin, s.n_saved) != (first.d, first.thin, first.n_saved):
                raise ValueError("stores differ in pixel count, thinning or saved length")
            if s.accept_rate.shape[1] != first.accept_rate.shape[1]:
                raise ValueError("stores differ in block count")
        return cls(
            samples=np.concatenate([s.samples for s in stores]),
            thin=first.thin,
            accept_rate=np.concatenate([s.accept_rate for s in stores]),
            tau=np.concatenate([s.tau for s in stores]),
            n=first.n,
            burn_in=first.burn_in,
            sampler=first.sampler,
            chain_ids=sum((s.chain_ids for s in stores), ()),
        )


def _samples(store_or_array) -> tuple[np.ndarray, int | None]:
    if isinstance(store_or_array, ChainStore):
        return store_or_array.samples, store_or_array.n
    a = np.asarray(store_or_array, dtype=float)
    if a.ndim == 1:
        a = a[None, :, None]
    elif a.ndim == 2:
        a = a[:, :, None]
    return a, None


def _as_image(values: np.ndarray, n):
    return Image(n, values) if n is not None else values


def _split_rhat(chunk: np.ndarray) -> np.ndarray:
    c, s, _ = chunk.shape
    half = s // 2
    halves = np.concatenate([chunk[:, :half], chunk[:, s - half:]], axis=0)
    means = halves.mean(axis=1)
    within = halves.var(axis=1, ddof=1).mean(axis=0)
    between = half * means.var(axis=0, ddof=1)
    var_plus = (half - 1) / half * within + between / half
    out = np.ones(chunk.shape[2])
    pos = within > 0
    out[pos] = np.sqrt(var_plus[pos] / within[pos])
    # zero within-chain variance: 1 if every half agrees, unbounded otherwise
    out[~pos & (between > 0)] = PSRF_UNMIXED
    return out


def psrf(store):
    """Per-pixel split-R-hat; an :class:`Image` for a store, a vector for raw arrays.

    Raw input is ``(chains, samples)`` or ``(chains, samples, d)``.
    """
    x, n = _samples(store)
    if x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError(f"need >= 2 chains with >= 4 samples, got {x.shape[:2]}")
    out = np.concatenate([_split_rhat(x[:, :, k:k + _CHUNK]) for k in range(0, x.shape[2], _CHUNK)])
    return _as_image(out, n)


def _ess_series(chunk: np.ndarray) -> np.ndarray:
    """ESS of each column of ``chunk`` (samples x pixels)."""
    N = chunk.shape[0]
    xc = chunk - chunk.mean(axis=0)
    gamma0 = np.einsum("ij,ij->j", xc, xc) / N
    ess = np.full(chunk.shape[1], float(N))
    live = np.flatnonzero(gamma0 > 0)
    if N < 4 or live.size == 0:
        return ess
    xc, g0 = xc[:, live], gamma0[live]

    def rho(lag, cols):
        a = xc[:, cols]
        return np.einsum("ij,ij->j", a[:N - lag], a[lag:]) / (N * g0[cols])

    cols = np.arange(live.size)
    prev = 1.0 + rho(1, cols)                 # Gamma_0
    total = np.where(prev > 0, prev, 0.0)
    active = prev > 0
    k = 1
    while active.any() and 2 * k + 1 < N:
        idx = cols[active]
        pair = rho(2 * k, idx) + rho(2 * k + 1, idx)
        keep = pair > 0
        pair = np.minimum(pair, prev[idx])    # monotone sequence
        total[idx[keep]] += pair[keep]
        prev[idx] = pair
        active[idx[~keep]] = False
        k += 1
    tau = -1.0 + 2.0 * total
    # floor as in common practice, keeps anti-correlated series finite and positive
    tau = np.maximum(tau, 1.0 / math.log10(N))
    ess[live] = N / tau
    return ess


def ess(series) -> np.ndarray:
    """ESS per column of a ``(samples, ...)`` array; a constant column counts as ``N``."""
    a = np.asarray(series, dtype=float)
    flat = a.reshape(a.shape[0], -1)
    out = np.concatenate([_ess_series(flat[:, k:k + _CHUNK]) for k in range(0, flat.shape[1], _CHUNK)])
    return out.reshape(a.shape[1:]) if a.ndim > 1 else out[0]


def ness(store):
    """Per-pixel normalized ESS in percent (chain-averaged ESS over saved count)."""
    x, n = _samples(store)
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError("need at least one chain with samples")
    per_chain = np.stack([ess(x[c]) for c in range(x.shape[0])])
    out = 100.0 * per_chain.mean(axis=0) / x.shape[1]
    return _as_image(out, n)


def summary_images(store, ci_level: float = 0.9) -> dict:
    """Pooled posterior mean, standard deviation and CI width per pixel."""
    if not 0 < ci_level < 1:
        raise ValueError(f"ci_level must lie in (0, 1), got {ci_level}")
    x, n = _samples(store)
    pooled = x.reshape(-1, x.shape[2])
    tail = (1.0 - ci_level) / 2.0
    lo, hi = np.quantile(pooled, [tail, 1.0 - tail], axis=0, method="linear")
    std = pooled.std(axis=0, ddof=1) if pooled.shape[0] > 1 else np.zeros(pooled.shape[1])
    std[hi == lo] = 0.0  # a repeated state has no spread; avoid rounding residue
    return {
        "mean": _as_image(pooled.mean(axis=0), n),
        "std": _as_image(std, n),
        "ci_width": _as_image(hi - lo, n),
    }


def converged(store) -> bool:
    """Convergence gate: maximum pixel PSRF below 1.1."""
    r = psrf(store)
    values = r.data if isinstance(r, Image) else r
    return bool(np.max(values) < PSRF_THRESHOLD)
