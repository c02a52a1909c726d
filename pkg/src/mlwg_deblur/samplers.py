"""MALA, MALA-within-Gibbs and the local & parallel MLwG sampler.

Randomness: every block owns a Philox stream keyed by ``(seed, chain,
block)``.  Each block update draws, in order, ``m*m`` standard normals and
one uniform, whether or not the proposal is accepted.  A stream's position
is therefore fixed by the cycle number, so chains are bit-identical for any
worker count or scheduling order.  Global MALA treats the whole image as
block 0 and uses that block's stream.

Step sizes adapt during burn-in only, per block, with the Robbins-Monro rule

    log tau <- log tau + k**-0.6 * (accepted - target)

where ``accepted`` is the 0/1 outcome of the k-th update of that block.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .diagnostics import ChainStore
from .grid import BlockPartition, Image
from .local import LocalProblem, local_logdensity_and_grad
from .potentials import PosteriorSpec, grad_log_posterior, log_posterior_unnorm

__all__ = [
    "TARGET_ACCEPT",
    "StepSizeState",
    "ColorSchedule",
    "ChainAborted",
    "adapt_step",
    "default_step_size",
    "block_stream",
    "make_color_schedule",
    "mala_propose",
    "mh_log_ratio",
    "mh_accept",
    "MALAChain",
    "MLwGChain",
    "run_mala",
    "run_mlwg_sequential",
    "run_mlwg_parallel",
]

TARGET_ACCEPT = 0.547
ADAPT_EXPONENT = 0.6


class ChainAborted(RuntimeError):
    """A block update failed; ``state`` holds the chain state at the start of the sweep."""

    def __init__(self, message, state=None, cycle=None):
        super().__init__(message)
        self.state = state
        self.cycle = cycle


@dataclass(frozen=True)
class StepSizeState:
    tau: float
    target_accept: float = TARGET_ACCEPT
    iteration: int = 0
    adapting: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"step size must be positive, got {self.tau}")
        if not 0 < self.target_accept < 1:
            raise ValueError(f"target acceptance must lie in (0, 1), got {self.target_accept}")

    def frozen(self) -> "StepSizeState":
        return replace(self, adapting=False)


def adapt_step(state: StepSizeState, observed_alpha: float) -> StepSizeState:
    """One diminishing Robbins-Monro update of ``log tau``."""
    if not state.adapting:
        raise ValueError("step size is frozen")
    k = state.iteration + 1
    gain = k ** (-ADAPT_EXPONENT)
    tau = state.tau * math.exp(gain * (observed_alpha - state.target_accept))
    return replace(state, tau=tau, iteration=k)


def default_step_size(spec: PosteriorSpec) -> float:
    """``1 / L`` for a crude Lipschitz bound ``L`` of the log-density gradient."""
    mass = float(np.abs(spec.conv.psf.weights).sum())
    lip = spec.lam * mass**2
    if spec.delta > 0:
        lip += 8.0 * spec.delta / math.sqrt(spec.epsilon)
    return 1.0 / lip


@dataclass(frozen=True)
class ColorSchedule:
    """Four disjoint update sets; blocks of one set never neighbor each other."""

    classes: tuple


def make_color_schedule(partition: BlockPartition) -> ColorSchedule:
    """Color block ``(br, bc)`` by ``(br mod 2, bc mod 2)``; ids ascend within a class."""
    ids = np.arange(partition.b)
    nb = partition.blocks_per_side
    color = (ids % nb) % 2 + 2 * ((ids // nb) % 2)
    classes = tuple(ids[color == c] for c in range(4))
    for cls in classes:
        cls.setflags(write=False)
    return ColorSchedule(classes)


def block_stream(seed: int, chain: int, block: int) -> np.random.Generator:
    """Counter-based stream for one block of one chain."""
    key = np.random.SeedSequence([int(seed), int(chain), int(block)]).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# -- MALA kernel ---------------------------------------------------------------------


def mala_propose(logdens_grad_fn, x_cur, tau: float, rng: np.random.Generator):
    """``z = x + tau * grad log pi(x) + sqrt(2 tau) * xi``."""
    if not tau > 0:
        raise ValueError(f"step size must be positive, got {tau}")
    _, g = logdens_grad_fn(x_cur)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient at the current state")
    xi = rng.standard_normal(np.shape(x_cur))
    return x_cur + tau * g + math.sqrt(2.0 * tau) * xi


def _sqnorm(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.ndim <= 2:
        return np.sum(a * a)
    return (a * a).reshape(a.shape[0], -1).sum(axis=1)


def mh_log_ratio(f_x, g_x, f_z, g_z, x, z, tau):
    """Log Metropolis-Hastings ratio for a MALA move ``x -> z``.

    Works elementwise over a leading batch axis when ``x`` is 3-D.
    """
    tau = np.asarray(tau, dtype=float)
    # a per-block tau of shape (k, 1, 1) scales the batched norms as (k,)
    scale = 4.0 * (tau.reshape(-1) if tau.ndim == 3 else tau)
    log_q_zx = -_sqnorm(z - x - tau * g_x) / scale
    log_q_xz = -_sqnorm(x - z - tau * g_z) / scale
    return (f_z - f_x) + (log_q_xz - log_q_zx)


def mh_accept(logdens_fn, grad_fn, x_cur, z, tau: float, rng: np.random.Generator):
    """Accept or reject ``z``; returns ``(accepted, alpha)``."""
    f_z = logdens_fn(z)
    if not np.isfinite(f_z):
        rng.random()
        return False, 0.0
    log_ratio = mh_log_ratio(logdens_fn(x_cur), grad_fn(x_cur), f_z, grad_fn(z), x_cur, z, tau)
    alpha = 1.0 if log_ratio >= 0 else math.exp(log_ratio)
    return bool(math.log(rng.random()) < log_ratio), alpha


# -- chains ----------------------------------------------------------------------------


def _init_array(init, n: int) -> np.ndarray:
    x = init.to_array() if isinstance(init, Image) else np.array(init, dtype=float)
    if x.shape != (n, n):
        raise ValueError(f"initial state has shape {x.shape}, expected {(n, n)}")
    return x


class MALAChain:
    """Global MALA on the whole image."""

    name = "mala"

    def __init__(self, spec: PosteriorSpec, init, seed: int = 0, chain: int = 0,
                 tau: float | None = None, target_accept: float = TARGET_ACCEPT):
        if spec.delta > 0 and spec.epsilon <= 0:
            raise ValueError("sampling needs epsilon > 0")
        self.spec = spec
        self.x = _init_array(init, spec.n)
        self.stream = block_stream(seed, chain, 0)
        self.steps = [StepSizeState(tau or default_step_size(spec), target_accept)]
        self.cycle = 0
        self._f = log_posterior_unnorm(spec, self.x)
        self._g = grad_log_posterior(spec, self.x)

    @property
    def n_blocks(self) -> int:
        return 1

    def step(self, adapt: bool) -> np.ndarray:
        spec, x = self.spec, self.x
        tau = self.steps[0].tau
        xi = self.stream.standard_normal(x.shape)
        log_u = math.log(self.stream.random())
        f_x, g_x = self._f, self._g
        if not np.all(np.isfinite(g_x)):
            raise ChainAborted("non-finite gradient", self.x.copy(), self.cycle)
        z = x + tau * g_x + math.sqrt(2.0 * tau) * xi
        f_z = log_posterior_unnorm(spec, z)
        accepted = False
        if np.isfinite(f_z):
            g_z = grad_log_posterior(spec, z)
            accepted = bool(log_u < mh_log_ratio(f_x, g_x, f_z, g_z, x, z, tau))
        if accepted:
            self.x, self._f, self._g = z, f_z, g_z
        if adapt:
            self.steps[0] = adapt_step(self.steps[0], float(accepted))
        self.cycle += 1
        return np.array([accepted])


class MLwGChain:
    """Blocked MALA-within-Gibbs with local conditionals.

    ``parallel=False`` sweeps blocks in ascending id order.  ``parallel=True``
    sweeps the four color classes in order; blocks of one class are updated
    from the same frozen state, split over ``workers`` threads.
    """

    def __init__(self, spec: PosteriorSpec, partition: BlockPartition, init, seed: int = 0,
                 chain: int = 0, tau=None, target_accept: float = TARGET_ACCEPT,
                 parallel: bool = True, workers: int = 1):
        if spec.epsilon <= 0 and spec.delta > 0:
            raise ValueError("sampling needs epsilon > 0")
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.spec, self.partition = spec, partition
        self.name = "mlwg-parallel" if parallel else "mlwg"
        self.problem = LocalProblem(spec, partition)
        self.xp = self.problem.padded(_init_array(init, spec.n))
        b = partition.b
        tau = default_step_size(spec) if tau is None else tau
        taus = np.broadcast_to(np.asarray(tau, dtype=float), (b,))
        self.steps = [StepSizeState(float(t), target_accept) for t in taus]
        self.streams = [block_stream(seed, chain, i) for i in range(b)]
        self.cycle = 0
        self.workers = workers
        if parallel:
            self.groups = [c for c in make_color_schedule(partition).classes if c.size]
        else:
            self.groups = [np.array([i]) for i in range(b)]
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None

    @property
    def n_blocks(self) -> int:
        return self.partition.b

    @property
    def x(self) -> np.ndarray:
        P, n = self.problem.pad, self.partition.n
        return self.xp[P:P + n, P:P + n].copy()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _update(self, ids: np.ndarray):
        """MALA step for a set of mutually independent blocks; returns new cores and flags."""
        m = self.partition.m
        spec, problem = self.spec, self.problem
        tau = np.array([self.steps[i].tau for i in ids])
        xi = np.empty((ids.size, m, m))
        log_u = np.empty(ids.size)
        for k, i in enumerate(ids):
            xi[k] = self.streams[i].standard_normal((m, m))
            log_u[k] = math.log(self.streams[i].random())
        like, prior = problem.contexts(self.xp, ids)
        xb = problem.cores(self.xp, ids)
        f_x, g_x = local_logdensity_and_grad(like, prior, xb, spec)
        if not np.all(np.isfinite(g_x)):
            bad = ids[~np.isfinite(g_x).reshape(ids.size, -1).all(axis=1)]
            raise FloatingPointError(f"non-finite gradient in blocks {bad.tolist()}")
        t3 = tau[:, None, None]
        z = xb + t3 * g_x + np.sqrt(2.0 * t3) * xi
        f_z, g_z = local_logdensity_and_grad(like, prior, z, spec)
        log_ratio = mh_log_ratio(f_x, g_x, f_z, g_z, xb, z, t3)
        ok = np.isfinite(f_z) & np.isfinite(log_ratio)
        accepted = ok & (log_u < np.where(ok, log_ratio, -np.inf))
        return np.where(accepted[:, None, None], z, xb), accepted

    def _update_group(self, ids: np.ndarray):
        if self._pool is None or ids.size == 1:
            return self._update(ids)
        chunks = [c for c in np.array_split(ids, min(self.workers, ids.size)) if c.size]
        results = list(self._pool.map(self._update, chunks))
        return (np.concatenate([r[0] for r in results]), np.concatenate([r[1] for r in results]))

    def step(self, adapt: bool) -> np.ndarray:
        """One cycle over all blocks; returns the per-block acceptance flags."""
        flags = np.zeros(self.partition.b, dtype=bool)
        snapshot = None
        for ids in self.groups:
            try:
                cores, accepted = self._update_group(ids)
            except Exception as exc:
                snapshot = self.x
                raise ChainAborted(f"block update failed in cycle {self.cycle}: {exc}",
                                   snapshot, self.cycle) from exc
            for k, i in enumerate(ids):
                if accepted[k]:
                    rs, cs = self.problem.core_slices(i)
                    self.xp[rs, cs] = cores[k]
                if adapt:
                    self.steps[i] = adapt_step(self.steps[i], float(accepted[k]))
            flags[ids] = accepted
        self.cycle += 1
        return flags


def run_chain(chain, n_cycles: int, burn_in: int, thin: int, adapt: bool = True,
              chain_id: int = 0) -> ChainStore:
    """Burn in (adapting step sizes if ``adapt``), then keep every ``thin``-th state."""
    if thin < 1 or n_cycles < 0 or burn_in < 0:
        raise ValueError("need thin >= 1 and non-negative cycle counts")
    for _ in range(burn_in):
        chain.step(adapt)
    for i, s in enumerate(chain.steps):
        chain.steps[i] = s.frozen()
    n_saved = n_cycles // thin
    n = chain.spec.n
    samples = np.empty((n_saved, n * n))
    accepts = np.zeros(chain.n_blocks)
    saved = 0
    for t in range(1, n_cycles + 1):
        accepts += chain.step(False)
        if t % thin == 0:
            samples[saved] = chain.x.ravel(order="F")
            saved += 1
    if hasattr(chain, "close"):
        chain.close()
    rate = accepts / n_cycles if n_cycles else np.full(chain.n_blocks, np.nan)
    return ChainStore(
        samples=samples[None],
        thin=thin,
        accept_rate=rate[None],
        tau=np.array([[s.tau for s in chain.steps]]),
        n=n,
        burn_in=burn_in,
        sampler=chain.name,
        chain_ids=(chain_id,),
    )


def run_mala(spec: PosteriorSpec, init, n_cycles: int, burn_in: int, thin: int,
             step_state: StepSizeState | None = None, seed: int = 0, chain: int = 0,
             adapt: bool = True) -> ChainStore:
    """Global MALA; one chain.  ``step_state`` supplies the initial step and target."""
    tau = step_state.tau if step_state else None
    target = step_state.target_accept if step_state else TARGET_ACCEPT
    sampler = MALAChain(spec, init, seed=seed, chain=chain, tau=tau, target_accept=target)
    return run_chain(sampler, n_cycles, burn_in, thin, adapt=adapt, chain_id=chain)


def run_mlwg_sequential(spec: PosteriorSpec, partition: BlockPartition, init, n_cycles: int,
                        burn_in: int, thin: int, seed: int = 0, chain: int = 0, tau=None,
                        target_accept: float = TARGET_ACCEPT, adapt: bool = True) -> ChainStore:
    """Blocked MLwG sweeping blocks in ascending id order; one chain."""
    sampler = MLwGChain(spec, partition, init, seed=seed, chain=chain, tau=tau,
                        target_accept=target_accept, parallel=False)
    return run_chain(sampler, n_cycles, burn_in, thin, adapt=adapt, chain_id=chain)


def run_mlwg_parallel(spec: PosteriorSpec, partition: BlockPartition, init, n_cycles: int,
                      burn_in: int, thin: int, workers: int = 1, seed: int = 0, chain: int = 0,
                      tau=None, target_accept: float = TARGET_ACCEPT,
                      adapt: bool = True) -> ChainStore:
    """Local & parallel MLwG over the four color classes; one chain."""
    sampler = MLwGChain(spec, partition, init, seed=seed, chain=chain, tau=tau,
                        target_accept=target_accept, parallel=True, workers=workers)
    return run_chain(sampler, n_cycles, burn_in, thin, adapt=adapt, chain_id=chain)
