"""Command-line interface: ``mlwg-deblur {generate,sample,diagnose,dominance,map}``.

Exit codes: 0 ok, 1 usage, 2 invalid configuration or input, 3 runtime
failure, 4 non-dominant blur (``dominance`` only).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .diagnostics import PSRF_THRESHOLD, PSRF_UNMIXED, ChainStore, ness, psrf, summary_images
from .forward import ConvOperator, box_psf, delta_psf, dominance_check, gaussian_psf, generate_data, motion_psf
from .grid import make_partition
from .map_solver import solve_map
from .phantom import phantom
from .potentials import PosteriorSpec
from .samplers import run_mala, run_mlwg_parallel, run_mlwg_sequential, StepSizeState

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME, EXIT_NOT_DOMINANT = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    group = p.add_argument_group("configuration overrides")
    for key, value in RunConfig().as_dict().items():
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar=type(value).__name__.upper(),
                           default=None, help=f"default {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlwg-deblur", description="TV-regularized deblurring with blocked MALA samplers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [
        ("generate", "blur and add noise to a ground-truth image"),
        ("sample", "run the configured sampler and write chains and summaries"),
        ("dominance", "audit c-diagonal block dominance of the blur"),
        ("map", "compute the MAP estimate"),
    ]:
        _add_config_flags(sub.add_parser(name, help=text))
    diag = sub.add_parser("diagnose", help="PSRF, nESS and a summary table from sample dumps")
    diag.add_argument("dumps", nargs="+", help="sample dump files (one per chain)")
    diag.add_argument("--blocks", help="blocks.csv with per-block acceptance and step sizes")
    diag.add_argument("--output", default="diagnostics", help="output directory")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return apply_overrides(cfg, overrides)


# -- shared setup -----------------------------------------------------------------------


def _psf(cfg: RunConfig):
    if cfg.psf == "gaussian":
        return gaussian_psf(cfg.psf_radius, cfg.psf_sigma)
    if cfg.psf == "motion":
        return motion_psf(cfg.motion_length, cfg.motion_angle)
    if cfg.psf == "box":
        return box_psf(cfg.psf_radius)
    return delta_psf()


def _crop(cfg: RunConfig, img: np.ndarray, key: str) -> np.ndarray:
    h, w = img.shape
    n = cfg.n or min(h, w)
    if n > h or n > w:
        cfg.fail(key, f"image is {h}x{w}, smaller than n={n}")
    if not cfg.n and h != w:
        cfg.fail(key, f"image is {h}x{w}, not square; set n to crop it")
    r0, c0 = ((h - n) // 2, (w - n) // 2) if cfg.crop == "center" else (0, 0)
    return img[r0:r0 + n, c0:c0 + n].copy()


def _load(cfg: RunConfig, key: str) -> np.ndarray:
    ref = getattr(cfg, key)
    if not ref:
        cfg.fail(key, "no image given")
    try:
        if ref.startswith("phantom:"):
            img = phantom(int(ref.split(":", 1)[1]))
        else:
            img = fileio.read_image(ref)
    except (OSError, ValueError) as exc:
        cfg.fail(key, f"cannot read {ref}: {exc}")
    return _crop(cfg, img, key)


def _posterior(cfg: RunConfig, y: np.ndarray, sampling: bool) -> PosteriorSpec:
    n = y.shape[0]
    if n % cfg.m:
        cfg.fail("m", f"block side {cfg.m} does not divide image side {n}")
    cfg.validate(sampling=sampling)
    lam = cfg.noise_precision
    if not math.isfinite(lam):
        cfg.fail("noise_std", "needs noise_std > 0 or an explicit lam")
    return PosteriorSpec(lam, cfg.delta, cfg.epsilon, y, ConvOperator(_psf(cfg), n))


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(out: Path, name: str, img: np.ndarray, files: list) -> None:
    for suffix in (".npy", ".pgm"):
        path = out / f"{name}{suffix}"
        fileio.write_image(path, img)
        files.append(path)


# -- commands -----------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> int:
    cfg.validate()
    truth = _load(cfg, "truth")
    n = truth.shape[0]
    op = ConvOperator(_psf(cfg), n)
    y, lam = generate_data(op, truth, cfg.noise_std, cfg.seed)
    out = _outdir(cfg)
    files = []
    _emit(out, "truth", truth, files)
    _emit(out, "data", y, files)
    provenance = {"n": n, "seed": cfg.seed, "psf": cfg.psf, "psf_radius": op.radius,
                  "psf_sigma": cfg.psf_sigma if cfg.psf == "gaussian" else None,
                  "motion_length": cfg.motion_length if cfg.psf == "motion" else None,
                  "motion_angle": cfg.motion_angle if cfg.psf == "motion" else None,
                  "noise_std": cfg.noise_std, "lam": lam if math.isfinite(lam) else None}
    prov = out / "provenance.json"
    prov.write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files.append(prov)
    fileio.write_manifest(out, "generate", cfg.as_dict(with_output=False), cfg.digest(), cfg.seed, files)
    print(f"wrote {n}x{n} observation to {out / 'data.npy'}")
    return EXIT_OK


def _run_one_chain(cfg: RunConfig, spec: PosteriorSpec, chain: int) -> ChainStore:
    n = spec.n
    if cfg.init == "data":
        init = np.array(spec.y)
    else:
        init = np.random.default_rng([cfg.seed, chain, 1 << 20]).random((n, n))
    tau = cfg.tau or None
    common = dict(n_cycles=cfg.n_saved * cfg.thin, burn_in=cfg.burn_in, thin=cfg.thin,
                  seed=cfg.seed, chain=chain, adapt=cfg.adapt)
    if cfg.sampler == "mala":
        step = StepSizeState(tau, cfg.target_accept) if tau else None
        return run_mala(spec, init, step_state=step, **common)
    partition = make_partition(n, cfg.m, spec.conv.radius)
    if cfg.sampler == "mlwg":
        return run_mlwg_sequential(spec, partition, init, tau=tau, target_accept=cfg.target_accept, **common)
    return run_mlwg_parallel(spec, partition, init, workers=cfg.workers, tau=tau,
                             target_accept=cfg.target_accept, **common)


def _block_rows(store: ChainStore, n: int, m: int):
    nb = n // m if store.accept_rate.shape[1] > 1 else 1
    for c in range(store.n_chains):
        for i in range(store.accept_rate.shape[1]):
            yield (store.chain_ids[c], i, i % nb, i // nb, store.accept_rate[c, i], store.tau[c, i])


def cmd_sample(cfg: RunConfig) -> int:
    y = _load(cfg, "data")
    spec = _posterior(cfg, y, sampling=True)
    out = _outdir(cfg)
    files = []
    stores = []
    for c in range(cfg.n_chains):
        store = _run_one_chain(cfg, spec, c)
        path = out / f"chain_{c:02d}.bin"
        fileio.write_sample_dump(path, store.samples[0], spec.n, c)
        files.append(path)
        stores.append(store)
    merged = ChainStore.merge(stores)
    if merged.n_saved:
        for name, img in summary_images(merged, cfg.ci_level).items():
            _emit(out, name, img.to_array(), files)
    blocks = out / "blocks.csv"
    fileio.write_csv(blocks, fileio.BLOCK_COLUMNS, _block_rows(merged, spec.n, cfg.m))
    files.append(blocks)
    fileio.write_manifest(out, "sample", cfg.as_dict(with_output=False), cfg.digest(), cfg.seed, files)
    acc = float(np.mean(merged.accept_rate))
    print(f"{cfg.sampler}: {cfg.n_chains} chains x {merged.n_saved} saved, mean acceptance {acc:.3f}, "
          f"mean tau {float(np.mean(merged.tau)):.4g}")
    if cfg.adapt and abs(acc - cfg.target_accept) > 0.05:
        print(f"warning: mean acceptance {acc:.3f} is far from the target {cfg.target_accept}; "
              "the step-size adaptation may not have converged (longer burn_in helps)", file=sys.stderr)
    return EXIT_OK


def _load_dumps(paths, blocks_csv):
    chains = []
    for p in paths:
        try:
            chains.append(fileio.read_sample_dump(p))
        except OSError as exc:
            raise ConfigError(f"{p}: {exc.strerror}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    n, _, first = chains[0]
    for path, (n_k, _, s) in zip(paths, chains):
        if n_k != n or s.shape != first.shape:
            raise ConfigError(f"{path}: incompatible dump ({n_k}x{n_k}, {s.shape[0]} saved) "
                              f"versus {paths[0]} ({n}x{n}, {first.shape[0]} saved)")
    ids = [c for _, c, _ in chains]
    acc = np.full((len(chains), 1), np.nan)
    tau = np.full((len(chains), 1), np.nan)
    if blocks_csv:
        rows = fileio.read_csv(blocks_csv)
        per_chain = {}
        for row in rows:
            per_chain.setdefault(int(row["chain"]), []).append((float(row["accept_rate"]), float(row["tau"])))
        if all(c in per_chain for c in ids):
            width = len(per_chain[ids[0]])
            acc = np.array([[a for a, _ in per_chain[c]] for c in ids]).reshape(len(ids), width)
            tau = np.array([[t for _, t in per_chain[c]] for c in ids]).reshape(len(ids), width)
    return ChainStore(np.stack([s for _, _, s in chains]), 1, acc, tau, n, chain_ids=tuple(ids))


def _median(a: np.ndarray) -> float:
    # halves before adding, so two PSRF_UNMIXED entries do not overflow
    s = np.sort(a, axis=None)
    k = s.size // 2
    return float(s[k]) if s.size % 2 else float(s[k - 1] / 2 + s[k] / 2)


def cmd_diagnose(args) -> int:
    store = _load_dumps(args.dumps, args.blocks)
    if store.n_chains < 2 or store.n_saved < 4:
        raise ConfigError(f"PSRF needs >= 2 chains with >= 4 samples, got {store.n_chains} x {store.n_saved}")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    r = psrf(store).to_array()
    e = ness(store).to_array()
    np.save(out / "psrf.npy", r)
    np.save(out / "ness.npy", e)
    finite = r < PSRF_UNMIXED
    span = lambda a: (a - a.min()) / (np.ptp(a) or 1.0)
    fileio.write_pgm(out / "psrf.pgm", span(np.where(finite, r, r[finite].max() if finite.any() else 1.0)))
    fileio.write_pgm(out / "ness.pgm", span(e))
    max_r = float(np.max(r))
    row = (float(e.min()), float(np.nanmean(store.tau)) if np.isfinite(store.tau).any() else float("nan"),
           float(np.nanmean(store.accept_rate)) if np.isfinite(store.accept_rate).any() else float("nan"),
           max_r, _median(r), max_r < PSRF_THRESHOLD)
    fileio.write_csv(out / "summary.csv", fileio.SUMMARY_COLUMNS, [row])
    print(f"min nESS {row[0]:.2f}%  max PSRF {max_r:.3f}  median PSRF {row[4]:.3f}  "
          f"{'converged' if row[5] else 'NOT converged'}")
    return EXIT_OK


def cmd_dominance(cfg: RunConfig) -> int:
    cfg.validate()
    n = cfg.n
    if not n:
        if cfg.data or cfg.truth:
            n = _load(cfg, "data" if cfg.data else "truth").shape[0]
        else:
            cfg.fail("n", "set n (or give an image) for the dominance audit")
    if n % cfg.m:
        cfg.fail("m", f"block side {cfg.m} does not divide image side {n}")
    op = ConvOperator(_psf(cfg), n)
    cert = dominance_check(op, make_partition(n, cfg.m, op.radius))
    M = cert.m_matrix
    off = M.sum(axis=1) - np.diag(M)
    lines = [
        f"blocks: {M.shape[0]} ({n}x{n} image, {cfg.m}x{cfg.m} blocks, PSF radius {op.radius})",
        f"M diagonal: min {np.diag(M).min():.6g}, max {np.diag(M).max():.6g}",
        f"M off-diagonal row sums: max {off.max():.6g}",
        f"c = {cert.c:.6g}",
        f"dominant: {'yes' if cert.dominant else 'no'}",
    ]
    lam = cfg.noise_precision
    if cert.dominant and cfg.delta > 0 and cfg.epsilon > 0:
        need = 64 * cfg.m / (cert.c * math.sqrt(cfg.epsilon))
        ok = lam / cfg.delta >= need
        lines.append(f"lambda/delta = {lam / cfg.delta:.6g}, required >= 64 m/(c sqrt(eps)) = {need:.6g}: "
                     f"{'satisfied' if ok else 'not satisfied'}")
    report = "\n".join(lines) + "\n"
    out = _outdir(cfg)
    (out / "dominance.txt").write_text(report, encoding="utf-8")
    np.savetxt(out / "m_matrix.csv", M, delimiter=",", fmt="%.17g")
    sys.stdout.write(report)
    return EXIT_OK if cert.dominant else EXIT_NOT_DOMINANT


def cmd_map(cfg: RunConfig) -> int:
    y = _load(cfg, "data")
    spec = _posterior(cfg, y, sampling=False)
    if spec.delta > 0 and not spec.epsilon > 0:
        cfg.fail("epsilon", "MAP estimation needs epsilon > 0")
    res = solve_map(spec, tol=cfg.map_tol, max_outer=cfg.map_max_outer, max_cg=cfg.map_max_cg)
    out = _outdir(cfg)
    files = []
    _emit(out, "map", res.x_map.to_array(), files)
    trace = out / "map_trace.csv"
    fileio.write_csv(trace, fileio.TRACE_COLUMNS, enumerate(res.objective))
    files.append(trace)
    fileio.write_manifest(out, "map", cfg.as_dict(with_output=False), cfg.digest(), cfg.seed, files)
    print(f"MAP after {res.iterations} outer iterations, objective {res.objective[-1]:.10g}"
          f"{'' if res.converged else ' (not converged)'}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "sample": cmd_sample, "dominance": cmd_dominance, "map": cmd_map}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        if args.command == "diagnose":
            return cmd_diagnose(args)
        return COMMANDS[args.command](_config(args))
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
