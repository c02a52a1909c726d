import json

import numpy as np
import pytest

from mlwg_deblur import cli, fileio
from mlwg_deblur.config import ConfigError, RunConfig, apply_overrides, load_config, parse_config
from mlwg_deblur.forward import ConvOperator, gaussian_psf

BLUR = ["--psf", "gaussian", "--psf-radius", "2", "--psf-sigma", "1.5", "--m", "8"]


@pytest.fixture(scope="module")
def observed(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert cli.main(["generate", "--truth", "phantom:32", "--noise-std", "0.01", "--seed", "3",
                     "--output", str(out), *BLUR]) == 0
    return out


def _sample(data, out, *extra):
    return cli.main(["sample", "--data", str(data), "--output", str(out), *BLUR,
                     "--delta", "5", "--epsilon", "1e-2", "--n-chains", "2", "--n-saved", "6",
                     "--thin", "2", "--burn-in", "10", "--seed", "1", *extra])


# -- configuration ----------------------------------------------------------------------


def test_parse_config_values_and_comments():
    cfg = parse_config("m = 32\n# comment\nsampler = mala  # trailing\nadapt = no\nepsilon=1e-3\n", "run.cfg")
    assert (cfg.m, cfg.sampler, cfg.adapt, cfg.epsilon) == (32, "mala", False, 1e-3)
    assert cfg.where("sampler") == "run.cfg:3"
    assert cfg.where("delta") == "<defaults>"
    assert cfg.delta == 35.80 and cfg.thin == 200 and cfg.n_chains == 5 and cfg.target_accept == 0.547


@pytest.mark.parametrize("text,line,word", [
    ("m = 8\nbogus = 1\n", 2, "unknown key"),
    ("m = 8\nm = 16\n", 2, "duplicate"),
    ("m = eight\n", 1, "m"),
    ("\n\njust words\n", 3, "key = value"),
    ("adapt = maybe\n", 1, "boolean"),
])
def test_parse_config_errors_name_the_line(text, line, word):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "run.cfg")
    assert f"run.cfg:{line}:" in str(info.value)
    assert word in str(info.value)


def test_validation_points_at_the_offending_line():
    cfg = parse_config("psf_radius = 4\nm = 8\n", "run.cfg")
    with pytest.raises(ConfigError, match=r"run.cfg:2: m: .*twice the PSF radius"):
        cfg.validate()
    cfg = parse_config("epsilon = 0\n", "run.cfg")
    cfg.validate()
    with pytest.raises(ConfigError, match=r"run.cfg:1: epsilon"):
        cfg.validate(sampling=True)
    cfg = apply_overrides(RunConfig(), {"n": "20", "m": "8", "psf_radius": "1"})
    with pytest.raises(ConfigError, match="<command line>: m"):
        cfg.validate()


def test_overrides_and_digest(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("seed = 4\n")
    cfg = load_config(path)
    other = apply_overrides(cfg, {"seed": "5"})
    assert cfg.seed == 4 and other.seed == 5
    assert cfg.digest() != other.digest()
    assert apply_overrides(cfg, {"seed": "4"}).digest() == cfg.digest()
    assert RunConfig(lam=0.0, noise_std=0.01).noise_precision == pytest.approx(1e4)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


# -- exit codes -------------------------------------------------------------------------


def test_usage_errors_exit_1(capsys):
    assert cli.main(["frobnicate"]) == 1
    assert cli.main([]) == 1
    assert cli.main(["sample", "--no-such-flag", "1"]) == 1


def test_invalid_input_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("m = 8\nbogus = 1\n")
    assert cli.main(["sample", "--config", str(bad)]) == 2
    assert f"{bad}:2" in capsys.readouterr().err
    assert cli.main(["sample", "--output", str(tmp_path)]) == 2
    assert cli.main(["generate", "--truth", str(tmp_path / "none.pgm"), "--output", str(tmp_path)]) == 2
    np.save(tmp_path / "wide.npy", np.zeros((8, 12)))
    assert cli.main(["generate", "--truth", str(tmp_path / "wide.npy"), "--output", str(tmp_path),
                     "--m", "4", "--psf-radius", "1"]) == 2
    assert cli.main(["diagnose", str(tmp_path / "nothing.bin")]) == 2


def test_runtime_failure_exits_3(observed, tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("worker died")

    monkeypatch.setattr(cli, "run_mlwg_parallel", boom)
    assert _sample(observed / "data.npy", tmp_path) == 3


# -- generate ---------------------------------------------------------------------------


def test_generate_is_reproducible(observed, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["generate", "--truth", "phantom:32", "--noise-std", "0.01", "--seed", "3",
                     "--output", str(again), *BLUR]) == 0
    for name in ("data.npy", "data.pgm", "truth.npy", "provenance.json", "manifest.json"):
        assert (observed / name).read_bytes() == (again / name).read_bytes()
    prov = json.loads((observed / "provenance.json").read_text())
    assert prov["seed"] == 3 and prov["noise_std"] == 0.01 and prov["lam"] == pytest.approx(1e4)


def test_generate_without_noise_is_exact_blur(tmp_path):
    assert cli.main(["generate", "--truth", "phantom:32", "--noise-std", "0", "--output", str(tmp_path),
                     *BLUR]) == 0
    truth, y = np.load(tmp_path / "truth.npy"), np.load(tmp_path / "data.npy")
    np.testing.assert_array_equal(y, ConvOperator(gaussian_psf(2, 1.5), 32).apply(truth))


def test_generate_crops_to_n(tmp_path):
    assert cli.main(["generate", "--truth", "phantom:48", "--n", "16", "--noise-std", "0",
                     "--output", str(tmp_path), "--m", "8", "--psf-radius", "1"]) == 0
    assert np.load(tmp_path / "truth.npy").shape == (16, 16)


# -- sample and diagnose ----------------------------------------------------------------


def test_sample_outputs_and_worker_invariance(observed, tmp_path):
    a, b = tmp_path / "w1", tmp_path / "w4"
    assert _sample(observed / "data.npy", a, "--workers", "1") == 0
    assert _sample(observed / "data.npy", b, "--workers", "4") == 0
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["files"] == mb["files"]
    assert set(ma["files"]) >= {"chain_00.bin", "chain_01.bin", "blocks.csv", "mean.npy", "std.npy",
                                "ci_width.npy", "mean.pgm"}
    assert ma["seed"] == 1 and ma["config"]["workers"] == 1
    assert set(ma["versions"]) == {"package", "numpy", "scipy", "python"}
    with open(a / "blocks.csv") as fh:
        assert fh.readline().strip() == "chain,block,block_row,block_col,accept_rate,tau"
    rows = fileio.read_csv(a / "blocks.csv")
    assert len(rows) == 2 * 16
    assert all(0.0 <= float(r["accept_rate"]) <= 1.0 for r in rows)
    n, chain, samples = fileio.read_sample_dump(a / "chain_01.bin")
    assert (n, chain, samples.shape) == (32, 1, (6, 1024))


def test_diagnose_summary(observed, tmp_path):
    run = tmp_path / "run"
    assert _sample(observed / "data.npy", run) == 0
    out = tmp_path / "diag"
    dumps = [str(run / "chain_00.bin"), str(run / "chain_01.bin")]
    assert cli.main(["diagnose", *dumps, "--blocks", str(run / "blocks.csv"), "--output", str(out)]) == 0
    with open(out / "summary.csv") as fh:
        assert fh.readline().strip() == "min_ness_pct,tau_mean,accept_mean,max_psrf,median_psrf,converged"
    row = fileio.read_csv(out / "summary.csv")[0]
    blocks = fileio.read_csv(run / "blocks.csv")
    assert float(row["accept_mean"]) == pytest.approx(np.mean([float(r["accept_rate"]) for r in blocks]))
    assert np.load(out / "psrf.npy").shape == (32, 32)
    assert (out / "ness.pgm").exists()


def test_diagnose_identical_and_separated_chains(tmp_path):
    base = np.random.default_rng(0).standard_normal((400, 4))
    for k in range(2):
        fileio.write_sample_dump(tmp_path / f"same{k}.bin", base, 2, k)
    fileio.write_sample_dump(tmp_path / "zero.bin", np.zeros((10, 4)), 2, 0)
    fileio.write_sample_dump(tmp_path / "one.bin", np.ones((10, 4)), 2, 1)
    assert cli.main(["diagnose", str(tmp_path / "same0.bin"), str(tmp_path / "same1.bin"),
                     "--output", str(tmp_path / "d1")]) == 0
    row = fileio.read_csv(tmp_path / "d1" / "summary.csv")[0]
    assert round(float(row["max_psrf"]), 2) == 1.00
    assert cli.main(["diagnose", str(tmp_path / "zero.bin"), str(tmp_path / "one.bin"),
                     "--output", str(tmp_path / "d2")]) == 0
    assert fileio.read_csv(tmp_path / "d2" / "summary.csv")[0]["converged"] == "false"
    fileio.write_sample_dump(tmp_path / "short.bin", np.zeros((5, 4)), 2, 2)
    assert cli.main(["diagnose", str(tmp_path / "zero.bin"), str(tmp_path / "short.bin")]) == 2


def test_mala_on_conjugate_instance(tmp_path):
    # delta PSF, delta = 0, lam = 4: the posterior mean is y
    y = np.random.default_rng(2).random((8, 8))
    np.save(tmp_path / "y.npy", y)
    assert cli.main(["sample", "--data", str(tmp_path / "y.npy"), "--output", str(tmp_path / "o"),
                     "--sampler", "mala", "--psf", "delta", "--m", "4", "--lam", "4", "--delta", "0",
                     "--n-chains", "1", "--n-saved", "3000", "--thin", "1", "--burn-in", "500",
                     "--init", "data"]) == 0
    mean = np.load(tmp_path / "o" / "mean.npy")
    # 3000 correlated draws, sd 0.5: a generous 5 standard errors at 10% efficiency
    assert np.max(np.abs(mean - y)) < 5 * 0.5 / np.sqrt(300)


# -- dominance and map ------------------------------------------------------------------


def test_dominance_delta_psf(tmp_path, capsys):
    args = ["dominance", "--n", "16", "--m", "4", "--psf", "delta", "--lam", "1e6", "--delta", "1",
            "--epsilon", "1e-2", "--output", str(tmp_path)]
    assert cli.main(args) == 0
    report = (tmp_path / "dominance.txt").read_text()
    assert "c = 1\n" in report and "dominant: yes" in report
    # with c = 1 the hypothesis is lam/delta >= 64 m / sqrt(eps) = 2560
    assert "required >= 64 m/(c sqrt(eps)) = 2560: satisfied" in report
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "m_matrix.csv", delimiter=","), np.eye(16))
    assert cli.main(args) == 0
    assert (tmp_path / "dominance.txt").read_text() == report


def test_dominance_wide_gaussian_reports_failure(tmp_path):
    code = cli.main(["dominance", "--n", "16", "--m", "4", "--psf-radius", "1", "--psf-sigma", "2",
                     "--output", str(tmp_path)])
    assert code == 4
    assert "dominant: no" in (tmp_path / "dominance.txt").read_text()


def test_map_command(tmp_path):
    y = np.random.default_rng(4).random((8, 8))
    np.save(tmp_path / "y.npy", y)
    assert cli.main(["map", "--data", str(tmp_path / "y.npy"), "--output", str(tmp_path / "o"),
                     "--psf", "delta", "--m", "4", "--delta", "0"]) == 0
    np.testing.assert_allclose(np.load(tmp_path / "o" / "map.npy"), y, atol=1e-12)
    with open(tmp_path / "o" / "map_trace.csv") as fh:
        assert fh.readline().strip() == "iteration,objective"
    assert cli.main(["map", "--data", str(tmp_path / "y.npy"), "--output", str(tmp_path / "p"),
                     "--psf", "delta", "--m", "4", "--delta", "1", "--epsilon", "0"]) == 2


# -- file formats -----------------------------------------------------------------------


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(1).random((5, 7))
    fileio.write_pgm(tmp_path / "a.pgm", img)
    back = fileio.read_image(tmp_path / "a.pgm")
    np.testing.assert_allclose(back, img, atol=0.5 / 255 + 1e-12)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
    fileio.write_pgm(tmp_path / "b.pgm", np.array([[-1.0, 2.0]]))
    np.testing.assert_array_equal(fileio.read_image(tmp_path / "b.pgm"), [[0.0, 1.0]])


def test_pgm_16_bit_and_comments(tmp_path):
    raster = np.array([[0, 1000], [65535, 7]], dtype=">u2")
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 2\n65535\n" + raster.tobytes())
    np.testing.assert_allclose(fileio.read_image(tmp_path / "c.pgm"), raster / 65535.0)
    (tmp_path / "d.pgm").write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
    with pytest.raises(ValueError):
        fileio.read_image(tmp_path / "d.pgm")


def test_sample_dump_round_trip(tmp_path):
    s = np.random.default_rng(3).standard_normal((4, 9))
    fileio.write_sample_dump(tmp_path / "c.bin", s, 3, 7)
    raw = (tmp_path / "c.bin").read_bytes()
    assert len(raw) == 32 + 8 * s.size and raw[:8] == b"MLWGSMP1"
    n, chain, back = fileio.read_sample_dump(tmp_path / "c.bin")
    assert (n, chain) == (3, 7)
    np.testing.assert_array_equal(back, s)
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        fileio.read_sample_dump(tmp_path / "t.bin")
    with pytest.raises(ValueError):
        fileio.write_sample_dump(tmp_path / "x.bin", s, 2, 0)
