import numpy as np
import pytest

from mlwg_deblur.diagnostics import PSRF_UNMIXED, ChainStore, converged, ess, ness, psrf, summary_images
from mlwg_deblur.grid import Image

RNG = np.random.default_rng(5)


def _ar1(rho, n, chains=1, d=1, rng=RNG):
    e = rng.standard_normal((chains, n, d))
    x = np.empty_like(e)
    x[:, 0] = e[:, 0] / np.sqrt(1 - rho**2)
    for t in range(1, n):
        x[:, t] = rho * x[:, t - 1] + e[:, t]
    return x


def _store(samples, n=None):
    c, s, d = samples.shape
    n = n or int(round(np.sqrt(d)))
    return ChainStore(samples, 1, np.zeros((c, 1)), np.ones((c, 1)), n)


def test_psrf_constant_chains():
    x = np.full((3, 50, 4), 2.5)
    np.testing.assert_array_equal(psrf(x), 1.0)
    assert converged(_store(x))


def test_psrf_identical_chains_is_one():
    base = RNG.standard_normal(2000)
    r = psrf(np.stack([base, base, base, base]))
    # halves of one chain come from the same law
    assert abs(r[0] - 1.0) < 0.005


def test_psrf_iid_gaussian():
    assert psrf(RNG.standard_normal((2, 10000)))[0] < 1.01


def test_psrf_grows_with_separation():
    # two chains offset by delta, unit noise: split-R-hat^2 tends to 1 + delta^2 / 3
    vals = []
    for delta in (0.5, 2.0, 8.0):
        x = RNG.standard_normal((2, 20000))
        x[1] += delta
        vals.append(psrf(x)[0])
        assert vals[-1] == pytest.approx(np.sqrt(1 + delta**2 / 3), rel=0.02)
    assert vals[0] < vals[1] < vals[2]
    # constant chains at different values never mix
    assert psrf(np.stack([np.zeros(20), np.ones(20)]))[0] == PSRF_UNMIXED
    assert not converged(_store(np.stack([np.zeros((20, 1)), np.ones((20, 1))])))


def test_psrf_affine_invariance():
    x = _ar1(0.7, 400, chains=4, d=9)
    np.testing.assert_allclose(psrf(3.0 * x - 7.0), psrf(x), rtol=1e-12)


def test_psrf_requires_two_chains():
    with pytest.raises(ValueError):
        psrf(RNG.standard_normal((1, 100)))
    with pytest.raises(ValueError):
        psrf(RNG.standard_normal((2, 3)))


def test_psrf_returns_image_for_store():
    r = psrf(_store(RNG.standard_normal((2, 40, 9))))
    assert isinstance(r, Image) and r.n == 3


def test_ness_iid():
    assert abs(ness(RNG.standard_normal((1, 10000)))[0] - 100.0) < 10.0


@pytest.mark.parametrize("rho", [0.5, 0.7, 0.9])
def test_ness_ar1_closed_form(rho):
    x = _ar1(rho, 10000, chains=4)
    expected = 100.0 * (1 - rho) / (1 + rho)
    assert abs(ness(x)[0] - expected) < 2.0


def test_ness_monotone_in_correlation():
    rng = np.random.default_rng(1)
    vals = [ness(_ar1(rho, 5000, chains=2, rng=rng))[0] for rho in (0.2, 0.5, 0.8)]
    assert vals[0] > vals[1] > vals[2]


def test_ness_constant_and_alternating():
    assert ness(np.full((2, 100, 1), 4.0))[0] == 100.0
    alt = np.tile([1.0, -1.0], 500)
    e = ess(alt)
    assert 0 < e < np.inf
    assert ness(alt[None])[0] > 0


def test_ness_affine_invariance():
    x = _ar1(0.6, 2000, chains=2, d=3)
    np.testing.assert_allclose(ness(5.0 * x + 1.0), ness(x), rtol=1e-10)


def test_summary_single_state():
    x = np.tile(RNG.standard_normal(9), (2, 30, 1))
    out = summary_images(_store(x))
    np.testing.assert_array_equal(out["std"].data, 0.0)
    np.testing.assert_array_equal(out["ci_width"].data, 0.0)
    np.testing.assert_allclose(out["mean"].data, x[0, 0])


def test_summary_uniform_ci():
    out = summary_images(RNG.random((2, 5000, 3)), ci_level=0.9)
    np.testing.assert_allclose(out["ci_width"], 0.9, atol=0.02)
    np.testing.assert_allclose(out["std"], np.sqrt(1 / 12), rtol=0.05)
    with pytest.raises(ValueError):
        summary_images(RNG.random((1, 10, 1)), ci_level=1.0)


def test_summary_linear_quantiles():
    x = np.arange(11.0)[None, :, None]
    assert summary_images(x, 0.8)["ci_width"][0] == pytest.approx(8.0)


def test_pooled_mean_is_chain_average():
    x = RNG.standard_normal((3, 40, 4))
    out = summary_images(x)
    np.testing.assert_allclose(out["mean"], x.mean(axis=1).mean(axis=0), rtol=1e-13)


def test_store_validation_and_merge():
    a = ChainStore(RNG.standard_normal((1, 10, 4)), 2, [[0.5, 0.6]], [[0.1, 0.2]], 2, chain_ids=(3,))
    b = ChainStore(RNG.standard_normal((1, 10, 4)), 2, [[0.4, 0.7]], [[0.1, 0.3]], 2, chain_ids=(4,))
    m = ChainStore.merge([a, b])
    assert (m.n_chains, m.n_saved, m.d) == (2, 10, 4)
    assert m.chain_ids == (3, 4)
    np.testing.assert_array_equal(m.chain(1).samples, b.samples)
    with pytest.raises(ValueError):
        ChainStore.merge([a, ChainStore(RNG.standard_normal((1, 9, 4)), 2, [[0, 0]], [[1, 1]], 2)])
    with pytest.raises(ValueError):
        ChainStore(RNG.standard_normal((1, 10, 5)), 1, [[0]], [[1]], 2)
    with pytest.raises(ValueError):
        ChainStore(RNG.standard_normal((1, 10, 4)), 0, [[0]], [[1]], 2)
