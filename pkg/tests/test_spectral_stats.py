import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from freedbm.matrix_models import EnsembleConfig, assemble_tildeH, eigh, gaussian_hermitian, sample_haar, sample_initial
from freedbm.measures import Measure, semicircle
from freedbm.spectral_stats import (StatisticsReport, correlation_estimate, default_window, ks_distance,
                                    local_law_report, middle_indices, min_gap_statistics, reference_spacing_cdf,
                                    rigidity_report, sine_kernel_correlation, surmise_pdf, svg_plot, unfold_gaps,
                                    write_columns_csv, write_report)
from freedbm.subordination import solve_pointwise
from freedbm.unitary_diffusion import build_weights

SC = semicircle()


def gue_spectra(N, trials, seed):
    rng = np.random.default_rng(seed)
    return [np.linalg.eigvalsh(gaussian_hermitian(N, 2, rng, 1.0 / N)) for _ in range(trials)]


def test_unfolding_examples():
    N, rho = 100, 0.3
    lam = np.arange(N) / (N * rho) - 1.5
    s = unfold_gaps([lam], rho, 0.0)
    assert s.size == default_window(N) - 1
    assert np.allclose(s, 1.0, rtol=0, atol=1e-12)
    assert np.array_equal(unfold_gaps([lam], 2 * rho, 0.0), 2 * s)
    with pytest.raises(ValueError):
        unfold_gaps([lam], 0.0, 0.0)


def test_gue_unfolded_mean():
    s = unfold_gaps(gue_spectra(400, 100, 1), 1 / np.pi, 0.0)
    assert 0.95 <= s.mean() <= 1.05


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(-4, 4))
def test_unfolding_scale_equivariance(seed, k):
    lam = np.sort(np.random.default_rng(seed).normal(size=60))
    c = 2.0**k
    base = unfold_gaps([lam], 0.4, 0.1)
    assert np.array_equal(unfold_gaps([c * lam], 0.4 / c, 0.1 * c), base)
    c = 1.7
    assert np.allclose(unfold_gaps([c * lam], 0.4 / c, 0.1 * c), base, rtol=1e-12)


@pytest.mark.parametrize("beta", [1, 2])
def test_surmise_examples(beta):
    assert reference_spacing_cdf(beta, 50.0) == pytest.approx(1.0, abs=1e-15)
    assert surmise_pdf(beta, 0.0) == 0.0
    mass, _ = integrate.quad(lambda s: surmise_pdf(beta, s), 0, np.inf, epsabs=1e-13)
    mean, _ = integrate.quad(lambda s: s * surmise_pdf(beta, s), 0, np.inf, epsabs=1e-13)
    assert mass == pytest.approx(1.0, abs=1e-10) and mean == pytest.approx(1.0, abs=1e-10)
    s = np.linspace(0, 3, 301)
    num = np.array([integrate.quad(lambda u: surmise_pdf(beta, u), 0, v)[0] for v in s])
    assert np.allclose(reference_spacing_cdf(beta, s), num, atol=1e-12)


def test_ks_examples():
    n = 200
    q = (np.arange(1, n + 1) - 0.5) / n
    assert ks_distance(q, stats.uniform.cdf) <= 1 / n
    u = np.random.default_rng(2).uniform(size=10_000)
    assert ks_distance(u, stats.uniform.cdf) <= 0.02
    assert ks_distance(np.full(50, 0.5), stats.uniform.cdf) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        ks_distance([], stats.uniform.cdf)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_ks_metric_on_samples(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(rng.uniform(-1, 1), 1, rng.integers(5, 60)) for _ in range(3))
    assert ks_distance(a, b) == pytest.approx(ks_distance(b, a), abs=1e-15)
    assert ks_distance(a, c) <= ks_distance(a, b) + ks_distance(b, c) + 1e-12
    assert ks_distance(a, a) == 0


def test_correlation_examples():
    rng = np.random.default_rng(3)
    N = 200
    batches = [rng.uniform(-1, 1, N) for _ in range(1000)]  # about 10 levels per window
    c = correlation_estimate(batches, 0.0, 0.5)
    assert c.sufficient and np.all(np.abs(c.values - 1) <= 0.1)

    N, rho = 50, 0.5
    fence = np.arange(N) / (N * rho) - 2.0 + 1e-9
    c = correlation_estimate([fence], 0.0, rho, bin_width=0.25)
    on = np.isclose(np.abs(c.centers - np.round(c.centers)), 0.125)
    hits = c.values > 0
    assert np.all(np.abs(c.centers[hits] - np.round(c.centers[hits])) <= 0.125 + 1e-12)
    assert hits.sum() >= 8 and on.sum() > 0


def test_gue_pair_correlation_matches_sine_kernel():
    c = correlation_estimate(gue_spectra(400, 200, 4), 0.0, 1 / np.pi)
    assert np.max(np.abs(c.values - sine_kernel_correlation(c.centers))) <= 0.15
    assert c.values[np.argmin(np.abs(c.centers))] < 0.1


def _local_law(cfg, rng, grid, V=None):
    X, V0, y = sample_initial(cfg, rng)
    V = V0 if V is None else V0 @ V
    wt = build_weights(y, cfg.a)
    ybar = y + cfg.T * wt.hatY
    es = eigh(assemble_tildeH(X, y, V, np.eye(cfg.N), 0.0, cfg.T, wt.hatY))
    mx, my = Measure.atoms(cfg.x()), Measure.atoms(ybar)

    def w1(z):
        s = solve_pointwise(mx, my, z)
        return s.w1 if s.converged else None

    return local_law_report(es, ybar, w1, grid)


def test_local_law_zero_X_is_exact():
    cfg = EnsembleConfig(80, x_spec=None, y_spec=SC, epsilon_reg=0.0)
    rows = _local_law(cfg, np.random.default_rng(5), [(0.0, 1.0), (0.3, 0.1), (-1.0, 0.01)])
    assert all(r.valid for r in rows)
    assert max(r.sup_error for r in rows) <= 1e-8


def test_local_law_error_decreases_in_eta():
    cfg = EnsembleConfig(200, x_spec=SC, y_spec=SC)
    grid = [(0.0, 1.0), (0.0, 0.3), (0.0, 0.1)]
    errs = np.array([[r.sup_error for r in _local_law(cfg, np.random.default_rng(k), grid)] for k in range(10)])
    med = np.median(errs, axis=0)
    assert med[0] < med[1] < med[2]


def test_local_law_invalid_point_is_flagged():
    es = eigh(np.diag([0.0, 1.0]))
    rows = local_law_report(es, np.zeros(2), lambda z: None, [(0.0, 1.0)])
    assert not rows[0].valid and np.isnan(rows[0].sup_error)


def test_local_law_invariant_under_rotation_of_V():
    cfg = EnsembleConfig(100, x_spec=SC, y_spec=SC)
    W = sample_haar(100, 2, np.random.default_rng(99))
    z = [(0.2, 0.1)]
    a = [_local_law(cfg, np.random.default_rng(k), z)[0].sup_error for k in range(30)]
    b = [_local_law(cfg, np.random.default_rng(k + 500), z, V=W)[0].sup_error for k in range(30)]
    assert stats.ks_2samp(a, b).pvalue > 1e-3


def test_rigidity_examples():
    g = np.linspace(-2, 2, 50)
    mx, dev = rigidity_report(g, g, middle_indices(50))
    assert mx == 0 and np.all(dev == 0)
    idx = middle_indices(500)
    assert idx[0] == 100 and idx[-1] == 399


def test_min_gap_poisson_control():
    rng = np.random.default_rng(6)
    spectra = [rng.uniform(size=10) for _ in range(20_000)]
    fit = min_gap_statistics(spectra)
    assert fit.exponent == pytest.approx(1.0, abs=0.3)


def test_min_gap_needs_populated_bins():
    with pytest.raises(ValueError):
        min_gap_statistics([np.array([0.0, 1.0])] * 3, delta=[1e-3, 1e-2, 1e-1])


def test_report_and_exports(tmp_path):
    rep = StatisticsReport(gap_ks=0.03, gap_count=10, correlation_bins=[[0.0, np.float64(0.1)]],
                           metadata={"seed": 1, "trials": 2, "arr": np.arange(2)})
    write_report(tmp_path / "r.json", rep)
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["gap_ks"] == 0.03 and d["metadata"]["arr"] == [0, 1]
    with pytest.raises(ValueError):
        StatisticsReport(gap_ks=1.5)
    write_columns_csv(tmp_path / "c.csv", ["a", "b"], [1, 2], [0.5, 0.25])
    assert (tmp_path / "c.csv").read_text().splitlines() == ["a,b", "1,0.5", "2,0.25"]
    x = np.linspace(0, 3, 50)
    svg_plot(tmp_path / "p.svg", hist=(np.linspace(0, 3, 7), np.ones(6)), curves=[(x, surmise_pdf(2, x), "a<b")],
             title="t", xlabel="s", ylabel="p")
    txt = (tmp_path / "p.svg").read_text()
    assert txt.startswith("<svg") and "a&lt;b" in txt and "href" not in txt and "<style" not in txt
