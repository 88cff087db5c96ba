"""End-to-end acceptance experiments.

Every criterion is a function ``(master_seed, threads) -> CriterionResult``;
trial k of criterion c draws from seeding.trial_rng(master, "c<c>-...", k).
"""
from __future__ import annotations

import filecmp
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import dbm, seeding
from .matrix_models import EnsembleConfig, assemble_tildeH, eigh, gaussian_hermitian, overlaps, sample_H, sample_initial
from .measures import Measure, bernoulli, quantiles, semicircle, semicircle_density
from .spectral_stats import (ks_distance, local_law_report, middle_indices, min_gap_statistics,
                             reference_spacing_cdf, rigidity_report, unfold_gaps)
from .subordination import SolverConfig, free_convolution, solve_grid, solve_pointwise
from .unitary_diffusion import build_weights, trajectory

DEFAULT_SEED = 20261018


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    measured: dict = field(default_factory=dict)
    threshold: str = ""
    runtime: float = 0.0

    def line(self) -> str:
        vals = ", ".join(f"{k}={_fmt(v)}" for k, v in self.measured.items())
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:>2} {self.title}: {vals} (need {self.threshold})"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(u) for u in v) + "]"
    return str(v)


def _sc_sc_density():
    sc = semicircle()
    return free_convolution(sc, sc, np.linspace(-3.5, 3.5, 1401))


# -- 1 ----------------------------------------------------------------------------------


def criterion_1(master=DEFAULT_SEED, threads=1) -> CriterionResult:
    t0 = time.perf_counter()
    sc = semicircle()
    fc = free_convolution(sc, sc, np.linspace(-3.0, 3.0, 1201))
    E = np.linspace(-2.7, 2.7, 5401)
    err_sc = float(np.max(np.abs(fc.density_at(E) - semicircle_density(E, 2.0))))
    b = bernoulli()
    fb = free_convolution(b, b, np.linspace(-2.5, 2.5, 5001), eta0=1e-3)
    E = np.linspace(-1.9, 1.9, 3801)
    err_b = float(np.max(np.abs(fb.density_at(E) - 1.0 / (np.pi * np.sqrt(4 - E ** 2)))))
    rt = time.perf_counter() - t0
    ok = err_sc <= 5e-3 and err_b <= 1e-2 and rt < 10
    return CriterionResult(1, "free convolution oracles", ok,
                           {"sc_err": err_sc, "bern_err": err_b, "seconds": rt},
                           "sc_err<=5e-3, bern_err<=1e-2, <10 s", rt)


# -- 2 ----------------------------------------------------------------------------------


def criterion_2(master=DEFAULT_SEED, threads=1) -> CriterionResult:
    t0 = time.perf_counter()
    sc = semicircle()
    E = np.linspace(-2.0, 2.0, 50)
    eta = np.geomspace(1e-3, 1.0, 10)
    z = (E[:, None] + 1j * eta[None, :]).ravel()
    m, w1, w2, res, it, conv = solve_grid(sc, sc, z, SolverConfig())
    sign_ok = (m.imag > 0) & (w1.imag <= 0) & (w2.imag <= 0) & (res <= 1e-10)
    bad = int(np.sum(conv & ~sign_ok))
    rate = float(np.mean(conv))
    ok = bad == 0 and rate >= 0.99
    return CriterionResult(2, "subordination sign structure", ok,
                           {"convergence_rate": rate, "violations": bad},
                           "no violations, rate>=0.99", time.perf_counter() - t0)


# -- 3 ----------------------------------------------------------------------------------


def criterion_3(master=DEFAULT_SEED, threads=1) -> CriterionResult:
    t0 = time.perf_counter()
    sc = semicircle()
    cfg = EnsembleConfig(500, 2, sc, sc)
    dens = _sc_sc_density()
    ev = seeding.run_trials(lambda k, rng: np.linalg.eigvalsh(sample_H(cfg, rng)), master, "c3", 20, threads)
    ks = ks_distance(np.concatenate(ev), dens.cdf)
    rt = time.perf_counter() - t0
    return CriterionResult(3, "ESD law", ks <= 0.05 and rt < 120, {"ks": ks, "seconds": rt}, "ks<=0.05, <120 s", rt)


# -- 4 ----------------------------------------------------------------------------------


def local_law_trial(cfg: EnsembleConfig, rng, E: float, eta: float):
    """Local-law error at t=0, U=I with w1 from the finite-N system (atoms of x and ybar)."""
    X, V, y = sample_initial(cfg, rng)
    wt = build_weights(y, cfg.a, cfg.beta)
    ybar = y + cfg.T * wt.hatY
    es = eigh(assemble_tildeH(X, y, V, np.eye(cfg.N), 0.0, cfg.T, wt.hatY))
    mx, my = Measure.atoms(cfg.x()), Measure.atoms(ybar)

    def w1(z):
        s = solve_pointwise(mx, my, z)
        return s.w1 if s.converged else None

    return local_law_report(es, ybar, w1, [(E, eta)])[0]


def criterion_4(master=DEFAULT_SEED, threads=1) -> CriterionResult:
    t0 = time.perf_counter()
    sc = semicircle()
    N = 300
    eta = N ** -0.5
    cfg = EnsembleConfig(N, 2, sc, sc)
    rows = seeding.run_trials(lambda k, rng: local_law_trial(cfg, rng, 0.0, eta), master, "c4", 20, threads)
    ratio = float(np.median([r.ratio for r in rows]))
    ctrl = EnsembleConfig(N, 2, None, sc, epsilon_reg=0.0)
    c = local_law_trial(ctrl, seeding.trial_rng(master, "c4-control", 0), 0.0, eta)
    ok = ratio <= 10 and c.sup_error <= 1e-8 and all(r.valid for r in rows)
    return CriterionResult(4, "local law at t=0", ok, {"median_ratio": ratio, "control_error": c.sup_error},
                           "median ratio<=10, control<=1e-8", time.perf_counter() - t0)


# -- 5 ----------------------------------------------------------------------------------


def criterion_5(master=DEFAULT_SEED, threads=1) -> CriterionResult:
    t0 = time.perf_counter()
    sc = semicircle()
    meds, defect = [], 0.0
    for N in (100, 200, 400):
        cfg = EnsembleConfig(N, 2, sc, sc, a=0.2, b=0.002)
        wt = build_weights(cfg.y(), cfg.a, cfg.beta)
        trs = seeding.run_trials(lambda k, rng: trajectory(cfg, 200, rng, weights=wt), master, f"c5-{N}", 20, threads)
        meds.append(float(np.median([t.sup_norm_U_minus_I for t in trs])))
        defect = max(defect, max(float(t.unitarity_defect.max()) for t in trs))
    ok = meds[0] > meds[1] > meds[2] and defect <= 1e-8
    return CriterionResult(5, "unitary diffusion trend", ok, {"median_sup_norm": meds, "max_defect": defect},
                           "strictly decreasing, defect<=1e-8", time.perf_counter() - t0)


# -- 6 ----------------------------------------------------------------------------------


def coupling_medians(master, threads, Ns=(100, 200, 300), trials=20, tag="c6", spread=None):
    sc = semicircle()
    dens = _sc_sc_density()
    rho0 = float(dens.density_at(np.array([0.0]))[0])
    meds = []
    boot = np.random.default_rng(master)
    for N in Ns:
        cfg = EnsembleConfig(N, 2, sc, sc)
        bulk = dbm.bulk_index_set(quantiles(dens, N), dens, 0.1)
        runs = seeding.run_trials(lambda k, rng: dbm.couple_run(cfg, "matrix", rng, bulk=bulk, keep_paths=False),
                                  master, f"{tag}-{N}", trials, threads)
        vals = np.array([N * rho0 * r.sup_diff[-1] for r in runs])
        meds.append(float(np.median(vals)))
        if spread is not None:
            # bootstrap standard error of the median, for reading the trend
            spread.append(float(np.std(np.median(boot.choice(vals, (1000, vals.size)), axis=1))))
    return meds


def criterion_6(master=DEFAULT_SEED, threads=1) -> CriterionResult:
    t0 = time.perf_counter()
    se = []
    meds = coupling_medians(master, threads, spread=se)
    rt = time.perf_counter() - t0
    ok = meds[-1] <= 0.5 and all(a >= b for a, b in zip(meds, meds[1:])) and rt < 1200
    return CriterionResult(6, "DBM coupling", ok, {"median_N_rho_supdiff": meds, "median_se": se, "seconds": rt},
                           "<=0.5 at N=300, nonincreasing, <20 min", rt)


# -- 7 ----------------------------------------------------------------------------------


def gap_ks(master, threads, beta, ensemble="H", N=400, trials=100):
    sc = semicircle()
    if ensemble == "H":
        cfg = EnsembleConfig(N, beta, sc, sc)
        rho = 1.0 / (np.pi * np.sqrt(2.0))

        def draw(k, rng):
            return np.linalg.eigvalsh(sample_H(cfg, rng))
    else:
        rho = 1.0 / np.pi

        def draw(k, rng):
            return np.linalg.eigvalsh(gaussian_hermitian(N, beta, rng, 1.0 / N))
    ev = seeding.run_trials(draw, master, f"c7-{ensemble}-{beta}", trials, threads)
    s = unfold_gaps(ev, rho, 0.0)
    return ks_distance(s, lambda x: reference_spacing_cdf(beta, x)), s


def criterion_7(master=DEFAULT_SEED, threads=1) -> CriterionResult:
    t0 = time.perf_counter()
    ks_h, _ = gap_ks(master, threads, 2, "H")
    ks_g, _ = gap_ks(master, threads, 2, "GUE")
    ks_1, _ = gap_ks(master, threads, 1, "H")
    ok = ks_h <= 0.08 and ks_g <= 0.05 and ks_1 <= 0.10
    return CriterionResult(7, "gap universality", ok, {"ks_beta2": ks_h, "ks_gue": ks_g, "ks_beta1": ks_1},
                           "<=0.08, GUE<=0.05, beta1<=0.10", time.perf_counter() - t0)


# -- 8 ----------------------------------------------------------------------------------


def min_gap_fit(master, threads, beta, N=10, trials=20000):
    sc = semicircle()
    cfg = EnsembleConfig(N, beta, sc, sc)
    sp = seeding.run_trials(lambda k, rng: np.linalg.eigvalsh(sample_H(cfg, rng)), master, f"c8-{beta}", trials, threads)
    return min_gap_statistics(sp)


def criterion_8(master=DEFAULT_SEED, threads=1) -> CriterionResult:
    t0 = time.perf_counter()
    f2 = min_gap_fit(master, threads, 2)
    f1 = min_gap_fit(master, threads, 1)
    rt = time.perf_counter() - t0
    ok = abs(f2.exponent - 3) <= 0.5 and abs(f1.exponent - 2) <= 0.5 and rt < 300
    return CriterionResult(8, "level repulsion", ok, {"exp_beta2": f2.exponent, "exp_beta1": f1.exponent, "seconds": rt},
                           "3+-0.5, 2+-0.5, <5 min", rt)


# -- 9 ----------------------------------------------------------------------------------


def criterion_9(master=DEFAULT_SEED, threads=1, trials=10) -> CriterionResult:
    t0 = time.perf_counter()
    sc = semicircle()
    dens = _sc_sc_density()
    out = {}
    for N in (250, 500):
        cfg = EnsembleConfig(N, 2, sc, sc)
        g = quantiles(dens, N)
        mi = middle_indices(N, 0.6)

        def trial(k, rng):
            X, V, y = sample_initial(cfg, rng)
            wt = build_weights(y, cfg.a, cfg.beta)
            lam = eigh(assemble_tildeH(X, y, V, np.eye(N), 0.0, cfg.T, wt.hatY)).values
            mx, dev = rigidity_report(lam, g, mi)
            return mx, float(np.median(dev))

        res = seeding.run_trials(trial, master, f"c9-{N}", trials, threads)
        out[N] = (max(r[0] for r in res), float(np.median([r[1] for r in res])))
    ratio = out[500][1] / out[250][1]
    ok = out[500][0] <= 0.05 and 0.25 <= ratio <= 0.75
    return CriterionResult(9, "rigidity", ok, {"max_dev_N500": out[500][0], "median_ratio_500_250": ratio},
                           "max<=0.05, ratio in [0.25, 0.75]", time.perf_counter() - t0)


# -- 10 ---------------------------------------------------------------------------------


def criterion_10(master=DEFAULT_SEED, threads=1) -> CriterionResult:
    t0 = time.perf_counter()
    sc = semicircle()
    N, a = 400, 0.2
    cfg = EnsembleConfig(N, 2, sc, sc, a=a)
    dens = _sc_sc_density()
    bulk = dbm.bulk_index_set(quantiles(dens, N), dens, 0.1)
    bound = N ** (a + 0.1) / N

    def trial(k, rng):
        X, V, y = sample_initial(cfg, rng)
        wt = build_weights(y, a, cfg.beta)
        es = eigh(assemble_tildeH(X, y, V, np.eye(N), 0.0, cfg.T, wt.hatY))
        g = overlaps(np.eye(N), es, a).gamma
        return float(np.max(g[np.ix_(bulk, bulk)]))

    gmax = seeding.run_trials(trial, master, "c10", 20, threads)
    frac = float(np.mean(np.array(gmax) <= bound))
    return CriterionResult(10, "overlap bound", frac >= 0.9,
                           {"fraction_within": frac, "median_N_gamma_max": float(np.median(gmax)) * N, "N_bound": bound * N},
                           "fraction>=0.9", time.perf_counter() - t0)


# -- 11 ---------------------------------------------------------------------------------


DETERMINISM_CONFIG = """[run]
seed = {seed}

[ensemble]
N = 40
beta = 2
x = semicircle
y = semicircle

[sample]
trials = 3

[coupling]
mode = matrix
trials = 2
steps = 20
"""


def _same_tree(a, b) -> bool:
    fa, fb = sorted(os.listdir(a)), sorted(os.listdir(b))
    if fa != fb:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, fa, shallow=False)
    return not mismatch and not errors


def criterion_11(master=DEFAULT_SEED, threads=1) -> CriterionResult:
    from . import cli
    t0 = time.perf_counter()
    same = {}
    with tempfile.TemporaryDirectory() as tmp:
        cfg = os.path.join(tmp, "det.ini")
        with open(cfg, "w") as fh:
            fh.write(DETERMINISM_CONFIG.format(seed=master))
        for cmd in ("sample", "couple"):
            dirs = []
            for r, th in enumerate((1, max(2, threads))):
                out = os.path.join(tmp, f"{cmd}-{r}")
                code = cli.main([cmd, "--config", cfg, "--out", out, "--threads", str(th), "--quiet"])
                if code != 0:
                    raise RuntimeError(f"{cmd} exited with {code}")
                dirs.append(out)
            same[cmd] = _same_tree(*dirs)
    return CriterionResult(11, "determinism", all(same.values()), {k: v for k, v in same.items()},
                           "byte-identical reruns", time.perf_counter() - t0)


CRITERIA = {k: globals()[f"criterion_{k}"] for k in range(1, 12)}


def run(numbers=None, master=DEFAULT_SEED, threads=1, echo=print) -> list[CriterionResult]:
    out = []
    for k in numbers or sorted(CRITERIA):
        r = CRITERIA[k](master, threads)
        if echo:
            echo(r.line())
        out.append(r)
    return out
