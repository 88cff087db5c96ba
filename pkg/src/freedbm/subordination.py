"""Subordination solver for the free additive convolution.

For measures mu1, mu2 with Stieltjes transforms m1, m2 the unknowns
(m, w1, w2) satisfy

    m = m2(z - w1) = m1(z - w2),    1/m = w1 + w2 - z,

with Im m > 0 and Im w1, Im w2 <= 0. Writing h(s) = -s - 1/m(s) for the
transform of the "hat" measure, the system is the fixed point
w2 = -h2(z - w1), w1 = -h1(z - w2).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .measures import Measure, density_from_stieltjes, quantiles, stieltjes

log = logging.getLogger(__name__)

ETA_MIN = 1e-8


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-11
    max_iter: int = 50_000
    damping: float = 0.5
    eta_start: float = 2.0
    continuation_steps_per_decade: int = 1
    newton: bool = True


@dataclass(frozen=True)
class SubordinationSolution:
    z: complex
    m: complex
    w1: complex
    w2: complex
    residual: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class StabilityDiagnostics:
    a: complex
    b: complex
    one_minus_ab: float
    r1: complex = 0j
    r2: complex = 0j


def _eval(mu: Measure, s):
    """m, m', h, h' of a measure at points s (Im s > 0)."""
    if mu.is_point_mass:
        a = mu.x[0]
        m = 1.0 / (a - s)
        return m, m * m, np.full_like(s, -a), np.zeros_like(s)
    m, dm = stieltjes(mu, s, derivative=True)
    h = -s - 1.0 / m
    dh = -1.0 + dm / (m * m)
    return m, dm, h, dh


def _clamp_eta(z):
    z = np.asarray(z, dtype=complex)
    if np.any(z.imag <= 0):
        raise ValueError("subordination requires Im z > 0")
    return z.real + 1j * np.maximum(z.imag, ETA_MIN)


def _state(mu1, mu2, z, w1, w2):
    """Transforms at (z - w1, z - w2) packed for the Newton loop."""
    m2, _, h2, dh2 = _eval(mu2, z - w1)
    m1, _, h1, dh1 = _eval(mu1, z - w2)
    with np.errstate(all="ignore"):
        res = np.maximum(np.abs(m2 - m1), np.abs(1.0 / m2 - (w1 + w2 - z)))
    res = np.where(np.isfinite(res), res, np.inf)
    return [m2, h1, h2, dh1, dh2, res]


def _iterate(mu1, mu2, z, w1, w2, cfg: SolverConfig, max_iter=None):
    """Solve at the points z from the starting values (w1, w2), vectorised.

    Newton steps on (w1, w2) with backtracking that keeps both imaginary
    parts non-positive; a damped fixed-point step is used whenever Newton
    fails to reduce the defect.
    """
    max_iter = cfg.max_iter if max_iter is None else max_iter
    w1 = np.array(w1, dtype=complex)
    w2 = np.array(w2, dtype=complex)
    iters = np.zeros(z.shape, dtype=int)
    st = _state(mu1, mu2, z, w1, w2)
    active = st[5] > cfg.tol
    it = 0
    while np.any(active) and it < max_iter:
        it += 1
        idx = np.nonzero(active)[0]
        zz, a1, a2 = z[idx], w1[idx], w2[idx]
        m2, h1, h2, dh1, dh2, _ = (v[idx] for v in st)
        F1 = a2 + h2
        F2 = a1 + h1
        fnorm = np.abs(F1) + np.abs(F2)
        new1, new2 = a1.copy(), a2.copy()
        done = np.zeros(idx.size, dtype=bool)
        if cfg.newton:
            # J = [[-h2', 1], [1, -h1']] acting on (dw1, dw2)
            det = dh1 * dh2 - 1.0
            ok = np.abs(det) > 1e-300
            with np.errstate(all="ignore"):
                d1 = np.where(ok, (dh1 * F1 + F2) / det, 0)
                d2 = np.where(ok, (F1 + dh2 * F2) / det, 0)
            ok &= np.isfinite(d1) & np.isfinite(d2)
            step = np.ones(idx.size)
            pending = ok.copy()
            for _ in range(30):
                if not np.any(pending):
                    break
                p = np.nonzero(pending)[0]
                c1 = a1[p] + step[p] * d1[p]
                c2 = a2[p] + step[p] * d2[p]
                good = (c1.imag <= 0) & (c2.imag <= 0)
                g = p[good]
                if g.size:
                    c1, c2 = c1[good], c2[good]
                    cand = _state(mu1, mu2, zz[g], c1, c2)
                    fn = np.abs(c2 + cand[2]) + np.abs(c1 + cand[1])
                    acc = fn < fnorm[g] * (1 - 1e-4 * step[g])
                    # accept tiny defects that stagnate at round-off level
                    acc |= cand[5] <= cfg.tol
                    a_idx = idx[g[acc]]
                    w1[a_idx] = c1[acc]
                    w2[a_idx] = c2[acc]
                    for k in range(6):
                        st[k][a_idx] = cand[k][acc]
                    done[g[acc]] = True
                    pending[g[acc]] = False
                step[pending] *= 0.5
        fp = ~done
        if np.any(fp):
            d = cfg.damping
            f_idx = idx[fp]
            n1 = (1 - d) * a1[fp] + d * (-h1[fp])
            n2 = (1 - d) * a2[fp] + d * (-h2[fp])
            w1[f_idx] = n1.real + 1j * np.minimum(n1.imag, 0.0)
            w2[f_idx] = n2.real + 1j * np.minimum(n2.imag, 0.0)
            cand = _state(mu1, mu2, z[f_idx], w1[f_idx], w2[f_idx])
            for k in range(6):
                st[k][f_idx] = cand[k]
        iters[idx] += 1
        active[idx] = st[5][idx] > cfg.tol
    return st[0], w1, w2, st[5], iters


def _eta_path(eta_start, eta_end, per_decade):
    if eta_start <= eta_end:
        return np.array([eta_end])
    n = max(1, int(np.ceil(per_decade * np.log10(eta_start / eta_end))))
    return np.geomspace(eta_start, eta_end, n + 1)


def _solve_continued(mu1, mu2, z, cfg):
    """Solve at an array of z by continuation in eta from cfg.eta_start."""
    z = _clamp_eta(z)
    flat = z.ravel()
    E, eta = flat.real, flat.imag
    top = np.maximum(eta, cfg.eta_start)
    w1 = np.zeros(flat.size, dtype=complex)
    w2 = np.zeros(flat.size, dtype=complex)
    total = np.zeros(flat.size, dtype=int)
    # a shared relative path: point j visits top_j * r for the ratios r
    ratios = _eta_path(1.0, float(np.min(eta / top)), cfg.continuation_steps_per_decade)
    for r in ratios:
        level = np.maximum(top * r, eta)
        m, w1, w2, res, it = _iterate(mu1, mu2, E + 1j * level, w1, w2, cfg)
        total += it
    converged = res <= cfg.tol
    shape = z.shape
    return (z, m.reshape(shape), w1.reshape(shape), w2.reshape(shape),
            res.reshape(shape), total.reshape(shape), converged.reshape(shape))


def solve_pointwise(m1: Measure, m2: Measure, z: complex, cfg: SolverConfig = SolverConfig()) -> SubordinationSolution:
    if complex(z).imag <= 0:
        raise ValueError("subordination requires Im z > 0")
    zz, m, w1, w2, res, it, conv = _solve_continued(m1, m2, np.array([z]), cfg)
    if not conv[0]:
        log.warning("subordination did not converge at z=%s (residual %.3g)", z, res[0])
    return SubordinationSolution(complex(zz[0]), complex(m[0]), complex(w1[0]), complex(w2[0]),
                                 float(res[0]), int(it[0]), bool(conv[0]))


def solve_grid(m1: Measure, m2: Measure, z, cfg: SolverConfig = SolverConfig()):
    """Vectorised solve; returns arrays (m, w1, w2, residual, iterations, converged)."""
    _, m, w1, w2, res, it, conv = _solve_continued(m1, m2, np.asarray(z, dtype=complex), cfg)
    return m, w1, w2, res, it, conv


def solve_curve(m1: Measure, m2: Measure, E_grid, eta_path, cfg: SolverConfig = SolverConfig()) -> list[SubordinationSolution]:
    """Continuation along a descending eta path; solutions at the final eta."""
    eta_path = np.asarray(eta_path, dtype=float)
    if eta_path[0] < 1 or np.any(np.diff(eta_path) >= 0) or np.any(eta_path <= 0):
        raise ValueError("eta_path must start >= 1 and decrease strictly to a positive value")
    E = np.asarray(E_grid, dtype=float)
    w1 = np.zeros(E.size, dtype=complex)
    w2 = np.zeros(E.size, dtype=complex)
    total = np.zeros(E.size, dtype=int)
    for eta in eta_path:
        eta = max(eta, ETA_MIN)
        m, w1, w2, res, it = _iterate(m1, m2, E + 1j * eta, w1, w2, cfg)
        total += it
    z = E + 1j * max(eta_path[-1], ETA_MIN)
    return [
        SubordinationSolution(complex(z[k]), complex(m[k]), complex(w1[k]), complex(w2[k]),
                              float(res[k]), int(total[k]), bool(res[k] <= cfg.tol))
        for k in range(E.size)
    ]


def free_convolution(m1: Measure, m2: Measure, grid, cfg: SolverConfig = SolverConfig(), eta0: float = 1e-4) -> Measure:
    """Density of mu1 boxplus mu2 on ``grid`` (which should cover its support)."""
    grid = np.asarray(grid, dtype=float)
    path = _eta_path(max(cfg.eta_start, 1.0), eta0, cfg.continuation_steps_per_decade)
    sols = solve_curve(m1, m2, grid, path, cfg)
    nbad = sum(not s.converged for s in sols)
    if nbad:
        log.warning("free_convolution: %d of %d grid points did not converge", nbad, len(sols))
    mvals = np.array([s.m for s in sols])
    lookup = dict(zip(grid.tolist(), mvals.tolist()))
    return density_from_stieltjes(lambda z: np.array([lookup[e] for e in z.real.tolist()]), grid, eta0)


def free_convolution_stieltjes(m1: Measure, m2: Measure, cfg: SolverConfig = SolverConfig()):
    """The Stieltjes transform of mu1 boxplus mu2 as a vectorised callable."""
    def m(z):
        return solve_grid(m1, m2, z, cfg)[0]
    return m


# -- semicircle flow ----------------------------------------------------------


def _as_scalar(fn):
    def f(s):
        try:
            return complex(np.ravel(fn(np.asarray([s], dtype=complex)))[0])
        except (TypeError, ValueError):
            return complex(fn(s))
    return f


def semicircle_flow(m0, t: float, z: complex, cfg: SolverConfig = SolverConfig()) -> complex:
    """m_t(z) solving m_t = m0(z + t m_t) with Im m_t > 0.

    ``m0`` is a (vectorised or scalar) Stieltjes transform. The plain
    iteration maps C+ into itself; after a few plain steps it switches to
    Newton steps using a centred difference of m0 once the iterate has settled.
    """
    z = complex(z)
    if z.imag <= 0:
        raise ValueError("semicircle_flow requires Im z > 0")
    if t < 0:
        raise ValueError("t must be non-negative")
    f = _as_scalar(m0)
    if t == 0:
        return f(z)
    m = f(z)
    for it in range(cfg.max_iter):
        g = f(z + t * m)
        res = abs(g - m)
        if res <= cfg.tol:
            return g
        if cfg.newton and it >= 5:
            s = z + t * m
            h = 1e-4 * (s.imag)
            dg = (f(s + h) - f(s - h)) / (2 * h) * t
            step = (g - m) / (1 - dg)
            lam = 1.0
            for _ in range(30):
                cand = m + lam * step
                if cand.imag > 0 and abs(f(z + t * cand) - cand) < res:
                    m = cand
                    break
                lam *= 0.5
            else:
                m = (1 - cfg.damping) * m + cfg.damping * g
        else:
            m = g
    log.warning("semicircle_flow did not converge at z=%s", z)
    return m


# -- classical locations --------------------------------------------------------


def classical_locations(density: Measure, N: int) -> np.ndarray:
    return quantiles(density, N)


def evolve_classical_locations(m0, gamma0, t: float, steps: int = 100, cfg: SolverConfig = SolverConfig(), eta: float = 1e-7):
    """Explicit Euler for d gamma_i / dt = -Re m_s(gamma_i(s)) on [0, t]."""
    gamma = np.array(gamma0, dtype=float)
    h = t / steps
    for k in range(steps):
        s = k * h
        drift = np.array([semicircle_flow(m0, s, g + 1j * eta, cfg).real for g in gamma])
        gamma = gamma - h * drift
    return gamma


# -- stability ---------------------------------------------------------------------


def _hat_divided_difference(mu, s, s2):
    if np.abs(s - s2) < 1e-10 * max(1.0, abs(s)):
        return complex(_eval(mu, np.array([s]))[3][0])
    h = _eval(mu, np.array([s, s2]))[2]
    return complex((h[0] - h[1]) / (s - s2))


def stability_diagnostics(sol: SubordinationSolution, m1: Measure, m2: Measure,
                          finite: SubordinationSolution | None = None,
                          m1N: Measure | None = None, m2N: Measure | None = None) -> StabilityDiagnostics:
    """Coefficients a, b of the linearised subordination system at ``sol``.

    a = int dmu2_hat(x) / ((x - z + w1)(x - z + w1')), with w1' taken from
    ``finite`` when given and equal to w1 otherwise; b likewise with mu1_hat.
    r1, r2 are the defects of the finite-N solution in the limiting system.
    """
    z = sol.z
    fw1 = finite.w1 if finite is not None else sol.w1
    fw2 = finite.w2 if finite is not None else sol.w2
    a = _hat_divided_difference(m2, z - sol.w1, z - fw1)
    b = _hat_divided_difference(m1, z - sol.w2, z - fw2)
    r1 = r2 = 0j
    if finite is not None and m1N is not None and m2N is not None:
        s2 = np.array([z - finite.w1])
        s1 = np.array([z - finite.w2])
        r1 = complex(1 / _eval(m2, s2)[0][0] - 1 / _eval(m2N, s2)[0][0])
        r2 = complex(1 / _eval(m1, s1)[0][0] - 1 / _eval(m1N, s1)[0][0])
    return StabilityDiagnostics(a, b, float(abs(1 - a * b)), r1, r2)


# -- export ---------------------------------------------------------------------------

CSV_HEADER = ["E", "eta", "re_m", "im_m", "re_w1", "im_w1", "re_w2", "im_w2", "residual", "iterations"]


def write_solutions_csv(path, sols) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_HEADER)
        for s in sols:
            wr.writerow([repr(s.z.real), repr(s.z.imag), repr(s.m.real), repr(s.m.imag),
                         repr(s.w1.real), repr(s.w1.imag), repr(s.w2.real), repr(s.w2.imag),
                         repr(s.residual), s.iterations])
