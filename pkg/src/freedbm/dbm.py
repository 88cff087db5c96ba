"""Dyson Brownian motion, the perturbed eigenvalue SDE, and their coupling.

Clean DBM:  d mu_i = dB_i / sqrt(N) + (beta / 2N) sum_j dt / (mu_i - mu_j).
Perturbed:  d lam_i = dB_i / sqrt(N) - dM_i + (beta / 2N) sum_j (1 - gamma_ij) dt / (lam_i - lam_j) + Z_i dt.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .matrix_models import EnsembleConfig, conj_by, eigh, sample_initial, window_mask
from .measures import Measure, quantiles
from .subordination import free_convolution
from .unitary_diffusion import build_weights, hermitian_noise, identity_state, rotated_diagonal, step

log = logging.getLogger(__name__)

GUARD_LEVELS = 10


class CollisionError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DbmState:
    lam: np.ndarray
    t: float = 0.0
    beta: int = 2

    def __post_init__(self):
        a = np.array(self.lam, dtype=float)
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite eigenvalues")
        a.setflags(write=False)
        object.__setattr__(self, "lam", a)


@dataclass
class GuardStats:
    delta_guard: float
    occupation: float = 0.0
    substeps: int = 0
    max_level: int = 0


@dataclass(frozen=True)
class CoupledPaths:
    t: np.ndarray
    lambda_path: np.ndarray
    mu_path: np.ndarray
    sup_diff: np.ndarray
    min_gap_lambda: np.ndarray
    min_gap_mu: np.ndarray
    bulk: np.ndarray
    seed: object = None
    extra: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.lambda_path.shape[1]


def default_delta_guard(N):
    return 1e-3 / N


def min_gap_monitor(state) -> tuple[float, int]:
    """Smallest neighbouring gap and the index i of the pair (i, i+1)."""
    lam = state.lam if isinstance(state, DbmState) else np.asarray(state)
    if lam.size < 2:
        return float("inf"), -1
    g = np.diff(lam)
    i = int(np.argmin(g))
    return float(g[i]), i


def interaction(lam, beta: int, gamma=None) -> np.ndarray:
    """(beta / 2N) sum_{j != i} (1 - gamma_ij) / (lam_i - lam_j)."""
    N = lam.size
    d = np.subtract.outer(lam, lam)
    np.fill_diagonal(d, np.inf)
    inv = 1.0 / d
    if gamma is not None:
        inv = (1.0 - gamma) * inv
    return (beta / (2.0 * N)) * inv.sum(axis=1)


def _min_gap(lam):
    return float(np.min(np.diff(lam))) if lam.size > 1 else np.inf


def _advance(lam, noise, h, beta, gamma, Z, level, guard, rng):
    """Euler step; splits into half steps while the guard is triggered.

    The noise increment of a split step is divided by a Brownian bridge when
    ``rng`` is given and evenly otherwise.
    """
    g0 = _min_gap(lam)
    new = lam + noise + interaction(lam, beta, gamma) * h
    if Z is not None:
        new = new + Z * h
    trig = g0 < guard.delta_guard or not (_min_gap(new) >= guard.delta_guard)
    if trig and level < GUARD_LEVELS:
        guard.substeps += 1
        guard.max_level = max(guard.max_level, level + 1)
        half = 0.5 * noise
        if rng is not None:
            half = half + np.sqrt(h / (4.0 * lam.size)) * rng.standard_normal(lam.size)
        mid = _advance(lam, half, 0.5 * h, beta, gamma, Z, level + 1, guard, rng)
        return _advance(mid, noise - half, 0.5 * h, beta, gamma, Z, level + 1, guard, rng)
    if g0 < guard.delta_guard:
        guard.occupation += h
    if not np.all(np.isfinite(new)):
        raise CollisionError("non-finite eigenvalues after guarded step")
    new = np.sort(new)
    if lam.size > 1 and np.min(np.diff(new)) <= 0:
        raise CollisionError("eigenvalue collision after guard exhaustion")
    return new


def _step(state, noise, h, gamma, Z, guard, rng):
    if h <= 0:
        raise ValueError("h must be positive")
    lam = state.lam
    guard = guard if guard is not None else GuardStats(default_delta_guard(lam.size))
    new = _advance(lam, noise, h, state.beta, gamma, Z, 0, guard, rng)
    return DbmState(new, state.t + h, state.beta)


def dbm_step(state: DbmState, dB, h: float, guard: GuardStats | None = None, rng=None,
             noise_factor: float = 1.0) -> DbmState:
    N = state.lam.size
    noise = np.asarray(dB, dtype=float) * (noise_factor / np.sqrt(N))
    return _step(state, noise, h, None, None, guard, rng)


def perturbed_dbm_step(state: DbmState, dB, dM_short, gamma, Z, h: float,
                       guard: GuardStats | None = None, rng=None, noise_factor: float = 1.0) -> DbmState:
    N = state.lam.size
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (N, N) or np.any(gamma < 0) or np.any(gamma > 1) or not np.allclose(gamma, gamma.T):
        raise ValueError("gamma must be a symmetric N x N array in [0, 1]")
    Z = np.asarray(Z, dtype=float)
    if not np.all(np.isfinite(Z)):
        raise ValueError("Z must be finite")
    noise = np.asarray(dB, dtype=float) * (noise_factor / np.sqrt(N)) - np.asarray(dM_short, dtype=float)
    return _step(state, noise, h, gamma, Z, guard, rng)


def noise_factor(N: int, c2: float | None) -> float:
    """(1 + N^-c2)^(-1/2), or 1 when c2 is None."""
    return 1.0 if c2 is None else (1.0 + N ** (-c2)) ** -0.5


# -- bulk index set --------------------------------------------------------------


def limit_measures(cfg: EnsembleConfig):
    def as_measure(spec, values):
        return spec if isinstance(spec, Measure) else Measure.atoms(values)
    return as_measure(cfg.x_spec, cfg.x()), as_measure(cfg.y_spec, cfg.y())


def limit_density(cfg: EnsembleConfig, n: int = 1201) -> Measure:
    m1, m2 = limit_measures(cfg)
    K = m1.K + m2.K + 0.5
    return free_convolution(m1, m2, np.linspace(-K, K, n))


def bulk_index_set(classical, density: Measure, kappa: float = 0.1) -> np.ndarray:
    """Indices whose classical location lies in the inner (1 - 2 kappa) part of the support."""
    lo, hi = support_interval(density)
    width = hi - lo
    g = np.asarray(classical)
    return np.nonzero((g >= lo + kappa * width) & (g <= hi - kappa * width))[0]


def support_interval(density: Measure, rel: float = 1e-3):
    """Outermost points where the density exceeds rel * its maximum."""
    w = density.w
    on = np.nonzero(w > rel * np.max(w))[0]
    return float(density.x[on[0]]), float(density.x[on[-1]])


# -- coupling ----------------------------------------------------------------------


def synthetic_gamma(N: int, a: float) -> np.ndarray:
    return (N ** a / N) * window_mask(N, a).astype(float)


def sde_increment(es, U, wt, dB, dB_short, h: float, beta: int, y=None) -> np.ndarray:
    """Increment of lam predicted by the perturbed SDE for the eigensystem ``es`` of tilde H(t)."""
    N = es.N
    w = U @ es.vectors
    dBi = rotated_diagonal(dB, w)
    dM = rotated_diagonal(dB_short, w) / np.sqrt(N)
    P = np.abs(w) ** 2
    gamma = np.clip(P.T @ window_mask(N, wt.window_a).astype(float) @ P, 0.0, 1.0)
    D = conj_by(U, wt.hatY) - np.diag(wt.hatY)
    Z = np.real(np.einsum("ak,ak->k", es.vectors.conj(), D @ es.vectors))
    drift = interaction(es.values, beta, 0.5 * (gamma + gamma.T))
    return dBi / np.sqrt(N) - dM + drift * h + Z * h


def couple_run(cfg: EnsembleConfig, mode: str = "matrix", rng: np.random.Generator | None = None,
               steps: int = 200, gamma=None, kappa: float = 0.1, bulk=None, density: Measure | None = None,
               c2: float | None = None, retraction: str = "qr", keep_paths: bool = True) -> CoupledPaths:
    """Run lam (perturbed / matrix) and mu (clean DBM) on [0, T] with shared dB_i.

    In matrix mode lam(t) are the eigenvalues of tilde H(t) and dB_i = w_i* dB w_i
    with w_i = U a_i; in synthetic mode lam follows the perturbed SDE with the
    given gamma field, Z = 0 and no short-range martingale.
    """
    if mode not in ("matrix", "synthetic"):
        raise ValueError("mode must be 'matrix' or 'synthetic'")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    N, beta, T = cfg.N, cfg.beta, cfg.T
    h = T / steps
    if bulk is None:
        density = limit_density(cfg) if density is None else density
        bulk = bulk_index_set(quantiles(density, N), density, kappa)
    bulk = np.asarray(bulk, dtype=int)
    nf = noise_factor(N, c2)

    X, V, y = sample_initial(cfg, rng)
    wt = build_weights(y, cfg.a, beta)
    VXV = conj_by(V, X)
    st = identity_state(wt)

    def tilde_h(s):
        H = VXV + conj_by(s.U, y)
        H = 0.5 * (H + H.conj().T)
        H[np.diag_indices(N)] += (T - s.t) * wt.hatY
        return H

    es = eigh(tilde_h(st))
    lam = DbmState(es.values, 0.0, beta)
    mu = DbmState(es.values, 0.0, beta)
    guard_mu = GuardStats(default_delta_guard(N))
    guard_lam = GuardStats(default_delta_guard(N))
    if mode == "synthetic":
        gamma = synthetic_gamma(N, cfg.a) if gamma is None else np.asarray(gamma, dtype=float)
        zeros = np.zeros(N)

    ts = [0.0]
    lp, mp = [lam.lam], [mu.lam]
    sd = [0.0]
    gl, gm = [min_gap_monitor(lam)[0]], [min_gap_monitor(mu)[0]]
    for _ in range(steps):
        if mode == "matrix":
            w = st.U @ es.vectors
            st, dW = step(st, h, rng, retraction, return_noise=True)
            _, _, dBi = hermitian_noise(dW, y, cfg.a, rng, h, beta, U=w)
            mu = dbm_step(mu, dBi, h, guard_mu, noise_factor=nf)
            es = eigh(tilde_h(st))
            lam = DbmState(es.values, st.t, beta)
        else:
            dBi = np.sqrt(h) * rng.standard_normal(N)
            mu = dbm_step(mu, dBi, h, guard_mu, noise_factor=nf)
            lam = perturbed_dbm_step(lam, dBi, zeros, gamma, zeros, h, guard_lam, noise_factor=nf)
        ts.append(mu.t)
        if keep_paths:
            lp.append(lam.lam)
            mp.append(mu.lam)
        sd.append(float(np.max(np.abs(lam.lam[bulk] - mu.lam[bulk]))) if bulk.size else 0.0)
        gl.append(min_gap_monitor(lam)[0])
        gm.append(min_gap_monitor(mu)[0])
    if not keep_paths:
        lp.append(lam.lam)
        mp.append(mu.lam)
    extra = {"occupation_mu": guard_mu.occupation, "occupation_lambda": guard_lam.occupation,
             "substeps_mu": guard_mu.substeps, "T": T, "h": h}
    return CoupledPaths(np.array(ts), np.array(lp), np.array(mp), np.array(sd), np.array(gl), np.array(gm),
                        bulk, cfg.seed, extra)


# -- export ------------------------------------------------------------------------


def write_coupled_csv(path, paths: CoupledPaths) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "sup_diff", "min_gap_lambda", "min_gap_mu"])
        for row in zip(paths.t, paths.sup_diff, paths.min_gap_lambda, paths.min_gap_mu):
            wr.writerow([repr(float(v)) for v in row])


def aggregate(runs: list[CoupledPaths], beta: int, scale: float = 1.0) -> dict:
    """Summary of scale * N * sup_diff(T) across trials."""
    vals = np.array([scale * r.N * r.sup_diff[-1] for r in runs])
    q = np.quantile(vals, [0.1, 0.25, 0.5, 0.75, 0.9]) if vals.size else np.full(5, np.nan)
    return {
        "N": int(runs[0].N) if runs else 0,
        "beta": int(beta),
        "trials": len(runs),
        "median_N_supdiff": float(np.median(vals)) if vals.size else float("nan"),
        "quantiles": {k: float(v) for k, v in zip(["0.1", "0.25", "0.5", "0.75", "0.9"], q)},
    }


def write_aggregate_json(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
