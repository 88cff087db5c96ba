"""Weighted Brownian motion on the unitary (or orthogonal) group.

dU = i dW U - A U dt / 2, where dW is Hermitian with E|dW_ab|^2 = sigma2_ab dt / N
and sigma2_ab = |y_a - y_b|^-2 outside the band |a - b| < N^a.

For beta=1 the increment is dW = i G with G real antisymmetric, so U stays
orthogonal; off-diagonal variances then carry a factor 1/2 (as do A and
Yhat), matching the real symmetric Brownian motion with E dB_ab^2 = dt/2.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .matrix_models import EnsembleConfig, assemble_tildeH, gaussian_hermitian, sample_initial, window_mask

log = logging.getLogger(__name__)


def _kappa(beta):
    return 1.0 if beta == 2 else 0.5


@dataclass(frozen=True)
class WeightTable:
    sigma2: np.ndarray
    window_a: float
    A: np.ndarray
    hatY: np.ndarray
    beta: int = 2

    @property
    def N(self):
        return self.A.size


@dataclass(frozen=True)
class DiffusionState:
    U: np.ndarray
    t: float
    weights: WeightTable
    unitarity_defect: float = 0.0


def build_weights(y, a: float, beta: int = 2) -> WeightTable:
    y = np.asarray(y, dtype=float)
    N = y.size
    if N < 2 or not np.all(np.isfinite(y)):
        raise ValueError("y must be finite with at least two entries")
    long = ~window_mask(N, a)
    d = np.subtract.outer(y, y)
    cap = float(N) ** 2
    with np.errstate(divide="ignore"):
        s2 = np.where(long, 1.0 / (d * d), 0.0)
    over = long & (s2 > cap)
    if np.any(over):
        log.warning("%d long-range pairs with |y_a - y_b| < 1/N; sigma^2 capped at N^2", int(over.sum()) // 2)
        s2[over] = cap
    k = _kappa(beta)
    A = k * s2.sum(axis=1) / N
    hatY = k * (s2 * (y[None, :] - y[:, None])).sum(axis=1) / N
    return WeightTable(s2, a, A, hatY, beta)


def identity_state(weights: WeightTable) -> DiffusionState:
    dt = complex if weights.beta == 2 else float
    return DiffusionState(np.eye(weights.N, dtype=dt), 0.0, weights, 0.0)


def long_range_increment(weights: WeightTable, h: float, rng: np.random.Generator) -> np.ndarray:
    """dW over a step of length h."""
    N = weights.N
    sd = np.sqrt(_kappa(weights.beta) * h * weights.sigma2 / N)
    if weights.beta == 2:
        G = (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))) * (sd / np.sqrt(2))
        G = np.triu(G, 1)
        return G + G.conj().T
    G = np.triu(rng.standard_normal((N, N)) * sd, 1)
    return 1j * (G - G.T)


def retract(M: np.ndarray, method: str = "qr") -> np.ndarray:
    """Map a near-unitary matrix back onto the group."""
    if method == "qr":
        Q, R = np.linalg.qr(M)
        d = np.diagonal(R)
        if np.min(np.abs(d)) < 1e-8:
            raise FloatingPointError("retraction failed: rank loss")
        return Q * (d / np.abs(d))
    if method == "polar":
        W, s, Vh = np.linalg.svd(M)
        if s[-1] < 1e-8:
            raise FloatingPointError("retraction failed: rank loss")
        return W @ Vh
    raise ValueError(f"unknown retraction {method!r}")


def unitarity_defect(U) -> float:
    N = U.shape[0]
    return float(np.max(np.abs(U.conj().T @ U - np.eye(N))))


def step(state: DiffusionState, h: float, rng: np.random.Generator, retraction: str = "qr",
         return_noise: bool = False):
    """One Euler-Maruyama step followed by a retraction.

    Returns the new state, and the raw increment dW when ``return_noise``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    wt = state.weights
    dW = long_range_increment(wt, h, rng)
    U = state.U
    dU = dW @ U
    if wt.beta == 1:
        dU = (1j * dU).real  # i dW U is real here
        M = U + dU - 0.5 * h * wt.A[:, None] * U
    else:
        M = U + 1j * dU - 0.5 * h * wt.A[:, None] * U
    U_new = retract(M, retraction)
    new = DiffusionState(U_new, state.t + h, wt, unitarity_defect(U_new))
    return (new, dW) if return_noise else new


def hermitian_noise(dW, y, a: float, rng: np.random.Generator, h: float, beta: int = 2, U=None):
    """Full Hermitian increment dB, its short-range part, and diag(U* dB U).

    Long-range entries are i sqrt(N) (y_a - y_b) dW_ab; entries inside the
    band (diagonal included) are fresh Brownian increments.
    """
    y = np.asarray(y, dtype=float)
    N = y.size
    band = window_mask(N, a)
    dB_long = 1j * np.sqrt(N) * np.subtract.outer(y, y) * dW
    if beta == 1:
        dB_long = dB_long.real
    dB_short = gaussian_hermitian(N, beta, rng, h) * band
    dB = np.where(band, dB_short, dB_long)
    if U is None:
        diag = np.real(np.diagonal(dB)).copy()
    else:
        diag = rotated_diagonal(dB, U)
    return dB, dB_short, diag


def rotated_diagonal(M, W) -> np.ndarray:
    """Real parts of w_k* M w_k for the columns w_k of W."""
    return np.real(np.einsum("ak,ak->k", W.conj(), M @ W))


def operator_norm(M, iters: int = 20) -> float:
    """Largest singular value by power iteration on M* M."""
    N = M.shape[1]
    v = np.random.default_rng(12345).standard_normal(N)
    v = v / np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        u = M @ v
        v = M.conj().T @ u
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        s = np.sqrt(nv)
        v = v / nv
    return float(s)


@dataclass
class Trajectory:
    t: np.ndarray
    unitarity_defect: np.ndarray
    norm_U_minus_I: np.ndarray
    norm_M: np.ndarray
    states: list

    @property
    def sup_norm_U_minus_I(self) -> float:
        return float(np.max(self.norm_U_minus_I))


def trajectory(cfg: EnsembleConfig, steps: int = 200, rng: np.random.Generator | None = None,
               retraction: str = "qr", keep_every: int = 0, weights: WeightTable | None = None,
               T: float | None = None) -> Trajectory:
    """Integrate U on [0, T] from U = I, recording diagnostics after every step.

    T defaults to N^(-1+b).
    norm_M is the Frobenius norm of the martingale part sum_s i dW(s) U(s).
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    wt = build_weights(cfg.y(), cfg.a, cfg.beta) if weights is None else weights
    state = identity_state(wt)
    T = cfg.T if T is None else float(T)
    t = [0.0]
    defect, nui, nm = [0.0], [0.0], [0.0]
    states = [state]
    if T <= 0:
        return Trajectory(np.array(t), np.array(defect), np.array(nui), np.array(nm), states)
    h = T / steps
    I = np.eye(wt.N)
    Mart = np.zeros((wt.N, wt.N), dtype=complex)
    for k in range(steps):
        U_old = state.U
        state, dW = step(state, h, rng, retraction, return_noise=True)
        Mart += 1j * (dW @ U_old)
        t.append(state.t)
        defect.append(state.unitarity_defect)
        nui.append(operator_norm(state.U - I))
        nm.append(float(np.linalg.norm(Mart)))
        if keep_every and (k + 1) % keep_every == 0:
            states.append(state)
    return Trajectory(np.array(t), np.array(defect), np.array(nui), np.array(nm), states)


def tildeH_at(X, y, V, state: DiffusionState, T: float) -> np.ndarray:
    return assemble_tildeH(X, y, V, state.U, state.t, T, state.weights.hatY)


def initial_tildeH(cfg: EnsembleConfig, rng: np.random.Generator):
    X, V, y = sample_initial(cfg, rng)
    wt = build_weights(y, cfg.a, cfg.beta)
    state = identity_state(wt)
    return X, V, y, state


# -- export ------------------------------------------------------------------------


def write_trajectory_csv(path, traj: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "unitarity_defect", "norm_U_minus_I", "norm_M"])
        for row in zip(traj.t, traj.unitarity_defect, traj.norm_U_minus_I, traj.norm_M):
            wr.writerow([repr(float(v)) for v in row])


def write_checkpoint_csv(path, U) -> None:
    U = np.asarray(U)
    if U.shape[0] > 50:
        raise ValueError("checkpoints are limited to N <= 50")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["row", "col", "re", "im"])
        for i in range(U.shape[0]):
            for j in range(U.shape[1]):
                wr.writerow([i, j, repr(float(U[i, j].real)), repr(float(np.imag(U[i, j])))])


def read_checkpoint_csv(path) -> np.ndarray:
    rows = list(csv.DictReader(open(path, newline="")))
    n = max(int(r["row"]) for r in rows) + 1
    U = np.zeros((n, n), dtype=complex)
    for r in rows:
        U[int(r["row"]), int(r["col"])] = float(r["re"]) + 1j * float(r["im"])
    return U
