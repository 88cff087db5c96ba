"""Random matrix ensembles H = V*XV + U*YU and their spectral data."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .measures import Measure, quantiles


@dataclass(frozen=True)
class EnsembleConfig:
    N: int
    beta: int = 2
    x_spec: object = None
    y_spec: object = None
    epsilon_reg: float = 1e-8
    a: float = 0.2
    b: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if self.beta not in (1, 2):
            raise ValueError("beta must be 1 or 2")
        if not 0 < self.a < 1:
            raise ValueError("a must lie in (0, 1)")
        if not 0 < self.b <= self.a / 100 + 1e-15:
            raise ValueError("b must lie in (0, a/100]")
        if self.epsilon_reg < 0:
            raise ValueError("epsilon_reg must be non-negative")

    @property
    def T(self) -> float:
        return self.N ** (-1.0 + self.b)

    def x(self) -> np.ndarray:
        return _spectrum(self.x_spec, self.N, "x_spec")

    def y(self) -> np.ndarray:
        return _spectrum(self.y_spec, self.N, "y_spec")


def _spectrum(spec, N, name):
    if spec is None:
        return np.zeros(N)
    if isinstance(spec, Measure):
        return quantiles(spec, N)
    v = np.sort(np.asarray(spec, dtype=float))
    if v.shape != (N,):
        raise ValueError(f"{name} must have {N} entries")
    return v


def _readonly(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EigenSystem:
    values: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(self.values))
        object.__setattr__(self, "vectors", _readonly(self.vectors))

    @property
    def N(self):
        return self.values.size


@dataclass(frozen=True)
class OverlapTable:
    w: np.ndarray
    gamma: np.ndarray
    a: float

    def __post_init__(self):
        object.__setattr__(self, "w", _readonly(self.w))
        object.__setattr__(self, "gamma", _readonly(self.gamma))


# -- sampling --------------------------------------------------------------------


def sample_haar(N: int, beta: int, rng: np.random.Generator) -> np.ndarray:
    """Haar unitary (beta=2) or orthogonal (beta=1) matrix via Ginibre + QR."""
    if N < 1:
        raise ValueError("N must be positive")
    if beta == 2:
        Z = (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))) / np.sqrt(2)
    else:
        Z = rng.standard_normal((N, N))
    Q, R = np.linalg.qr(Z)
    d = np.diagonal(R)
    return Q * (d / np.abs(d))


def gaussian_hermitian(N: int, beta: int, rng: np.random.Generator, var: float = 1.0) -> np.ndarray:
    """Gaussian matrix with diagonal variance ``var``.

    Off-diagonal entries have E|Q_ij|^2 = var for beta=2 (complex) and
    variance var/2 for beta=1 (real symmetric).
    """
    s = np.sqrt(var)
    if beta == 2:
        G = (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))) * (s / np.sqrt(2))
        Q = np.triu(G, 1)
        Q = Q + Q.conj().T
    else:
        G = rng.standard_normal((N, N)) * (s / np.sqrt(2))
        Q = np.triu(G, 1)
        Q = Q + Q.T
    Q[np.diag_indices(N)] = s * rng.standard_normal(N)
    return Q


def regularize(X, epsilon_reg: float, rng: np.random.Generator, beta: int = 2) -> np.ndarray:
    """diag(X) + epsilon_reg * Q with Q drawn from density ~ exp(-N/2 sum |q_ij|^2)."""
    x = np.asarray(X, dtype=float)
    N = x.size
    M = np.diag(x).astype(complex if beta == 2 else float)
    if epsilon_reg > 0:
        M = M + epsilon_reg * gaussian_hermitian(N, beta, rng, 1.0 / N)
    return M


def conj_by(Q, M):
    """Q* M Q, with M given as a vector for diagonal matrices."""
    M = np.asarray(M)
    if M.ndim == 1:
        return Q.conj().T @ (M[:, None] * Q)
    return Q.conj().T @ M @ Q


def assemble_H(X, Y, V, U) -> np.ndarray:
    """H = V*XV + U*YU; X and Y may be given as diagonals."""
    N = V.shape[0]
    for A in (X, Y):
        if np.asarray(A).shape[0] != N:
            raise ValueError("dimension mismatch")
    if U.shape != V.shape:
        raise ValueError("dimension mismatch")
    H = conj_by(V, X) + conj_by(U, Y)
    return 0.5 * (H + H.conj().T)


def assemble_tildeH(X, Y, V, U, t: float, T: float, hatY) -> np.ndarray:
    """H + (T - t) Yhat."""
    H = assemble_H(X, Y, V, U)
    H[np.diag_indices_from(H)] += (T - t) * np.asarray(hatY)
    return H


# -- spectral data -----------------------------------------------------------------


def fix_signs(vectors: np.ndarray, thresh: float = 1e-12) -> np.ndarray:
    """Make the first entry of magnitude > thresh of each column have Re >= 0."""
    big = np.abs(vectors) > thresh
    first = np.argmax(big, axis=0)
    lead = vectors[first, np.arange(vectors.shape[1])]
    flip = np.where(lead.real < 0, -1.0, 1.0)
    return vectors * flip


def eigh(matrix) -> EigenSystem:
    A = np.asarray(matrix)
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("square matrix required")
    if np.max(np.abs(A - A.conj().T), initial=0.0) > 1e-10 * scale:
        raise ValueError("matrix is not Hermitian")
    vals, vecs = scipy.linalg.eigh(A, check_finite=False)
    return EigenSystem(vals, fix_signs(vecs))


def green_diag(es: EigenSystem, z: complex) -> np.ndarray:
    """Diagonal of (H - z)^{-1} in the standard basis."""
    if complex(z).imag <= 0:
        raise ValueError("Im z must be positive")
    P = np.abs(es.vectors) ** 2
    return P @ (1.0 / (es.values - z))


def resolvent(es: EigenSystem, z: complex) -> np.ndarray:
    """Full resolvent (H - z)^{-1}, built from the eigensystem."""
    if complex(z).imag <= 0:
        raise ValueError("Im z must be positive")
    Q = es.vectors
    return (Q * (1.0 / (es.values - z))) @ Q.conj().T


def window_mask(N: int, a: float) -> np.ndarray:
    """Boolean N x N band |alpha - beta| < N^a."""
    d = np.abs(np.subtract.outer(np.arange(N), np.arange(N)))
    return d < N ** a


def overlaps(U, es: EigenSystem, a: float) -> OverlapTable:
    """w_k = U a_k and gamma_ij = sum over the band of |w_ai|^2 |w_bj|^2."""
    U = np.asarray(U)
    if U.shape != es.vectors.shape:
        raise ValueError("dimension mismatch")
    w = U @ es.vectors
    P = np.abs(w) ** 2
    band = window_mask(es.N, a).astype(float)
    gamma = P.T @ band @ P
    gamma = np.clip(0.5 * (gamma + gamma.T), 0.0, 1.0)
    return OverlapTable(w, gamma, a)


def sample_initial(cfg: EnsembleConfig, rng: np.random.Generator):
    """Regularized X, Haar V and the diagonal y for a fresh trial."""
    X = regularize(cfg.x(), cfg.epsilon_reg, rng, cfg.beta)
    V = sample_haar(cfg.N, cfg.beta, rng)
    return X, V, cfg.y()


def sample_H(cfg: EnsembleConfig, rng: np.random.Generator) -> np.ndarray:
    """H = V*XV + U*YU with independent Haar V, U."""
    X, V, y = sample_initial(cfg, rng)
    U = sample_haar(cfg.N, cfg.beta, rng)
    return assemble_H(X, y, V, U)


# -- export ------------------------------------------------------------------------


def write_spectrum_csv(path, values) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "eigenvalue"])
        for i, v in enumerate(np.asarray(values, dtype=float)):
            wr.writerow([i, repr(float(v))])


def write_overlaps_csv(path, table: OverlapTable, threshold: float = 1e-6) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["i", "j", "gamma"])
        I, J = np.nonzero(table.gamma > threshold)
        for i, j in zip(I.tolist(), J.tolist()):
            wr.writerow([i, j, repr(float(table.gamma[i, j]))])
