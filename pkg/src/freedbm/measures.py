"""Probability measures on the real line.

A measure is either a finite set of weighted atoms (spectra, quantile
atomizations) or a density tabulated on an ascending grid and read as its
piecewise-linear interpolant (densities recovered by Stieltjes inversion).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# Stieltjes sums are chunked so that (points x grid) stays below this size.
_CHUNK = 200_000


@dataclass(frozen=True, eq=False)
class Measure:
    kind: str
    x: np.ndarray
    w: np.ndarray
    K: float
    raw_mass: float | None = field(default=None)

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=float)
        w = np.ascontiguousarray(self.w, dtype=float)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)
        x.setflags(write=False)
        w.setflags(write=False)
        if self.kind not in ("atoms", "grid"):
            raise ValueError(f"unknown measure kind {self.kind!r}")
        if x.ndim != 1 or x.shape != w.shape or x.size == 0:
            raise ValueError("locations and weights must be equal-length 1-d arrays")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w))):
            raise ValueError("non-finite measure data")
        if np.any(w < 0):
            raise ValueError("negative weight or density")
        if np.max(np.abs(x)) > self.K * (1 + 1e-12):
            raise ValueError("support exceeds the declared bound K")
        if self.kind == "atoms":
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"atom weights sum to {w.sum()!r}, not 1")
        else:
            if x.size < 2 or np.any(np.diff(x) <= 0):
                raise ValueError("grid points must be strictly ascending")
            if abs(_trapz(w, x) - 1.0) > 1e-9:
                raise ValueError("grid density does not integrate to 1")

    # -- constructors ----------------------------------------------------

    @classmethod
    def atoms(cls, locations, weights=None, K=None) -> "Measure":
        loc = np.asarray(locations, dtype=float).ravel()
        if weights is None:
            wt = np.full(loc.size, 1.0 / loc.size)
        else:
            wt = np.asarray(weights, dtype=float).ravel()
            wt = wt / wt.sum()
        order = np.argsort(loc, kind="stable")
        loc, wt = loc[order], wt[order]
        # merge coincident atoms so degenerate inputs are recognised
        uniq, inv = np.unique(loc, return_inverse=True)
        if uniq.size < loc.size:
            wt = np.bincount(inv, weights=wt)
            loc = uniq
        return cls("atoms", loc, wt, _default_K(loc, K))

    @classmethod
    def grid(cls, points, density, K=None, normalize=True) -> "Measure":
        pts = np.asarray(points, dtype=float).ravel()
        dens = np.clip(np.asarray(density, dtype=float).ravel(), 0.0, None)
        mass = _trapz(dens, pts)
        if normalize:
            if mass <= 0:
                raise ValueError("density has zero mass")
            dens = dens / mass
        return cls("grid", pts, dens, _default_K(pts, K))

    # -- basic queries ---------------------------------------------------

    @property
    def is_point_mass(self) -> bool:
        return self.kind == "atoms" and self.x.size == 1

    @property
    def support(self) -> tuple[float, float]:
        if self.kind == "atoms":
            return float(self.x[0]), float(self.x[-1])
        nz = np.nonzero(self.w > 0)[0]
        lo = max(nz[0] - 1, 0)
        hi = min(nz[-1] + 1, self.x.size - 1)
        return float(self.x[lo]), float(self.x[hi])

    def moment(self, k: int) -> float:
        if self.kind == "atoms":
            return float(np.sum(self.w * self.x**k))
        return float(_trapz(self.w * self.x**k, self.x))

    def cdf(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "atoms":
            cw = np.concatenate([[0.0], np.cumsum(self.w)])
            return cw[np.searchsorted(self.x, s, side="right")]
        F = self._grid_cdf()
        k = np.clip(np.searchsorted(self.x, s, side="right") - 1, 0, self.x.size - 2)
        x0, x1 = self.x[k], self.x[k + 1]
        r0, r1 = self.w[k], self.w[k + 1]
        u = np.clip(s - x0, 0.0, x1 - x0)
        slope = (r1 - r0) / (x1 - x0)
        val = F[k] + r0 * u + 0.5 * slope * u**2
        val = np.where(s < self.x[0], 0.0, val)
        return np.where(s >= self.x[-1], F[-1], val)

    def mass_in(self, lo, hi):
        """Mass of the closed interval [lo, hi] (vectorised).

        Grid masses are accumulated from the nearer tail so that tiny windows
        at either edge keep full relative precision.
        """
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if self.kind == "atoms":
            cw = np.concatenate([[0.0], np.cumsum(self.w)])
            return cw[np.searchsorted(self.x, hi, side="right")] - cw[np.searchsorted(self.x, lo, side="left")]
        left = self.cdf(hi) - self.cdf(lo)
        right = self.sf(lo) - self.sf(hi)
        return np.clip(np.where(self.cdf(lo) < 0.5, left, right), 0.0, None)

    def sf(self, s):
        """Mass of (s, inf) for grid measures, computed from the right tail."""
        s = np.asarray(s, dtype=float)
        seg = 0.5 * (self.w[1:] + self.w[:-1]) * np.diff(self.x)
        S = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
        k = np.clip(np.searchsorted(self.x, s, side="right") - 1, 0, self.x.size - 2)
        x0, x1 = self.x[k], self.x[k + 1]
        r0, r1 = self.w[k], self.w[k + 1]
        v = np.clip(x1 - s, 0.0, x1 - x0)
        slope = (r1 - r0) / (x1 - x0)
        val = S[k + 1] + r1 * v - 0.5 * slope * v**2
        val = np.where(s < self.x[0], S[0], val)
        return np.where(s >= self.x[-1], 0.0, val)

    def density_at(self, s):
        if self.kind != "grid":
            raise TypeError("atomic measures have no density")
        return np.interp(s, self.x, self.w, left=0.0, right=0.0)

    def shifted(self, a: float) -> "Measure":
        return Measure(self.kind, self.x + a, self.w, self.K + abs(a))

    def _grid_cdf(self):
        seg = 0.5 * (self.w[1:] + self.w[:-1]) * np.diff(self.x)
        return np.concatenate([[0.0], np.cumsum(seg)])

    # -- serialisation ---------------------------------------------------

    def save(self, path) -> None:
        cols = "location,weight" if self.kind == "atoms" else "point,density"
        lines = [f"kind={self.kind}", f"K={self.K!r}", cols]
        lines += [f"{a!r},{b!r}" for a, b in zip(self.x.tolist(), self.w.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Measure":
        rows = Path(path).read_text().splitlines()
        head = {}
        body_start = None
        for n, line in enumerate(rows):
            line = line.strip()
            if not line:
                continue
            if "=" in line:
                key, val = line.split("=", 1)
                head[key.strip()] = val.strip()
            else:
                body_start = n + 1  # skip the column header
                break
        if "kind" not in head or "K" not in head or body_start is None:
            raise ValueError(f"{path}: expected kind=, K= and a CSV body")
        data = np.array(
            [[float(v) for v in r.split(",")] for r in rows[body_start:] if r.strip()],
            dtype=float,
        )
        K = float(head["K"])
        if head["kind"] == "atoms":
            return cls("atoms", data[:, 0], data[:, 1] / data[:, 1].sum(), K)
        return cls.grid(data[:, 0], data[:, 1], K=K)


def _trapz(y, x):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def _default_K(x, K):
    bound = float(np.max(np.abs(x)))
    return bound if K is None else max(float(K), bound)


# -- standard measures ----------------------------------------------------


def delta(a: float = 0.0) -> Measure:
    return Measure.atoms([a])


def bernoulli(a: float = 1.0) -> Measure:
    """Symmetric two-point law (delta_{-a} + delta_a) / 2."""
    return Measure.atoms([-a, a])


def edge_refined_grid(lo: float, hi: float, n: int, depth: int = 40) -> np.ndarray:
    """Uniform grid on [lo, hi] with geometric refinement towards both ends.

    The refinement keeps the piecewise-linear interpolant faithful to
    square-root edges down to scales (hi - lo) * 2**-depth.
    """
    base = np.linspace(lo, hi, n)
    step = (hi - lo) / (n - 1)
    geo = step * 2.0 ** -np.arange(1, depth + 1)
    pts = np.concatenate([base, lo + geo, hi - geo])
    return np.unique(pts)


def semicircle(variance: float = 1.0, n: int = 2001) -> Measure:
    r = 2.0 * np.sqrt(variance)
    x = edge_refined_grid(-r, r, n)
    dens = np.sqrt(np.clip(r * r - x * x, 0.0, None)) / (2 * np.pi * variance)
    return Measure.grid(x, dens, K=r)


def semicircle_density(E, variance: float = 1.0):
    E = np.asarray(E, dtype=float)
    return np.sqrt(np.clip(4 * variance - E * E, 0.0, None)) / (2 * np.pi * variance)


def semicircle_stieltjes(z, variance: float = 1.0):
    """Closed form m(z) = (-z + sqrt(z^2 - 4v)) / (2v) on the Nevanlinna branch."""
    z = np.asarray(z, dtype=complex)
    s = np.sqrt(z - 2 * np.sqrt(variance)) * np.sqrt(z + 2 * np.sqrt(variance))
    m = (-z + s) / (2 * variance)
    # the product of principal roots is the branch with s ~ z at infinity,
    # which is the one mapping C+ to C+
    return m


def uniform(lo: float = 0.0, hi: float = 1.0, n: int = 1001) -> Measure:
    x = np.linspace(lo, hi, n)
    return Measure.grid(x, np.ones_like(x))


# -- Stieltjes transform --------------------------------------------------


def _check_upper(z):
    z = np.asarray(z, dtype=complex)
    if np.any(z.imag <= 0):
        raise ValueError("Stieltjes transform requires Im z > 0")
    return z


def stieltjes(m: Measure, z, derivative: bool = False):
    """Return int dmu(x) / (x - z) for Im z > 0 (and its z-derivative if asked).

    Grid measures are integrated exactly against the piecewise-linear density,
    which stays accurate close to the real axis.
    """
    z = _check_upper(z)
    shape = z.shape
    zf = z.ravel()
    out = np.empty(zf.size, dtype=complex)
    der = np.empty(zf.size, dtype=complex) if derivative else None
    npts = m.x.size
    step = max(1, _CHUNK // npts)
    for s in range(0, zf.size, step):
        zz = zf[s : s + step, None]
        if m.kind == "atoms":
            inv = 1.0 / (m.x[None, :] - zz)
            out[s : s + step] = inv @ m.w
            if derivative:
                der[s : s + step] = (inv * inv) @ m.w
        else:
            v, d = _grid_stieltjes(m.x, m.w, zz, derivative)
            out[s : s + step] = v
            if derivative:
                der[s : s + step] = d
    if derivative:
        return out.reshape(shape), der.reshape(shape)
    return out.reshape(shape)


def _segment_logs(x, zz):
    """log(x_{k+1} - z) - log(x_k - z) for all segments, from real arithmetic.

    With a_k = x_k - Re z and eta = Im z, the modulus part is
    0.5 log(|a_{k+1} - i eta|^2 / |a_k - i eta|^2) and the angle part is
    atan2(eta h_k, a_k a_{k+1} + eta^2); both avoid cancellation.
    Returns (2 * modulus part, angle part).
    """
    h = np.diff(x)
    a = x[None, :] - zz.real
    eta2 = zz.imag ** 2
    q = a * a
    q += eta2
    s = a[:, :-1] + a[:, 1:]
    s *= h
    s /= q[:, :-1]
    bad = s < -0.5  # |x_{k+1} - z| much smaller than |x_k - z|: log1p is ill-conditioned
    re = np.log1p(s, out=s)
    if np.any(bad):
        r, c = np.nonzero(bad)
        re[r, c] = np.log(q[r, c + 1] / q[r, c])
    den = a[:, :-1] * a[:, 1:]
    den += eta2
    im = np.arctan2(zz.imag * h, den, out=den)
    return re, im


def _grid_stieltjes(x, rho, zz, derivative):
    h = np.diff(x)
    slope = np.diff(rho) / h
    re, im = _segment_logs(x, zz)
    # int_seg rho/(x-z) = (rho_k + slope_k (z - x_k)) * dlog_k + slope_k h_k
    c = rho[:-1] - slope * x[:-1]
    ds = 0.5 * (re @ slope) + 1j * (im @ slope)
    val = 0.5 * (re @ c) + 1j * (im @ c) + zz[:, 0] * ds + np.sum(slope * h)
    if not derivative:
        return val, None
    # by parts: int rho/(x-z)^2 = sum slope*dlog + rho_0/(x_0-z) - rho_P/(x_P-z)
    dx0 = x[0] - zz[:, 0]
    dxP = x[-1] - zz[:, 0]
    d = ds + rho[0] / dx0 - rho[-1] / dxP
    return val, d


# -- quantiles ------------------------------------------------------------


def quantiles(m: Measure, N: int) -> np.ndarray:
    """k-th N-quantiles inf{s : mu((-inf, s]) >= k/N}, k = 1..N."""
    if N < 1:
        raise ValueError("N must be positive")
    q = np.arange(1, N + 1) / N
    return quantile_function(m, q)


def quantile_function(m: Measure, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    tol = 1e-12
    if m.kind == "atoms":
        cw = np.cumsum(m.w)
        idx = np.searchsorted(cw, q - tol, side="left")
        return m.x[np.minimum(idx, m.x.size - 1)]
    F = m._grid_cdf()
    F = F / F[-1]
    k = np.searchsorted(F, q - tol, side="left")  # first node with F >= q
    k = np.clip(k, 1, m.x.size - 1)
    x0, x1 = m.x[k - 1], m.x[k]
    r0, r1 = m.w[k - 1], m.w[k]
    target = np.clip(q - F[k - 1], 0.0, None)
    a = 0.5 * (r1 - r0) / (x1 - x0)
    # solve a u^2 + r0 u = target on [0, x1 - x0] in cancellation-free form
    disc = np.sqrt(np.clip(r0 * r0 + 4 * a * target, 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(r0 + disc > 0, 2 * target / (r0 + disc), 0.0)
    u = np.clip(u, 0.0, x1 - x0)
    out = x0 + u
    # q = 0 or zero-mass tails: snap to the first node reaching the level
    exact = F[k] <= q + tol
    out = np.where(exact & (target >= F[k] - F[k - 1] - tol), x1, out)
    # the full-mass quantile is the upper end of the support exactly
    return np.where(q >= 1.0 - tol, m.support[1], out)


# -- standing assumptions -------------------------------------------------


@dataclass(frozen=True)
class AssumptionReport:
    bounded: bool
    edge_constant: float | None
    edge_delta0: float | None
    quantile_gap_ok: bool
    notes: str


def edge_constant(m: Measure, delta0: float, n_xi: int = 1000, n_h: int = 20, span: float = 1e-6) -> float:
    """Largest c with mu([xi-h, xi+h]) >= h^(2-c) over the sampled (xi, h).

    xi runs over the n_xi-quantiles of m, h over n_h log-spaced values in
    [span * delta0, delta0]. Returns -inf when some sampled window is empty.
    """
    if m.kind != "grid":
        return -np.inf
    xi = quantiles(m, n_xi)
    hs = np.geomspace(span * delta0, delta0, n_h)
    mass = m.mass_in(xi[:, None] - hs[None, :], xi[:, None] + hs[None, :])
    if np.any(mass <= 0):
        return -np.inf
    lh = np.log(hs)[None, :]
    if np.any(hs >= 1):
        # at h >= 1 the bound cannot be met by lowering c unless mass >= h^2
        big = hs >= 1
        if np.any(mass[:, big] < hs[big] ** 2):
            return -np.inf
        mass, lh = mass[:, ~big], lh[:, ~big]
    return float(np.min(2.0 - np.log(mass) / lh))


def certify_edge(m: Measure, c: float, delta0: float, **kw) -> bool:
    return edge_constant(m, delta0, **kw) >= c


def stieltjes_bounded(m: Measure, K: float | None = None) -> bool:
    """Sampled check that |m(E + i eta)| stays bounded as eta decreases."""
    K = m.K if K is None else K
    E = np.linspace(-K - 1, K + 1, 801)
    coarse = np.max(np.abs(stieltjes(m, E + 1e-2j)))
    fine = np.max(np.abs(stieltjes(m, E + 1e-6j)))
    return bool(fine - coarse <= 1.0)


def check_assumptions(m1: Measure, m2: Measure, delta0_candidates=None, n_quantiles: int = 1000) -> AssumptionReport:
    if delta0_candidates is None:
        # windows below ~1e-13 are not resolvable around O(1) locations
        delta0_candidates = [10.0**-k for k in range(0, 8)]
    notes = []
    bounded = stieltjes_bounded(m1) or stieltjes_bounded(m2)
    if not bounded:
        notes.append("neither measure has a bounded Stieltjes transform on the test grid")

    best_c, best_d = None, None
    if m2.kind != "grid":
        notes.append("mu2 has no density; edge behaviour fails")
    else:
        for d0 in delta0_candidates:
            c = edge_constant(m2, d0)
            if c > 0 and (best_c is None or c > best_c):
                best_c, best_d = c, d0
        if best_c is None:
            notes.append("no sampled (c, delta0) satisfied the edge bound")

    gap_ok = False
    if m2.kind == "grid":
        y = quantiles(m2, n_quantiles)
        rho_max = float(np.max(m2.w))
        k = np.arange(n_quantiles)
        lower = np.abs(k[:, None] - k[None, :]) / (rho_max * n_quantiles)
        gap_ok = bool(np.all(np.abs(y[:, None] - y[None, :]) >= lower * (1 - 1e-6) - 1e-12))
    if not gap_ok:
        notes.append("quantile spacing lower bound violated")
    return AssumptionReport(bounded, best_c, best_d, gap_ok, "; ".join(notes))


# -- Stieltjes inversion ----------------------------------------------------


def density_from_stieltjes(evaluate, grid, eta0: float, tol: float = 0.05) -> Measure:
    """Density Im s(E + i eta0) / pi on the grid, clipped and renormalised.

    The pre-normalisation mass is kept in ``raw_mass``; a warning is issued
    when it is off by more than ``tol``.
    """
    if eta0 <= 0:
        raise ValueError("eta0 must be positive")
    grid = np.asarray(grid, dtype=float)
    z = grid + 1j * eta0
    try:
        vals = np.asarray(evaluate(z), dtype=complex)
        if vals.shape != z.shape:
            vals = np.broadcast_to(vals, z.shape)
    except (TypeError, ValueError):
        vals = np.array([complex(evaluate(zz)) for zz in z])
    dens = np.clip(vals.imag / np.pi, 0.0, None)
    raw = _trapz(dens, grid)
    if abs(raw - 1.0) > tol:
        msg = f"inverted density has mass {raw:.4f} before renormalisation"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        log.warning(msg)
    m = Measure.grid(grid, dens)
    object.__setattr__(m, "raw_mass", raw)
    return m
