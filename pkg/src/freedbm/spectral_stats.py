"""Spectral statistics: unfolded gaps, pair correlation, local law, rigidity, level repulsion."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special, stats

from .matrix_models import EigenSystem, green_diag

log = logging.getLogger(__name__)


# -- gaps ---------------------------------------------------------------------------


def _values(e):
    return np.asarray(e.values if isinstance(e, EigenSystem) else e, dtype=float)


def default_window(N: int) -> int:
    return max(2, int(math.floor(N ** 0.3)))


def unfold_gaps(eigs, rho, E: float, window_k: int | None = None) -> np.ndarray:
    """Pooled s = N rho(E) (lam_{i+1} - lam_i) over the window_k levels nearest E.

    ``rho`` is the density value at E or a callable evaluated there.
    """
    r = float(rho(E)) if callable(rho) else float(rho)
    if r <= 0:
        raise ValueError("rho(E) must be positive")
    out = []
    for e in eigs:
        lam = np.sort(_values(e))
        N = lam.size
        k = default_window(N) if window_k is None else int(window_k)
        k = min(k, N)
        if k < 2:
            raise ValueError("empty window")
        near = np.sort(lam[np.argsort(np.abs(lam - E), kind="stable")[:k]])
        out.append(N * r * np.diff(near))
    if not out:
        raise ValueError("empty window")
    return np.concatenate(out)


def surmise_pdf(beta: int, s):
    s = np.asarray(s, dtype=float)
    if beta == 2:
        return (32 / np.pi ** 2) * s ** 2 * np.exp(-4 * s ** 2 / np.pi)
    if beta == 1:
        return (np.pi / 2) * s * np.exp(-np.pi * s ** 2 / 4)
    raise ValueError("beta must be 1 or 2")


def reference_spacing_cdf(beta: int, s):
    """CDF of the Wigner surmise."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("s must be non-negative")
    if beta == 2:
        return special.erf(2 * s / np.sqrt(np.pi)) - (4 * s / np.pi) * np.exp(-4 * s ** 2 / np.pi)
    if beta == 1:
        return -np.expm1(-np.pi * s ** 2 / 4)
    raise ValueError("beta must be 1 or 2")


def ks_distance(samples, cdf) -> float:
    """Kolmogorov-Smirnov distance to a CDF (callable) or to a second sample."""
    x = np.asarray(samples, dtype=float)
    if x.size < 1:
        raise ValueError("need at least one sample")
    if callable(cdf):
        return float(stats.kstest(x, cdf).statistic)
    return float(stats.ks_2samp(x, np.asarray(cdf, dtype=float)).statistic)


# -- pair correlation ------------------------------------------------------------------


def sine_kernel_correlation(alpha):
    return 1.0 - np.sinc(np.asarray(alpha, dtype=float)) ** 2


@dataclass(frozen=True)
class Correlation:
    centers: np.ndarray
    values: np.ndarray
    pairs: int
    trials: int
    sufficient: bool


def correlation_estimate(eig_batches, E: float, rho: float, half_width: float = 5.0, bin_width: float = 0.25,
                         min_pairs: int = 100) -> Correlation:
    """Two-point function of alpha = N rho (lam - E) for levels with |alpha| <= half_width.

    Each difference d is normalised by the Poisson expectation
    trials * bin_width * (2 half_width - |d|), so independent levels of unit
    density give 1.
    """
    L = float(half_width)
    edges = np.arange(-L, L + 0.5 * bin_width, bin_width)
    counts = np.zeros(edges.size - 1)
    pairs = 0
    trials = 0
    for e in eig_batches:
        lam = _values(e)
        a = lam.size * rho * (lam - E)
        a = a[np.abs(a) <= L]
        trials += 1
        if a.size < 2:
            continue
        d = np.subtract.outer(a, a)
        d = d[~np.eye(a.size, dtype=bool)]
        counts += np.histogram(d, edges)[0]
        pairs += d.size
    centers = 0.5 * (edges[1:] + edges[:-1])
    norm = max(trials, 1) * bin_width * (2 * L - np.abs(centers))
    ok = pairs >= min_pairs
    if not ok:
        log.warning("correlation_estimate: only %d pairs", pairs)
    return Correlation(centers, counts / norm, pairs, trials, ok)


# -- local law ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalLawRow:
    E: float
    eta: float
    sup_error: float
    ratio: float
    valid: bool


def local_law_report(es: EigenSystem, ybar, w1, grid) -> list[LocalLawRow]:
    """sup_i |G_ii(z) - 1/(-z + ybar_i + w1(z))| on a grid of (E, eta).

    ``ybar`` holds y_i + (T - t) yhat_i; ``w1(z)`` returns the subordination
    function (or None when the solver failed, which marks the point invalid).
    """
    ybar = np.asarray(ybar, dtype=float)
    N = ybar.size
    rows = []
    for E, eta in grid:
        z = complex(E, eta)
        w = w1(z)
        if w is None or not np.isfinite(w):
            rows.append(LocalLawRow(float(E), float(eta), float("nan"), float("nan"), False))
            continue
        G = green_diag(es, z)
        err = float(np.max(np.abs(G - 1.0 / (-z + ybar + w))))
        rows.append(LocalLawRow(float(E), float(eta), err, err * math.sqrt(N * eta), True))
    return rows


# -- rigidity ------------------------------------------------------------------------------


def rigidity_report(eigs, classical, indices=None):
    """max_i |lam_i - gamma_i| over ``indices`` and the per-index profile."""
    lam = np.sort(_values(eigs))
    g = np.asarray(classical, dtype=float)
    idx = np.arange(lam.size) if indices is None else np.asarray(indices, dtype=int)
    dev = np.abs(lam[idx] - g[idx])
    return float(np.max(dev)) if dev.size else 0.0, dev


def middle_indices(N: int, frac: float = 0.6) -> np.ndarray:
    lo = int(round(N * (1 - frac) / 2))
    return np.arange(lo, N - lo)


# -- level repulsion ----------------------------------------------------------------------


@dataclass(frozen=True)
class MinGapFit:
    exponent: float
    stderr: float
    delta: np.ndarray
    prob: np.ndarray
    counts: np.ndarray


def min_gaps(spectra) -> np.ndarray:
    return np.array([np.min(np.diff(np.sort(_values(s)))) for s in spectra])


def min_gap_statistics(spectra, delta=None, min_count: int = 5) -> MinGapFit:
    """Slope of log P[min gap <= delta] against log delta.

    The default grid spans from the level with about 20 expected hits up to
    the 10% quantile of the min-gap distribution; bins with fewer than
    ``min_count`` hits are dropped.
    """
    g = np.sort(min_gaps(spectra))
    n = g.size
    if delta is None:
        lo = g[min(n - 1, max(0, 19))]
        hi = np.quantile(g, 0.1)
        delta = np.geomspace(lo, hi, 12)
    delta = np.asarray(delta, dtype=float)
    counts = np.searchsorted(g, delta, side="right")
    keep = counts >= min_count
    d, c = delta[keep], counts[keep]
    if d.size < 3:
        raise ValueError("too few populated bins for a fit")
    x, y = np.log(d), np.log(c / n)
    fit = stats.linregress(x, y)
    return MinGapFit(float(fit.slope), float(fit.stderr), d, c / n, c)


# -- report --------------------------------------------------------------------------------


@dataclass
class StatisticsReport:
    gap_ks: float | None = None
    gap_count: int = 0
    correlation_bins: list = field(default_factory=list)
    local_law_sup_error: list = field(default_factory=list)
    rigidity_max: float | None = None
    gamma_max_bulk: float | None = None
    min_gap_exponent: float | None = None
    min_gap_stderr: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.gap_ks is not None and not 0 <= self.gap_ks <= 1:
            raise ValueError("gap_ks must lie in [0, 1]")

    def to_json(self) -> str:
        d = asdict(self)
        meta = d.pop("metadata")
        return json.dumps({"metadata": meta, **d}, indent=2, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def write_report(path, report: StatisticsReport) -> None:
    with open(path, "w") as fh:
        fh.write(report.to_json())


def write_columns_csv(path, header, *cols) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in zip(*cols):
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# -- svg ----------------------------------------------------------------------------------


def svg_plot(path, hist=None, curves=(), title="", xlabel="", ylabel="", width=480, height=320) -> None:
    """Standalone SVG with an optional histogram (edges, heights) and line curves [(x, y, label)]."""
    ml, mr, mt, mb = 56, 16, 28, 40
    xs, ys = [], [0.0]
    if hist is not None:
        edges, heights = (np.asarray(v, dtype=float) for v in hist)
        xs += [edges[0], edges[-1]]
        ys += [float(np.max(heights))]
    for x, y, _ in curves:
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        ok = np.isfinite(y)
        xs += [float(np.min(x)), float(np.max(x))]
        ys += [float(np.max(y[ok])), float(np.min(y[ok]))]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys) * 1.05 or 1.0
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw, ph = width - ml - mr, height - mt - mb

    def X(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def Y(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" style="font-family:sans-serif;font-size:11px">',
           f'<rect x="0" y="0" width="{width}" height="{height}" style="fill:#fff"/>']
    if hist is not None:
        for a, b, v in zip(edges[:-1], edges[1:], heights):
            top = Y(v)
            out.append(f'<rect x="{X(a):.2f}" y="{top:.2f}" width="{max(X(b) - X(a) - 0.5, 0.1):.2f}" '
                       f'height="{Y(y0) - top:.2f}" style="fill:#9ecae1;stroke:none"/>')
    colors = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e"]
    for k, (x, y, label) in enumerate(curves):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(x, y) if np.isfinite(b))
        col = colors[k % len(colors)]
        out.append(f'<polyline points="{pts}" style="fill:none;stroke:{col};stroke-width:1.5"/>')
        out.append(f'<text x="{width - mr - 4}" y="{mt + 14 * (k + 1)}" style="fill:{col};text-anchor:end">{_esc(label)}</text>')
    out.append(f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" style="stroke:#000"/>')
    out.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" style="stroke:#000"/>')
    for v in np.linspace(x0, x1, 5):
        out.append(f'<text x="{X(v):.2f}" y="{mt + ph + 14}" style="text-anchor:middle">{v:.3g}</text>')
    for v in np.linspace(y0, y1, 5):
        out.append(f'<text x="{ml - 4}" y="{Y(v) + 4:.2f}" style="text-anchor:end">{v:.3g}</text>')
    out.append(f'<text x="{width / 2}" y="16" style="text-anchor:middle;font-size:13px">{_esc(title)}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 8}" style="text-anchor:middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="12" y="{mt + ph / 2}" transform="rotate(-90 12 {mt + ph / 2})" '
               f'style="text-anchor:middle">{_esc(ylabel)}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
