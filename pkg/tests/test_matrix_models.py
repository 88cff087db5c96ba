import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from freedbm.matrix_models import (EnsembleConfig, assemble_H, assemble_tildeH, eigh, gaussian_hermitian, green_diag,
                                   overlaps, regularize, resolvent, sample_H, sample_haar, window_mask,
                                   write_overlaps_csv, write_spectrum_csv)
from freedbm.measures import semicircle
from freedbm.subordination import free_convolution


def test_config_validation():
    assert EnsembleConfig(100).T == pytest.approx(100 ** (-1 + 0.002))
    for kw in ({"N": 1}, {"N": 10, "beta": 4}, {"N": 10, "a": 1.2}, {"N": 10, "b": 0.01},
               {"N": 10, "epsilon_reg": -1}):
        with pytest.raises(ValueError):
            EnsembleConfig(**kw)
    cfg = EnsembleConfig(4, x_spec=[3.0, 1.0, 2.0, 0.0])
    assert np.array_equal(cfg.x(), [0.0, 1.0, 2.0, 3.0]) and np.array_equal(cfg.y(), np.zeros(4))


@pytest.mark.parametrize("beta", [1, 2])
def test_haar_unitary(beta):
    rng = np.random.default_rng(1)
    for N in (1, 5, 40):
        U = sample_haar(N, beta, rng)
        assert np.max(np.abs(U.conj().T @ U - np.eye(N))) <= 1e-10


def test_haar_phase_uniform():
    rng = np.random.default_rng(2)
    ph = np.array([np.angle(sample_haar(1, 2, rng)[0, 0]) for _ in range(10_000)])
    assert stats.kstest(ph, stats.uniform(-np.pi, 2 * np.pi).cdf).statistic <= 0.02


def test_haar_trace_moment():
    rng = np.random.default_rng(3)
    tr = np.array([abs(np.trace(sample_haar(20, 2, rng))) ** 2 for _ in range(10_000)])
    assert 0.9 <= tr.mean() <= 1.1


@pytest.mark.parametrize("beta", [1, 2])
def test_gaussian_variances(beta):
    rng = np.random.default_rng(4)
    Q = np.array([gaussian_hermitian(3, beta, rng, 0.7) for _ in range(20_000)])
    assert np.allclose(Q, np.conj(np.swapaxes(Q, 1, 2)))
    diag = np.mean(np.abs(Q[:, 0, 0]) ** 2)
    off = np.mean(np.abs(Q[:, 0, 1]) ** 2)
    assert diag == pytest.approx(0.7, rel=0.05)
    assert off == pytest.approx(0.7 if beta == 2 else 0.35, rel=0.05)


def test_regularize_examples():
    rng = np.random.default_rng(5)
    x = np.array([0.0, 1.0, 1.0, 2.0])
    assert np.array_equal(regularize(x, 0.0, rng), np.diag(x))
    for _ in range(50):
        M = regularize(x, 1e-3, rng)
        Q = (M - np.diag(x)) / 1e-3
        lam = np.linalg.eigvalsh(M)
        assert np.max(np.abs(lam - x)) <= 1e-3 * np.linalg.norm(Q, 2) + 1e-15


@pytest.mark.parametrize("beta", [1, 2])
def test_regularize_separates_levels(beta):
    rng = np.random.default_rng(6)
    for _ in range(1000):
        lam = np.linalg.eigvalsh(regularize(np.zeros(10), 1e-8, rng, beta))
        assert np.min(np.diff(lam)) > 0


def test_assemble_examples():
    rng = np.random.default_rng(7)
    N = 30
    y = rng.normal(size=N)
    V = sample_haar(N, 2, rng)
    assert np.array_equal(assemble_H(np.zeros(N), y, V, np.eye(N)), np.diag(y).astype(complex))
    x = rng.normal(size=N)
    U = sample_haar(N, 2, rng)
    H = assemble_H(x, y, V, U)
    assert np.max(np.abs(H - H.conj().T)) <= 1e-12
    assert np.linalg.norm(H, 2) <= np.max(np.abs(x)) + np.max(np.abs(y)) + 1e-12
    W = sample_haar(N, 2, rng)
    lam = np.linalg.eigvalsh(H)
    assert np.allclose(lam, np.linalg.eigvalsh(W.conj().T @ H @ W), atol=1e-12)
    Ht = assemble_tildeH(x, y, V, U, 0.0, 0.5, y)
    assert np.allclose(Ht - H, np.diag(0.5 * y))
    with pytest.raises(ValueError):
        assemble_H(x[:-1], y, V, U)


def test_esd_matches_free_convolution():
    cfg = EnsembleConfig(500, x_spec=semicircle(), y_spec=semicircle())
    lam = np.linalg.eigvalsh(sample_H(cfg, np.random.default_rng(8)))
    mu = free_convolution(semicircle(), semicircle(), np.linspace(-3.5, 3.5, 1401))
    assert stats.kstest(lam, mu.cdf).statistic <= 0.05


def test_eigh_examples():
    es = eigh(np.diag([3.0, 1.0, 2.0]))
    assert np.array_equal(es.values, [1.0, 2.0, 3.0])
    assert np.array_equal(np.abs(es.vectors), np.eye(3)[:, [1, 2, 0]])
    es = eigh(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.allclose(es.values, [-1, 1])
    assert np.allclose(es.vectors[:, 0], [1 / np.sqrt(2), -1 / np.sqrt(2)])
    assert np.allclose(es.vectors[:, 1], [1 / np.sqrt(2), 1 / np.sqrt(2)])
    with pytest.raises(ValueError):
        eigh(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        es.values[0] = 5.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(0, 10**6), st.sampled_from([1, 2]))
def test_eigh_reconstruction_and_sign_convention(N, seed, beta):
    rng = np.random.default_rng(seed)
    A = gaussian_hermitian(N, beta, rng) * rng.uniform(0.1, 100)
    es = eigh(A)
    Q = es.vectors
    assert np.all(np.diff(es.values) >= 0)
    assert np.max(np.abs(A - (Q * es.values) @ Q.conj().T)) <= 1e-9 * max(1.0, np.max(np.abs(A)))
    assert np.max(np.abs(Q.conj().T @ Q - np.eye(N))) <= 1e-10
    first = np.argmax(np.abs(Q) > 1e-12, axis=0)
    assert np.all(Q[first, np.arange(N)].real >= 0)


def test_green_examples():
    es = eigh(np.zeros((5, 5)))
    assert np.allclose(green_diag(es, 1j), 1j)
    y = np.array([-1.0, 0.3, 2.0])
    assert np.allclose(green_diag(eigh(np.diag(y)), 0.2 + 0.1j), 1 / (y - 0.2 - 0.1j), atol=1e-15)
    with pytest.raises(ValueError):
        green_diag(es, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 25), st.integers(0, 10**6), st.floats(-3, 3), st.floats(1e-3, 3))
def test_green_identities(N, seed, E, eta):
    rng = np.random.default_rng(seed)
    H = gaussian_hermitian(N, 2, rng, 1.0 / N)
    es = eigh(H)
    z = complex(E, eta)
    G = green_diag(es, z)
    assert np.sum(G) == pytest.approx(np.sum(1 / (es.values - z)), abs=1e-10 * max(1, np.abs(G).max()))
    c = (np.linalg.norm(H, 2) + abs(z)) ** -2
    assert np.all(G.imag >= c * eta * (1 - 1e-9))
    R = resolvent(es, z)
    direct = np.linalg.inv(H - z * np.eye(N))
    assert np.allclose(R, direct, atol=1e-8 * np.abs(direct).max())
    # Ward identity
    assert np.allclose(np.sum(np.abs(R) ** 2, axis=1), R.diagonal().imag / eta, rtol=1e-8)


def test_overlap_examples():
    N, a = 30, 0.4
    perm = np.random.default_rng(9).permutation(N)
    d = np.zeros(N)
    d[perm] = np.arange(N)  # the k-th smallest eigenvalue sits at index perm[k]
    t = overlaps(np.eye(N), eigh(np.diag(d)), a)
    expect = (np.abs(np.subtract.outer(perm, perm)) < N**a).astype(float)
    assert np.array_equal(t.gamma, expect)
    rng = np.random.default_rng(10)
    U = sample_haar(N, 2, rng)
    t = overlaps(U, eigh(gaussian_hermitian(N, 2, rng)), a)
    assert np.allclose(np.sum(np.abs(t.w) ** 2, axis=0), 1, atol=1e-10)
    assert np.allclose(t.gamma, t.gamma.T) and t.gamma.min() >= 0 and t.gamma.max() <= 1


def test_window_mask():
    m = window_mask(10, 0.5)  # N^a = 3.16
    assert m[0, 3] and not m[0, 4] and m.diagonal().all()


def test_spectrum_invariant_under_right_translation():
    rng = np.random.default_rng(11)
    N, trials = 40, 50
    x = np.linspace(-1, 1, N)
    y = np.sin(np.arange(N))
    W = sample_haar(N, 2, np.random.default_rng(99))
    a, b = [], []
    for _ in range(trials):
        V, U = sample_haar(N, 2, rng), sample_haar(N, 2, rng)
        a.append(np.linalg.eigvalsh(assemble_H(x, y, V, U)))
        V, U = sample_haar(N, 2, rng), sample_haar(N, 2, rng)
        b.append(np.linalg.eigvalsh(assemble_H(x, y, V @ W, U @ W)))
    assert stats.ks_2samp(np.concatenate(a), np.concatenate(b)).pvalue > 1e-3


def test_csv_writers(tmp_path):
    write_spectrum_csv(tmp_path / "s.csv", [0.5, 1.25])
    assert (tmp_path / "s.csv").read_text().splitlines() == ["index,eigenvalue", "0,0.5", "1,1.25"]
    t = overlaps(np.eye(3), eigh(np.diag([0.0, 1.0, 2.0])), 0.01)
    write_overlaps_csv(tmp_path / "o.csv", t)
    # N^a > 1 for every a > 0, so neighbours always share the band
    rows = (tmp_path / "o.csv").read_text().splitlines()[1:]
    assert rows == ["0,0,1.0", "0,1,1.0", "1,0,1.0", "1,1,1.0", "1,2,1.0", "2,1,1.0", "2,2,1.0"]
