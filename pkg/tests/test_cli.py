import json
import os

import numpy as np
import pytest

from freedbm import acceptance, cli, seeding
from freedbm.acceptance import CriterionResult
from freedbm.measures import semicircle_density


def write(path, text):
    path.write_text(text)
    return str(path)


def test_freeconv_semicircles(tmp_path):
    cfg = write(tmp_path / "f.ini", "[ensemble]\nx = semicircle\ny = semicircle\n[grid]\nlo = -3\nhi = 3\nn = 601\n")
    out = tmp_path / "out"
    assert cli.main(["freeconv", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    E, d = np.loadtxt(out / "density.csv", delimiter=",", skiprows=1, unpack=True)
    inner = np.abs(E) <= 2.7
    assert np.max(np.abs(d - semicircle_density(E, 2.0))[inner]) <= 5e-3
    assert (out / "density.svg").read_text().startswith("<svg")
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "freeconv" and man["version"] and man["config"]["grid"]["n"] == 601
    assert sorted(os.listdir(out)) == ["density.csv", "density.svg", "manifest.json", "summary.json"]


def test_sample_is_byte_identical(tmp_path):
    cfg = write(tmp_path / "s.ini", "[run]\nseed = 11\n[ensemble]\nN = 4\n[sample]\ntrials = 2\n")
    for d in ("a", "b"):
        assert cli.main(["sample", "--config", cfg, "--out", str(tmp_path / d), "--quiet"]) == 0
    for name in ("spectrum_000.csv", "spectrum_001.csv", "ks.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = (tmp_path / "a" / "spectrum_000.csv").read_text().splitlines()
    assert rows[0] == "index,eigenvalue" and len(rows) == 5


def test_thread_count_does_not_change_outputs(tmp_path):
    cfg = write(tmp_path / "s.ini", "[ensemble]\nN = 12\n[diffusion]\ntrials = 3\nsteps = 5\n")
    for th, d in ((1, "a"), (3, "b")):
        assert cli.main(["diffuse", "--config", cfg, "--out", str(tmp_path / d), "--threads", str(th),
                         "--quiet"]) == 0
    for name in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("text, needle", [
    ("[ensemble]\nN = 10\nbogus = 3\n", ":3: unknown key 'bogus'"),
    ("[ensemble]\nN = 10\n[nope]\nx = 1\n", ":3: unknown section [nope]"),
    ("[ensemble]\nN = ten\n", ":2: bad value for ensemble.n"),
    ("[ensemble]\nN = 10\nb = 0.5\n", "b must lie in"),
    ("[ensemble]\nx = lorentz\n", "unknown measure"),
    ("[diffusion]\nretraction = cayley\n", ":2: diffusion.retraction must be one of"),
    ("[sample]\n\ntrials = 0\n", ":3: sample.trials must be positive"),
    ("[accept]\ncriteria = 1, 12\n", "unknown criteria [12]"),
    ("no section header\n", "f.ini"),
])
def test_config_errors(tmp_path, capsys, text, needle):
    cfg = write(tmp_path / "f.ini", text)
    cmd = "accept" if "accept" in text else "sample"
    assert cli.main([cmd, "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 1
    assert needle in capsys.readouterr().err
    assert not (tmp_path / "o").exists() or os.listdir(tmp_path / "o") == []


def test_missing_config(tmp_path):
    assert cli.main(["sample", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path / "o")]) == 1


def test_scientific_notation_accepted(tmp_path):
    cfg = cli.load_config(write(tmp_path / "f.ini", "[ensemble]\nN = 1e2\nepsilon_reg = 1E-9\n[grid]\neta0 = 2.5e-4\n"))
    assert cfg["ensemble"]["n"] == 100 and cfg["ensemble"]["epsilon_reg"] == 1e-9 and cfg["grid"]["eta0"] == 2.5e-4


def test_measure_specs(tmp_path):
    assert cli.parse_measure("semicircle:2").K == pytest.approx(2 * np.sqrt(2))
    assert cli.parse_measure("uniform:-1:3").support == (-1.0, 3.0)
    assert cli.parse_measure("delta:0.5").x.tolist() == [0.5]
    assert cli.parse_measure("bernoulli").x.tolist() == [-1.0, 1.0]
    m = cli.parse_measure("semicircle")
    m.save(tmp_path / "m.csv")
    back = cli.parse_measure(f"file:{tmp_path / 'm.csv'}")
    assert np.array_equal(back.x, m.x)
    with pytest.raises(cli.ConfigError):
        cli.parse_measure("uniform:a:b")


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = write(tmp_path / "s.ini", "[run]\nseed = 3\n[ensemble]\nN = 4\n[sample]\ntrials = 1\n")

    def seed_of(args):
        out = tmp_path / f"o{len(os.listdir(tmp_path))}"
        assert cli.main(["sample", "--config", cfg, "--out", str(out), "--quiet"] + args) == 0
        return json.loads((out / "manifest.json").read_text())["config"]["run"]["seed"]

    assert seed_of([]) == 3
    monkeypatch.setenv(cli.SEED_ENV, "17")
    assert seed_of([]) == 17
    assert seed_of(["--seed", "5"]) == 5
    monkeypatch.setenv(cli.SEED_ENV, "x")
    assert cli.main(["sample", "--config", cfg, "--out", str(tmp_path / "bad"), "--quiet"]) == 1


def test_numeric_failure_removes_partial_outputs(tmp_path, monkeypatch):
    cfg = write(tmp_path / "s.ini", "[ensemble]\nN = 6\n[sample]\ntrials = 2\n")
    out = tmp_path / "o"

    def boom(*a, **k):
        raise FloatingPointError("synthetic failure")

    monkeypatch.setattr(cli, "limit_density", boom)
    assert cli.main(["sample", "--config", cfg, "--out", str(out), "--quiet"]) == 2
    assert os.listdir(out) == []


def test_writes_stay_inside_output_dir(tmp_path, monkeypatch):
    cfg = write(tmp_path / "s.ini", "[ensemble]\nN = 20\n[coupling]\nmode = synthetic\ntrials = 1\nsteps = 5\n")
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    assert cli.main(["couple", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 0
    assert os.listdir(work) == []
    assert sorted(os.listdir(tmp_path)) == ["cwd", "o", "s.ini"]
    agg = json.loads((tmp_path / "o" / "aggregate.json").read_text())
    assert agg["trials"] == 1 and agg["mode"] == "synthetic"


def test_locallaw_and_stats_commands(tmp_path):
    cfg = write(tmp_path / "s.ini", "[ensemble]\nN = 60\n[locallaw]\ntrials = 2\nE = 0, 0.5\neta = 1, 0.1\n"
                "[stats]\ntrials = 5\nmingap_trials = 300\n")
    assert cli.main(["locallaw", "--config", cfg, "--out", str(tmp_path / "l"), "--quiet"]) == 0
    summ = json.loads((tmp_path / "l" / "summary.json").read_text())
    assert len(summ["grid"]) == 4 and all(g["valid"] == 2 for g in summ["grid"])
    assert cli.main(["stats", "--config", cfg, "--out", str(tmp_path / "s"), "--quiet"]) == 0
    rep = json.loads((tmp_path / "s" / "report.json").read_text())
    assert rep["metadata"]["trials"] == 5 and "seed" in rep["metadata"]
    assert {"gaps.svg", "correlation.svg", "mingap.csv"} <= set(os.listdir(tmp_path / "s"))


def test_accept_exit_codes(tmp_path, monkeypatch, capsys):
    cfg = write(tmp_path / "a.ini", "[accept]\ncriteria = 1, 2\n")
    ok = lambda m, t: CriterionResult(1, "stub", True, {"x": 1.0}, "x", 0.0)
    bad = lambda m, t: CriterionResult(2, "stub", False, {"x": 2.0}, "x", 0.0)
    monkeypatch.setitem(acceptance.CRITERIA, 1, ok)
    monkeypatch.setitem(acceptance.CRITERIA, 2, ok)
    assert cli.main(["accept", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert "[PASS]" in capsys.readouterr().out
    monkeypatch.setitem(acceptance.CRITERIA, 2, bad)
    assert cli.main(["accept", "--config", cfg, "--out", str(tmp_path / "b")]) == 3
    res = json.loads((tmp_path / "b" / "acceptance.json").read_text())
    assert [r["passed"] for r in res] == [True, False]


def test_trial_streams_independent_of_order_and_threads():
    fn = lambda k, rng: float(rng.standard_normal())
    a = seeding.run_trials(fn, 42, "x", 8)
    b = seeding.run_trials(fn, 42, "x", 8, threads=4)
    c = seeding.run_trials(fn, 42, "x", 3)
    assert a == b and a[:3] == c
    assert seeding.trial_rng(42, "x", 5).standard_normal() == a[5]
    assert seeding.run_trials(fn, 42, "y", 1) != a[:1]
