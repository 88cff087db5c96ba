"""Command-line front end: ``freedbm <command> --config FILE --out DIR``."""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import re
import shutil
import sys
import tempfile

import numpy as np

from . import __version__, acceptance, dbm, seeding
from .matrix_models import EnsembleConfig, assemble_tildeH, eigh, overlaps, sample_H, sample_initial, write_spectrum_csv
from .measures import Measure, bernoulli, delta, quantiles, semicircle, uniform
from .spectral_stats import (StatisticsReport, correlation_estimate, ks_distance, middle_indices, min_gap_statistics,
                             reference_spacing_cdf, rigidity_report, sine_kernel_correlation, svg_plot, unfold_gaps,
                             write_columns_csv, write_report)
from .subordination import SolverConfig, free_convolution
from .unitary_diffusion import build_weights, trajectory, write_trajectory_csv

log = logging.getLogger("freedbm")

SEED_ENV = "FREEDBM_SEED"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 1, 2, 3


class ConfigError(Exception):
    pass


def _floats(s):
    return [float(v) for v in re.split(r"[,\s]+", s.strip()) if v]


def _ints(s):
    return [int(v) for v in re.split(r"[,\s]+", s.strip()) if v]


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int(s):
    v = float(s)
    if v != int(v):
        raise ValueError(f"not an integer: {s!r}")
    return int(v)


# section -> key -> (parser, default)
SCHEMA = {
    "run": {"seed": (_int, acceptance.DEFAULT_SEED), "threads": (_int, 1)},
    "ensemble": {"n": (_int, 100), "beta": (_int, 2), "x": (str, "semicircle"), "y": (str, "semicircle"),
                 "epsilon_reg": (float, 1e-8), "a": (float, 0.2), "b": (float, 0.002)},
    "solver": {"tol": (float, 1e-11), "max_iter": (_int, 50000), "damping": (float, 0.5), "eta_start": (float, 2.0),
               "continuation_steps_per_decade": (_int, 1), "newton": (_bool, True)},
    "grid": {"lo": (float, None), "hi": (float, None), "n": (_int, 1201), "eta0": (float, 1e-4)},
    "sample": {"trials": (_int, 5)},
    "diffusion": {"trials": (_int, 5), "steps": (_int, 200), "retraction": (str, "qr")},
    "coupling": {"mode": (str, "matrix"), "trials": (_int, 5), "steps": (_int, 200), "kappa": (float, 0.1),
                 "c2": (float, None)},
    "locallaw": {"trials": (_int, 5), "e": (_floats, [0.0]), "eta": (_floats, [1.0, 0.3, 0.1])},
    "stats": {"trials": (_int, 50), "e": (float, 0.0), "window_k": (_int, None), "mingap_n": (_int, 10),
              "mingap_trials": (_int, 10000), "half_width": (float, 5.0), "bin_width": (float, 0.25)},
    "accept": {"criteria": (_ints, list(range(1, 12)))},
}

COMMAND_SECTIONS = {
    "freeconv": ["run", "ensemble", "solver", "grid"],
    "sample": ["run", "ensemble", "solver", "grid", "sample"],
    "diffuse": ["run", "ensemble", "diffusion"],
    "couple": ["run", "ensemble", "solver", "grid", "coupling"],
    "locallaw": ["run", "ensemble", "locallaw"],
    "stats": ["run", "ensemble", "solver", "grid", "stats"],
    "accept": ["run", "accept"],
}


def _line_of(text, section, key=None):
    cur = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            cur = m.group(1).strip().lower()
            if key is None and cur == section:
                return n
        elif key is not None and cur == section and re.match(rf"{re.escape(key)}\s*[=:]", s, re.I):
            return n
    return 0


def load_config(path) -> dict:
    """Parse and validate a config file against SCHEMA; unknown keys are errors."""
    try:
        text = open(path).read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    out = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec in cp.sections():
        s = sec.lower()
        if s not in SCHEMA:
            raise ConfigError(f"{path}:{_line_of(text, s)}: unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[s]:
                raise ConfigError(f"{path}:{_line_of(text, s, key)}: unknown key '{key}' in [{sec}]")
            parse = SCHEMA[s][key][0]
            try:
                out[s][key] = parse(raw)
            except ValueError as e:
                raise ConfigError(f"{path}:{_line_of(text, s, key)}: bad value for {sec}.{key}: {e}") from e
    _validate(out, path, text)
    return out


_POSITIVE = [("sample", "trials"), ("diffusion", "trials"), ("diffusion", "steps"), ("coupling", "trials"),
             ("coupling", "steps"), ("locallaw", "trials"), ("stats", "trials"), ("stats", "mingap_trials"),
             ("grid", "n")]
_CHOICES = [("diffusion", "retraction", ("qr", "polar")), ("coupling", "mode", ("matrix", "synthetic"))]


def _validate(cfg, path, text):
    def fail(sec, key, msg):
        raise ConfigError(f"{path}:{_line_of(text, sec, key)}: {sec}.{key} {msg}")
    for sec, key in _POSITIVE:
        if cfg[sec][key] < 1:
            fail(sec, key, "must be positive")
    for sec, key, allowed in _CHOICES:
        if cfg[sec][key] not in allowed:
            fail(sec, key, f"must be one of {', '.join(allowed)}")
    bad = [c for c in cfg["accept"]["criteria"] if c not in acceptance.CRITERIA]
    if bad:
        fail("accept", "criteria", f"has unknown criteria {bad}")
    if cfg["stats"]["mingap_n"] < 2:
        fail("stats", "mingap_n", "must be at least 2")


def parse_measure(spec: str) -> Measure:
    """semicircle[:var] | bernoulli[:a] | uniform[:lo:hi] | delta[:a] | file:PATH."""
    name, _, rest = spec.strip().partition(":")
    args = [a for a in rest.split(":") if a] if name != "file" else [rest]
    try:
        nums = [float(a) for a in args] if name != "file" else []
        if name == "semicircle":
            return semicircle(*nums[:1])
        if name == "bernoulli":
            return bernoulli(*nums[:1])
        if name == "uniform":
            return uniform(*nums[:2])
        if name == "delta":
            return delta(*nums[:1])
        if name == "file":
            return Measure.load(rest)
    except (ValueError, OSError) as e:
        raise ConfigError(f"bad measure spec {spec!r}: {e}") from e
    raise ConfigError(f"unknown measure {spec!r}")


def ensemble_config(cfg, seed) -> EnsembleConfig:
    e = cfg["ensemble"]
    try:
        return EnsembleConfig(e["n"], e["beta"], parse_measure(e["x"]), parse_measure(e["y"]),
                              e["epsilon_reg"], e["a"], e["b"], seed)
    except ValueError as err:
        raise ConfigError(f"ensemble: {err}") from err


def solver_config(cfg) -> SolverConfig:
    s = cfg["solver"]
    return SolverConfig(s["tol"], s["max_iter"], s["damping"], s["eta_start"], s["continuation_steps_per_decade"], s["newton"])


def limit_density(ens: EnsembleConfig, cfg) -> Measure:
    m1, m2 = ens.x_spec, ens.y_spec
    g = cfg["grid"]
    K = m1.K + m2.K + 0.5
    lo = -K if g["lo"] is None else g["lo"]
    hi = K if g["hi"] is None else g["hi"]
    return free_convolution(m1, m2, np.linspace(lo, hi, g["n"]), solver_config(cfg), g["eta0"])


# -- commands -------------------------------------------------------------------------


def cmd_freeconv(cfg, out, ctx):
    ens = ensemble_config(cfg, ctx["seed"])
    dens = limit_density(ens, cfg)
    write_columns_csv(os.path.join(out, "density.csv"), ["E", "density"], dens.x, dens.w)
    svg_plot(os.path.join(out, "density.svg"), curves=[(dens.x, dens.w, "density")],
             title="free additive convolution", xlabel="E", ylabel="density")
    _dump(os.path.join(out, "summary.json"), {"raw_mass": dens.raw_mass, "points": int(dens.x.size)})
    ctx["echo"](f"density on {dens.x.size} points, mass before renormalisation {dens.raw_mass:.6f}")


def cmd_sample(cfg, out, ctx):
    ens = ensemble_config(cfg, ctx["seed"])
    trials = cfg["sample"]["trials"]
    ev = seeding.run_trials(lambda k, rng: np.linalg.eigvalsh(sample_H(ens, rng)), ctx["seed"], "sample", trials,
                            ctx["threads"])
    for k, v in enumerate(ev):
        write_spectrum_csv(os.path.join(out, f"spectrum_{k:03d}.csv"), v)
    dens = limit_density(ens, cfg)
    ks = ks_distance(np.concatenate(ev), dens.cdf)
    _dump(os.path.join(out, "ks.json"), {"N": ens.N, "trials": trials, "ks_esd_vs_limit": ks})
    ctx["echo"](f"{trials} spectra, pooled ESD KS distance to the limit {ks:.4f}")


def cmd_diffuse(cfg, out, ctx):
    ens = ensemble_config(cfg, ctx["seed"])
    d = cfg["diffusion"]
    wt = build_weights(ens.y(), ens.a, ens.beta)
    trs = seeding.run_trials(lambda k, rng: trajectory(ens, d["steps"], rng, d["retraction"], weights=wt),
                             ctx["seed"], "diffuse", d["trials"], ctx["threads"])
    for k, tr in enumerate(trs):
        write_trajectory_csv(os.path.join(out, f"trajectory_{k:03d}.csv"), tr)
    sup = [tr.sup_norm_U_minus_I for tr in trs]
    _dump(os.path.join(out, "summary.json"), {
        "N": ens.N, "T": ens.T, "trials": d["trials"], "median_sup_norm_U_minus_I": float(np.median(sup)),
        "max_unitarity_defect": float(max(tr.unitarity_defect.max() for tr in trs)),
        "A_max": float(wt.A.max()), "hatY_max": float(np.abs(wt.hatY).max())})
    ctx["echo"](f"median sup ||U - I|| = {np.median(sup):.4f}")


def cmd_couple(cfg, out, ctx):
    ens = ensemble_config(cfg, ctx["seed"])
    c = cfg["coupling"]
    dens = limit_density(ens, cfg)
    bulk = dbm.bulk_index_set(quantiles(dens, ens.N), dens, c["kappa"])
    runs = seeding.run_trials(
        lambda k, rng: dbm.couple_run(ens, c["mode"], rng, c["steps"], bulk=bulk, c2=c["c2"], keep_paths=False),
        ctx["seed"], "couple", c["trials"], ctx["threads"])
    for k, r in enumerate(runs):
        dbm.write_coupled_csv(os.path.join(out, f"coupled_{k:03d}.csv"), r)
    summary = dbm.aggregate(runs, ens.beta)
    E0 = float(np.clip(0.0, dens.x[0], dens.x[-1]))
    rho = float(dens.density_at(np.array([E0]))[0])
    summary["median_N_rho_supdiff"] = float(np.median([ens.N * rho * r.sup_diff[-1] for r in runs]))
    summary["mode"] = c["mode"]
    dbm.write_aggregate_json(os.path.join(out, "aggregate.json"), summary)
    ctx["echo"](f"median N*sup_diff(T) = {summary['median_N_supdiff']:.4f}")


def cmd_locallaw(cfg, out, ctx):
    ens = ensemble_config(cfg, ctx["seed"])
    L = cfg["locallaw"]
    grid = [(E, eta) for E in L["e"] for eta in L["eta"]]
    if any(eta <= 0 for _, eta in grid):
        raise ConfigError("locallaw.eta must be positive")

    def trial(k, rng):
        X, V, y = sample_initial(ens, rng)
        wt = build_weights(y, ens.a, ens.beta)
        ybar = y + ens.T * wt.hatY
        es = eigh(assemble_tildeH(X, y, V, np.eye(ens.N), 0.0, ens.T, wt.hatY))
        mx, my = Measure.atoms(ens.x()), Measure.atoms(ybar)
        from .subordination import solve_pointwise
        from .spectral_stats import local_law_report

        def w1(z):
            s = solve_pointwise(mx, my, z, solver_config(cfg))
            return s.w1 if s.converged else None
        return local_law_report(es, ybar, w1, grid)

    tabs = seeding.run_trials(trial, ctx["seed"], "locallaw", L["trials"], ctx["threads"])
    rows = [(k, r.E, r.eta, r.sup_error, r.ratio, int(r.valid)) for k, t in enumerate(tabs) for r in t]
    write_columns_csv(os.path.join(out, "locallaw.csv"), ["trial", "E", "eta", "sup_error", "ratio", "valid"],
                      *zip(*rows))
    summ = []
    for j, (E, eta) in enumerate(grid):
        rs = [t[j] for t in tabs if t[j].valid]
        summ.append({"E": E, "eta": eta, "valid": len(rs),
                     "median_sup_error": float(np.median([r.sup_error for r in rs])) if rs else None,
                     "median_ratio": float(np.median([r.ratio for r in rs])) if rs else None})
    _dump(os.path.join(out, "summary.json"), {"N": ens.N, "trials": L["trials"], "grid": summ})
    for s in summ:
        ctx["echo"](f"E={s['E']:g} eta={s['eta']:g}: median ratio {s['median_ratio']}")


def cmd_stats(cfg, out, ctx):
    ens = ensemble_config(cfg, ctx["seed"])
    S = cfg["stats"]
    dens = limit_density(ens, cfg)
    E = S["e"]
    rho = float(dens.density_at(np.array([E]))[0])
    if rho <= 0:
        raise ConfigError("stats.e must lie inside the support")
    N, a = ens.N, ens.a
    bulk = dbm.bulk_index_set(quantiles(dens, N), dens, 0.1)
    classical = quantiles(dens, N)
    mi = middle_indices(N)

    def trial(k, rng):
        X, V, y = sample_initial(ens, rng)
        wt = build_weights(y, a, ens.beta)
        es = eigh(assemble_tildeH(X, y, V, np.eye(N), 0.0, ens.T, wt.hatY))
        g = overlaps(np.eye(N), es, a).gamma
        return es.values, float(np.max(g[np.ix_(bulk, bulk)])) if bulk.size else 0.0

    res = seeding.run_trials(trial, ctx["seed"], "stats", S["trials"], ctx["threads"])
    ev = [r[0] for r in res]
    gaps = unfold_gaps(ev, rho, E, S["window_k"])
    ks = ks_distance(gaps, lambda s: reference_spacing_cdf(ens.beta, s))
    corr = correlation_estimate(ev, E, rho, S["half_width"], S["bin_width"])
    rig = max(rigidity_report(v, classical, mi)[0] for v in ev)
    small = EnsembleConfig(S["mingap_n"], ens.beta, ens.x_spec, ens.y_spec, ens.epsilon_reg, ens.a, ens.b)
    sp = seeding.run_trials(lambda k, rng: np.linalg.eigvalsh(sample_H(small, rng)), ctx["seed"], "stats-mingap",
                            S["mingap_trials"], ctx["threads"])
    fit = min_gap_statistics(sp)
    rep = StatisticsReport(
        gap_ks=ks, gap_count=int(gaps.size),
        correlation_bins=[[float(c), float(v)] for c, v in zip(corr.centers, corr.values)],
        rigidity_max=rig, gamma_max_bulk=float(max(r[1] for r in res)),
        min_gap_exponent=fit.exponent, min_gap_stderr=fit.stderr,
        metadata={"N": N, "beta": ens.beta, "trials": S["trials"], "E": E, "rho": rho, "seed": ctx["seed"],
                  "trial_streams": "SeedSequence(seed, spawn_key=(crc32(tag), k))",
                  "tags": ["stats", "stats-mingap"], "mingap_N": S["mingap_n"], "mingap_trials": S["mingap_trials"]})
    write_report(os.path.join(out, "report.json"), rep)
    write_columns_csv(os.path.join(out, "gaps.csv"), ["s"], np.sort(gaps))
    write_columns_csv(os.path.join(out, "correlation.csv"), ["alpha", "value", "sine_kernel"], corr.centers,
                      corr.values, sine_kernel_correlation(corr.centers))
    write_columns_csv(os.path.join(out, "mingap.csv"), ["delta", "probability"], fit.delta, fit.prob)
    edges = np.linspace(0, 4, 33)
    h, _ = np.histogram(gaps, edges, density=True)
    s = np.linspace(0, 4, 200)
    from .spectral_stats import surmise_pdf
    svg_plot(os.path.join(out, "gaps.svg"), hist=(edges, h), curves=[(s, surmise_pdf(ens.beta, s), "surmise")],
             title="unfolded gaps", xlabel="s", ylabel="density")
    svg_plot(os.path.join(out, "correlation.svg"), hist=(np.append(corr.centers - S["bin_width"] / 2,
                                                                    corr.centers[-1] + S["bin_width"] / 2), corr.values),
             curves=[(corr.centers, sine_kernel_correlation(corr.centers), "sine kernel")],
             title="pair correlation", xlabel="alpha", ylabel="R2")
    ctx["echo"](f"gap KS {ks:.4f} ({gaps.size} gaps), min-gap exponent {fit.exponent:.3f} +- {fit.stderr:.3f}")


def cmd_accept(cfg, out, ctx):
    res = acceptance.run(cfg["accept"]["criteria"], ctx["seed"], ctx["threads"], echo=ctx["print"])
    _dump(os.path.join(out, "acceptance.json"),
          [{"criterion": r.number, "title": r.title, "passed": r.passed, "measured": r.measured,
            "threshold": r.threshold} for r in res])
    return all(r.passed for r in res)


COMMANDS = {"freeconv": cmd_freeconv, "sample": cmd_sample, "diffuse": cmd_diffuse, "couple": cmd_couple,
            "locallaw": cmd_locallaw, "stats": cmd_stats, "accept": cmd_accept}


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_plain)
        fh.write("\n")


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


def build_parser():
    p = argparse.ArgumentParser(prog="freedbm", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help=f"master seed (overrides {SEED_ENV} and the config)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    echo = (lambda *a: None) if args.quiet else print
    try:
        cfg = load_config(args.config)
        sections = COMMAND_SECTIONS[args.command]
        if args.seed is not None:
            seed = args.seed
        elif os.environ.get(SEED_ENV):
            try:
                seed = int(os.environ[SEED_ENV])
            except ValueError as e:
                raise ConfigError(f"{SEED_ENV} is not an integer") from e
        else:
            seed = cfg["run"]["seed"]
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        threads = args.threads if args.threads is not None else cfg["run"]["threads"]
        if threads < 1:
            raise ConfigError("threads must be positive")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    os.makedirs(args.out, exist_ok=True)
    stage = tempfile.mkdtemp(prefix=".partial-", dir=args.out)
    ctx = {"seed": seed, "threads": threads, "echo": echo, "print": print if not args.quiet else echo}
    try:
        resolved = {s: cfg[s] for s in sections}
        resolved["run"] = {"seed": seed}
        _dump(os.path.join(stage, "manifest.json"),
              {"command": args.command, "version": __version__, "config": resolved})
        ok = COMMANDS[args.command](cfg, stage, ctx)
    except ConfigError as e:
        shutil.rmtree(stage, ignore_errors=True)
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError, ValueError, RuntimeError) as e:
        shutil.rmtree(stage, ignore_errors=True)
        print(f"numeric failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    for name in os.listdir(stage):
        os.replace(os.path.join(stage, name), os.path.join(args.out, name))
    os.rmdir(stage)
    if args.command == "accept" and not ok:
        return EXIT_ACCEPT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
