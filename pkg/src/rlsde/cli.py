"""Command line front end: ``rlsde {constants,simulate,certify,sweep}``.

Every run writes CSV tables plus a ``manifest.json`` into the output
directory.  Exit codes: 0 success, 2 config error, 3 runtime error,
4 at least one certificate violated.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, rng
from .config import RunConfig, config_hash, load_run_config
from .errors import ConfigError, EmptyWindowError, GateUnsatisfiedError, RlsdeError
from .sde import OUSimConfig, simulate
from .stability import (
    EMPTY,
    GATE,
    VIOLATED,
    BoundReport,
    TheoremWindow,
    blocked_report,
    certify_as_lyapunov,
    certify_averaged_flow,
    certify_contraction,
    certify_event_probability,
    certify_fluctuation,
    certify_lemma,
    certify_mean_log,
    certify_moment_boundedness,
    certify_moment_window,
    compute_Tn,
    compute_Tn_eps,
    declared_estimates,
    estimate_constants,
    mean_se,
    pathwise_log_norms,
    required_orders,
    theorem_window,
    verdict_for,
)
from .coefficients import HypothesisEstimates
from .reporting import svg_plot, write_csv, write_manifest, write_reports

log = logging.getLogger("rlsde")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VIOLATED = 0, 2, 3, 4
ENV_PREFIX = "RLSDE_"


def tool_version() -> str:
    return __version__


# ----------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run config (env RLSDE_CONFIG)")
    common.add_argument("--out", help="output directory (env RLSDE_OUT)")
    common.add_argument("--seed", type=int, help="master seed (env RLSDE_SEED)")
    common.add_argument("--threads", type=int, help="worker threads (env RLSDE_THREADS)")
    common.add_argument("--svg", action="store_true", default=None, help="also write SVG plots (env RLSDE_SVG)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="rlsde", description="Stability constants, simulation and certificates for random linear SDEs.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("constants", parents=[common], help="hypothesis constants and explicit time/eps thresholds")
    sub.add_parser("simulate", parents=[common], help="simulate the OU system and summarize trajectories")
    sub.add_parser("certify", parents=[common], help="run the certificate suite at the configured eps")
    sub.add_parser("sweep", parents=[common], help="run the certificate suite over epsilon_sweep")
    return parser


def _env(name: str) -> str | None:
    value = os.environ.get(ENV_PREFIX + name)
    return value if value not in (None, "") else None


def _resolve_args(args: argparse.Namespace) -> tuple[str, dict, int | None]:
    """Merge flags over ``RLSDE_*`` variables; returns (config path, overrides, threads)."""
    config = args.config or _env("CONFIG")
    if config is None:
        raise ConfigError("no config given (use --config or RLSDE_CONFIG)")
    overrides: dict = {}
    try:
        seed = args.seed if args.seed is not None else (int(_env("SEED")) if _env("SEED") else None)
        threads = args.threads if args.threads is not None else (int(_env("THREADS")) if _env("THREADS") else None)
    except ValueError as exc:
        raise ConfigError(f"bad environment override: {exc}") from exc
    out = args.out or _env("OUT")
    svg = args.svg if args.svg is not None else (_env("SVG") is not None and _env("SVG").lower() in ("1", "true", "yes", "on"))
    if seed is not None:
        overrides["simulation.seed"] = seed
    if out is not None:
        overrides["output.dir"] = out
    if svg:
        overrides["output.svg"] = True
    if threads is not None and threads < 1:
        raise ConfigError("--threads must be >= 1")
    return config, overrides, threads


# ----------------------------------------------------------------------------
# hypothesis constants


def hypothesis_estimates(run: RunConfig) -> HypothesisEstimates:
    """Declared or Monte Carlo constants covering every order the run needs."""
    orders = sorted({k for n in run.certification["n_list"] for k in required_orders(n)})
    hyp = run.hypothesis
    if hyp["mode"] == "declared":
        missing = [k for k in ("c", "d1", "d2") if k not in hyp]
        if missing:
            raise ConfigError(f"declared hypothesis needs {missing}")
        c = {int(k): float(v) for k, v in hyp["c"].items()}
        absent = [k for k in orders if k not in c]
        if absent:
            raise ConfigError(f"declared hypothesis lacks c for orders {absent}")
        eps_n = {int(k): float(v) for k, v in hyp.get("eps_n", {}).items()}
        return declared_estimates(c, hyp["d1"], hyp["d2"], eps_n)
    log.info("estimating constants for orders %s", orders)
    return estimate_constants(
        run.spec,
        orders,
        samples=hyp["samples"],
        horizon=hyp["horizon"],
        points=hyp["points"],
        seed=run.seed + hyp["seed_offset"],
        reference_epsilon=hyp["reference_epsilon"],
    )


def _window(run: RunConfig, est: HypothesisEstimates, n: int, eps: float) -> TheoremWindow:
    cert = run.certification
    return theorem_window(run.spec.flow, est, n, eps, cert["nu"], cert.get("h"))


CONSTANT_COLUMNS = [
    "n", "epsilon", "c0", "c_n", "c_2n", "d1", "d2", "d", "T_n", "T_n_eps", "binding",
    "eps_n_nu", "eps_2n_threshold", "cbar_n", "h", "window_nonempty",
]


def constants_rows(run: RunConfig, est: HypothesisEstimates) -> list[list]:
    rows = []
    for eps in run.epsilons:
        for n in run.certification["n_list"]:
            w = _window(run, est, n, eps)
            rows.append([
                n, eps, w.c0, w.c[n], w.c[2 * n], w.d1, w.d2, w.d_const, w.T_n, w.T_n_eps, w.binding,
                w.eps_n_nu, w.eps_2n_threshold, w.cbar_n, w.h, w.nonempty,
            ])
    return rows


def _estimate_rows(est: HypothesisEstimates) -> list[list]:
    rows = [[f"c_{k}", est.c_n_hat[k], est.c_n_se.get(k, 0.0)] for k in sorted(est.c_n_hat)]
    rows += [["d1", est.d1_hat, 0.0], ["d2", est.d2_hat, 0.0]]
    return rows


# ----------------------------------------------------------------------------
# certificates


def _t_eps(k: int, eps: float, w: TheoremWindow) -> float:
    return compute_Tn_eps(k, eps, w.c0, w.d1, w.d2).value if eps < 1.0 else 0.0


def _capped_grid(lo: float, hi: float, cap: float, points: int):
    hi = min(hi, lo + cap)
    return np.linspace(lo, hi, points) if hi > lo else None


def _guard(fn, quantity: str, n: int, eps: float, t: float) -> list[BoundReport]:
    """Run one certificate; unmet gates and empty windows become rows."""
    try:
        out = fn()
    except GateUnsatisfiedError as exc:
        return [blocked_report(quantity, n, eps, t, GATE, str(exc))]
    except EmptyWindowError as exc:
        return [blocked_report(quantity, n, eps, t, EMPTY, str(exc))]
    return out if isinstance(out, list) else [out]


def run_certificates(run: RunConfig, est: HypothesisEstimates, eps: float, workers: int | None) -> list[BoundReport]:
    cert = run.certification
    spec = run.spec.with_epsilon(eps)
    flow = spec.flow
    seed, samples, tol, nu = run.seed, cert["samples"], cert["tol"], cert["nu"]
    s, points, cap, dt = cert["s"], cert["window_points"], cert["window_span_cap"], cert["dt"]
    r = spec.dim
    e1 = np.eye(r)[0]
    selected = set(cert["run"])
    rows: list[BoundReport] = []

    n_first = cert["n_list"][0]
    w1 = _window(run, est, n_first, eps)
    t_gate = 2.0 / nu * flow.a / (flow.b * w1.c0)
    t1 = cert.get("t", max(1.0, t_gate))
    if "averaged_flow" in selected:
        rows += _guard(lambda: certify_averaged_flow(w1, flow, s, t1, nu, tol), "averaged_flow_log_norm", 1, eps, t1)
    if "mean_log" in selected:
        rows += _guard(lambda: certify_mean_log(w1, spec, s, t1, samples, nu, seed, tol, workers), "mean_log_norm", 1, eps, t1)

    for n in cert["n_list"]:
        w = _window(run, est, n, eps)
        log.info("n=%d eps=%g window [%.6g, %.6g]", n, eps, w.T_n, w.T_n_eps)
        grid = _capped_grid(w.T_n, w.T_n_eps, cap, points)
        t_last = float(cert["t_list"][-1])
        if "event_probability" in selected:
            rows += _guard(
                lambda: certify_event_probability(w, spec, s, cert["t_list"], samples, nu, seed, tol, workers),
                "event_probability", n, eps, t_last,
            )
        if "moment_window" in selected:
            rows += _guard(
                lambda: certify_moment_window(w, spec, s, samples, grid, points, seed, tol, workers),
                "moment_lyapunov_rate", n, eps, w.T_n,
            )
        if "lemma" in selected:
            rows += certify_lemma(spec, w.d1, w.d2, s, n, cert["lemma_t_grid"], samples, seed, tol, workers)
        if "fluctuation" in selected:
            eps_list = cert.get("fluctuation_eps", [eps])
            T2n = compute_Tn(2 * n, w.c0, w.c[4 * n]) if 4 * n in w.c else math.nan
            s_f = max(s, T2n) if math.isfinite(T2n) else s
            hi = min([_t_eps(2 * n, e, w) for e in eps_list] + [s_f + cap])
            rows += _guard(
                lambda: certify_fluctuation(spec, est, s_f, max(s_f, hi), n, eps_list, samples, seed, min(tol, 1e-10), workers=workers),
                "fluctuation_ratio", n, eps, max(s_f, hi),
            )
        if "contraction" in selected:
            x1 = np.asarray(cert.get("x1", e1), dtype=float)
            x2 = np.asarray(cert.get("x2", np.zeros(r)), dtype=float)
            rows += _guard(
                lambda: certify_contraction(spec, w, x1, x2, samples, grid, points, seed, dt, tol, workers),
                "contraction_moment", n, eps, w.T_n,
            )
        if "moment_boundedness" in selected:
            x0 = np.asarray(cert.get("x0", e1), dtype=float)
            if n < 2:
                rows.append(blocked_report("kappa_hat", n, eps, math.nan, GATE, "moment boundedness needs n >= 2"))
            else:
                lo = max(w.T_n, compute_Tn(2 * n, w.c0, w.c[4 * n]))
                mgrid = _capped_grid(lo, _t_eps(2 * n, eps, w), cap, points)
                rows += _guard(
                    lambda: certify_moment_boundedness(spec, est, x0, n, samples, mgrid, points, seed, dt, tol, workers),
                    "kappa_hat", n, eps, lo,
                )
        if "as_lyapunov" in selected:
            default = [eps, eps / 2, eps / 4] if eps > 0 else [0.0]
            lyap_eps = cert.get("lyapunov_eps", default)
            rows += _guard(
                lambda: certify_as_lyapunov(spec, est, s, cert["t_list"], lyap_eps, n, samples, seed, tol, cert.get("h"), True, workers),
                "failure_frequency", n, eps, t_last,
            )
    return rows


def rescale_bounds(rows: Sequence[BoundReport], scale: float) -> list[BoundReport]:
    """Multiply upper/lower bounds by ``scale`` and recompute the verdicts (test hook)."""
    if scale == 1.0:
        return list(rows)
    out = []
    for row in rows:
        if row.sense in ("upper", "lower") and math.isfinite(row.bound) and math.isfinite(row.estimate):
            bound = row.bound * scale
            verdict, margin = verdict_for(row.estimate, row.stderr, bound, row.sense)
            row = replace(row, bound=bound, verdict=verdict, margin=margin)
        out.append(row)
    return out


def _certificate_svgs(out: Path, rows: Sequence[BoundReport]) -> list[str]:
    files = []
    by_q: dict[tuple, list[BoundReport]] = {}
    for row in rows:
        by_q.setdefault((row.quantity, row.n, row.epsilon), []).append(row)
    for (q, n, eps), group in sorted(by_q.items()):
        pts = [g for g in group if math.isfinite(g.estimate) and math.isfinite(g.t)]
        if len(pts) < 2 or len({g.t for g in pts}) < 2:
            continue
        t = np.array([g.t for g in pts])
        series = [(t, np.array([g.estimate for g in pts]))]
        bounds = np.array([g.bound for g in pts])
        if np.all(np.isfinite(bounds)):
            series.append((t, bounds))
        name = f"{q}_n{n}_eps{eps:.6g}.svg"
        (out / name).write_text(svg_plot(series, title=f"{q} (n={n}, eps={eps:.3g})", ylabel=q))
        files.append(name)
    return files


# ----------------------------------------------------------------------------
# commands


def cmd_constants(run: RunConfig, out: Path, workers: int | None) -> tuple[list[str], dict]:
    est = hypothesis_estimates(run)
    write_csv(out / "constants.csv", CONSTANT_COLUMNS, constants_rows(run, est))
    write_csv(out / "hypothesis.csv", ["constant", "value", "stderr"], _estimate_rows(est))
    return ["constants.csv", "hypothesis.csv"], {}


def cmd_simulate(run: RunConfig, out: Path, workers: int | None) -> tuple[list[str], dict]:
    sim = run.simulation
    spec = run.spec
    r = spec.dim
    x0_list = [np.asarray(x, dtype=float) for x in sim.get("x0", [np.zeros(r)])]
    cfg = OUSimConfig(
        spec, x0_list, sim["dt"], sim["horizon"], sim["num_traj"], run.seed, sim["method"],
        None if "initial_cov" not in sim else np.asarray(sim["initial_cov"], dtype=float),
        sim["record_stride"], run.certification["tol"],
    )
    res = simulate(cfg, workers)
    header = ["x0_index", "t"] + [f"mean_x{i}" for i in range(r)] + ["mean_norm", "mean_norm_se", "cov_trace"]
    rows = []
    for j in range(res.states.shape[0]):
        X = res.states[j]
        norms = np.linalg.norm(X, axis=-1)
        for k, t in enumerate(res.times):
            mean = X[:, k].mean(axis=0)
            # shifting by one sample keeps equal samples at exactly zero spread
            shifted = X[:, k] - X[0, k]
            cov = np.cov(shifted.T, ddof=1).reshape(r, r) if X.shape[0] > 1 else np.zeros((r, r))
            m, se = mean_se(norms[:, k])
            rows.append([j, t, *mean, m, se, float(np.trace(cov))])
    write_csv(out / "trajectories.csv", header, rows)
    files = ["trajectories.csv"]

    times = res.times[res.times > 0]
    extra: dict = {}
    if times.size:
        logs = pathwise_log_norms(spec, 0.0, times, sim["num_traj"], run.seed, cfg.tol, grid_dt=sim["dt"], workers=workers)
        rates = logs / times[None, :]
        qs = sim["quantiles"]
        qv = np.quantile(rates, qs, axis=0)
        mu = spec.flow.mu_inf
        qheader = ["t"] + [f"q{q:g}" for q in qs] + ["mean_rate", "half_mu_inf"]
        qrows = [[t, *qv[:, k], rates[:, k].mean(), 0.5 * mu] for k, t in enumerate(times)]
        write_csv(out / "log_norm_rates.csv", qheader, qrows)
        files.append("log_norm_rates.csv")
        if run.raw["output"]["svg"]:
            m = min(sim["svg_paths"], rates.shape[0])
            svg = svg_plot(
                [(times, rates[i]) for i in range(m)],
                [(0.5 * mu, "mu_inf/2"), (mu, "mu_inf")],
                title="pathwise log-norm rate", ylabel="(1/t) log ||E_{0,t}||",
            )
            (out / "log_norm_rates.svg").write_text(svg)
            files.append("log_norm_rates.svg")
        extra["simulated_paths"] = int(sim["num_traj"]) * len(x0_list)
    return files, extra


def _certify(run: RunConfig, out: Path, workers: int | None, eps_list: Sequence[float]) -> tuple[list[str], dict]:
    est = hypothesis_estimates(run)
    rows: list[BoundReport] = []
    for eps in eps_list:
        rows += run_certificates(run, est, eps, workers)
    rows = rescale_bounds(rows, run.certification["bound_scale"])
    write_reports(out / "certificates.csv", rows)
    write_csv(out / "hypothesis.csv", ["constant", "value", "stderr"], _estimate_rows(est))
    files = ["certificates.csv", "hypothesis.csv"]
    if run.raw["output"]["svg"]:
        files += _certificate_svgs(out, rows)
    counts: dict[str, int] = {}
    for row in rows:
        counts[row.verdict] = counts.get(row.verdict, 0) + 1
    return files, {"verdicts": dict(sorted(counts.items())), "violated": counts.get(VIOLATED, 0) > 0}


def cmd_certify(run: RunConfig, out: Path, workers: int | None):
    return _certify(run, out, workers, [float(run.raw["epsilon"])])


def cmd_sweep(run: RunConfig, out: Path, workers: int | None):
    return _certify(run, out, workers, run.epsilons)


COMMANDS = {"constants": cmd_constants, "simulate": cmd_simulate, "certify": cmd_certify, "sweep": cmd_sweep}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    started = time.perf_counter()
    try:
        config, overrides, threads = _resolve_args(args)
        run = load_run_config(config, overrides)
    except ConfigError as exc:
        print(f"rlsde: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    workers = threads if threads is not None else 1
    rng.set_default_workers(workers)
    out = Path(run.raw["output"]["dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        files, extra = COMMANDS[args.command](run, out, workers)
    except ConfigError as exc:
        print(f"rlsde: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RlsdeError, ValueError, OSError, FloatingPointError) as exc:
        print(f"rlsde: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = {
        "tool": "rlsde",
        "version": tool_version(),
        "command": args.command,
        "config_path": str(config),
        "config_hash": config_hash(run.raw),
        "seed": run.seed,
        "workers": workers,
        "wall_time_s": time.perf_counter() - started,
        "outputs": files,
        "config": run.raw,
        **extra,
    }
    write_manifest(out / "manifest.json", manifest)
    if "verdicts" in extra:
        print(" ".join(f"{k}={v}" for k, v in extra["verdicts"].items()))
    print(f"wrote {len(files)} file(s) to {out}")
    return EXIT_VIOLATED if extra.get("violated") else EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
