"""``decentsim`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 divergence, 64 usage.
Machine-readable JSON goes to stdout, a short human summary to stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from . import problems as probs
from . import topology as topo
from .algorithms import ALGORITHMS, SCHEDULES, RunConfig, canonical_algorithm, run
from .errors import DecentsimError, DivergenceError, VerificationFailure
from .sweep import ProblemSpec, TopologySpec, sweep

EXIT_OK, EXIT_VERIFY, EXIT_DIVERGED, EXIT_USAGE = 0, 1, 2, 64
OUT_ENV = "DECENTSIM_OUT"
CHECKS = ("invariants", "decomposition", "optimality", "contraction", "clamp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _finite(x):
    return x if isinstance(x, (int, str)) or math.isfinite(x) else str(x)


def _say(msg):
    print(msg, file=sys.stderr)


# -- shared flag groups -------------------------------------------------------


def _add_topology(p, n_required=False):
    g = p.add_argument_group("topology")
    g.add_argument("--topo", choices=("cycle", "complete", "grid", "convex", "random"), default="cycle")
    g.add_argument("--n", type=int, required=n_required)
    g.add_argument("--rows", type=int)
    g.add_argument("--cols", type=int)
    g.add_argument("--beta", type=float, help="target beta for --topo convex")
    g.add_argument("--p", type=float, default=0.3, help="edge probability for --topo random")
    g.add_argument("--topo-seed", type=int, default=0)
    g.add_argument("--matrix", type=Path, help="load W from a CSV file instead of building it")


def _add_problem(p):
    g = p.add_argument_group("problem")
    g.add_argument("--problem", choices=("ls", "logistic"), default="ls")
    g.add_argument("--load", type=Path, help="problem directory written by `gen` (instead of generating)")
    g.add_argument("--libsvm", type=Path, help="LIBSVM file split heterogeneously across nodes")
    g.add_argument("--pos-ratio", type=float, default=0.5, help="positive fraction on the first half of nodes")
    g.add_argument("--d", type=int, default=10)
    g.add_argument("--M", type=int, default=1000)
    h = g.add_mutually_exclusive_group()
    h.add_argument("--sigma-h", type=float, help="heterogeneity standard deviation")
    h.add_argument("--sigma-h2", type=float, help="heterogeneity variance")
    s = g.add_mutually_exclusive_group()
    s.add_argument("--sigma-s", type=float, help="label-noise standard deviation")
    s.add_argument("--sigma-s2", type=float, help="label-noise variance")
    g.add_argument("--rho", type=float, default=0.0, help="l2 regularisation for logistic problems")
    g.add_argument("--problem-seed", type=int, help="defaults to the run seed")


def _add_run(p, single_alg=True):
    g = p.add_argument_group("run")
    if single_alg:
        g.add_argument("--alg", default="d2ed", help=f"one of {', '.join(ALGORITHMS)}")
    g.add_argument("--gamma", type=float, default=0.01)
    g.add_argument("--schedule", choices=SCHEDULES, default="constant")
    g.add_argument("--halve-every", type=int, default=2000)
    g.add_argument("--T", type=int, default=1000, help="budget in gossip communications")
    g.add_argument("--R", type=int)
    g.add_argument("--tau", type=float)
    g.add_argument("--eta", type=float)
    g.add_argument("--eta-rule", choices=("chebyshev", "verbatim"), default="chebyshev")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--record-every", type=int, default=1)
    g.add_argument("--deterministic", action="store_true", help="use full local gradients")
    g.add_argument("--x0", choices=("zeros", "optimum"), default="zeros")


def _add_output(p):
    p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or the current directory)")
    p.add_argument("--name", help="file stem for outputs")
    p.add_argument("--plot", action="store_true", help="also write PNG figures next to the CSV files")


def _out_dir(args) -> Path:
    out = args.out or Path(os.environ.get(OUT_ENV, "."))
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _std(std, var):
    if var is not None:
        if var < 0:
            raise UsageError("variance flags must be non-negative")
        return math.sqrt(var)
    return 0.0 if std is None else std


def _topology(args, n=None) -> topo.MixingMatrix:
    if args.matrix is not None:
        return topo.MixingMatrix.from_csv(args.matrix)
    n = n if n is not None else args.n
    if args.topo != "grid" and n is None:
        raise UsageError(f"--n is required for --topo {args.topo}")
    return topo.build_topology(args.topo, n, rows=args.rows, cols=args.cols, beta=args.beta,
                               p=args.p, seed=args.topo_seed)


def _problem(args, n: int):
    sources = sum(x is not None for x in (args.load, args.libsvm))
    if sources > 1:
        raise UsageError("--load and --libsvm are mutually exclusive")
    if args.load is not None:
        problem = probs.load_problem(args.load)
        if problem.n != n:
            raise UsageError(f"loaded problem has {problem.n} nodes, topology has {n}")
        return problem
    seed = args.problem_seed if args.problem_seed is not None else getattr(args, "seed", 0)
    if args.libsvm is not None:
        data = probs.load_libsvm(args.libsvm)
        return probs.heterogeneous_split(data, n, args.pos_ratio, seed=seed, rho=args.rho)
    sigma_h = _std(args.sigma_h, args.sigma_h2)
    if args.problem == "ls":
        return probs.gen_least_squares(n, args.d, args.M, sigma_h, _std(args.sigma_s, args.sigma_s2), seed=seed)
    return probs.gen_logistic(n, args.d, args.M, sigma_h, seed=seed, rho=args.rho)


def _config(args, alg) -> RunConfig:
    return RunConfig(algorithm=alg, gamma=args.gamma, schedule=args.schedule, halve_every=args.halve_every,
                     T=args.T, R=args.R, tau=args.tau, eta=args.eta, eta_rule=args.eta_rule, seed=args.seed,
                     record_every=args.record_every, stochastic=not args.deterministic, x0=args.x0)


# -- subcommands --------------------------------------------------------------


def cmd_spectrum(args) -> int:
    W = _topology(args)
    W.validate()
    s = W.spectrum
    out = {"name": W.name, "n": W.n, "beta": s.beta, "gap": s.spectral_gap, "inv_gap": _finite(s.inv_gap),
           "lambda2": s.lambda2, "lambdan": s.lambdan, "lazy_lambda2": s.lazy_lambda2,
           "lazy_lambdan": s.lazy_lambdan, "warnings": list(W.warnings)}
    _emit(out)
    _say(f"{W.name}: beta={s.beta:.6g}  1/(1-beta)={s.inv_gap:.6g}")
    return EXIT_OK


def cmd_gen(args) -> int:
    n = args.n if args.n is not None else _topology(args).n
    problem = _problem(args, n)
    out = _out_dir(args) / (args.name or f"{problem.kind}_n{n}")
    probs.save_problem(problem, out)
    b2 = probs.heterogeneity_b2(problem).b2
    _emit({"path": str(out), "kind": problem.kind, "n": problem.n, "d": problem.d, "M": problem.M,
           "digest": problem.digest(), "L": problem.L, "mu": problem.mu, "sigma2": problem.sigma2, "b2": b2})
    _say(f"wrote {problem.kind} problem (n={problem.n}, d={problem.d}, M={problem.M}) to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    W = _topology(args)
    W.validate()
    problem = _problem(args, W.n)
    config = _config(args, canonical_algorithm(args.alg))
    out = _out_dir(args)
    stem = args.name or f"{config.algorithm}_{W.name}_s{config.seed}"
    csv_path, manifest_path = out / f"{stem}.csv", out / f"{stem}.json"
    code = EXIT_OK
    try:
        trace = run(config, W, problem)
    except DivergenceError as exc:
        trace = exc.trace
        code = EXIT_DIVERGED
        _say(f"error: {exc}; partial trace saved")
    trace.write(csv_path, manifest_path)
    files = {"trace": str(csv_path), "manifest": str(manifest_path)}
    if args.plot:
        from .plotting import plot_traces
        files["plot"] = str(plot_traces({config.algorithm: trace}, out / f"{stem}.png", title=W.name))
    _emit({**files, "records": len(trace), "final_mse": trace.final_mse if len(trace) else None,
           "resolved": trace.manifest.get("resolved"), "diverged": code == EXIT_DIVERGED})
    if len(trace):
        _say(f"{config.algorithm} on {W.name}: {len(trace)} records, final mse {trace.final_mse:.4e}")
    return code


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_sweep(args) -> int:
    algs = [canonical_algorithm(a) for a in args.algs.split(",") if a]
    configs = [_config(args, a) for a in algs]
    if args.topo == "grid":
        tspecs = [TopologySpec("grid", rows=args.rows, cols=args.cols)]
    else:
        ns = args.ns or ([args.n] if args.n is not None else None)
        if not ns:
            raise UsageError("sweep needs --ns or --n")
        tspecs = [TopologySpec(args.topo, n=n, beta=args.beta, p=args.p, seed=args.topo_seed) for n in ns]
    pspec = ProblemSpec(args.problem, args.d, args.M, _std(args.sigma_h, args.sigma_h2),
                        _std(args.sigma_s, args.sigma_s2), args.rho, args.problem_seed)
    seeds = args.seed_list or list(range(args.seed, args.seed + args.seeds))
    result = sweep(configs, tspecs, [pspec], seeds, workers=args.workers, delta=args.delta)
    out = _out_dir(args) / (args.name or "sweep")
    result.write(out)
    files = {"summary": str(out / "summary.csv"), "traces": str(out / "traces")}
    if args.plot:
        from .plotting import plot_summary, plot_traces
        files["summary_plot"] = str(plot_summary(result.summary, out / "summary.png"))
        first = min(seeds)
        for t in tspecs:
            picked = {result.configs[k.config].algorithm: tr for k, tr in result.traces.items()
                      if k.topology == t.label and k.seed == first and len(tr)}
            files[f"plot_{t.label}"] = str(plot_traces(picked, out / f"traces_{t.label}.png", title=t.label))
    rows = [{k: _finite(v) for k, v in r.items()} for r in result.summary]
    _emit({**files, "summary": rows, "failures": {str(k): v for k, v in result.failures.items()}})
    for r in result.summary:
        _say(f"{r['alg']:8s} {r['topo']:>12s}  final mse {r['final_mse']:.4e}  t_trans {r['t_trans']}")
    return EXIT_OK


def _verify_one(W, checks, gamma_scale, seed) -> list[analysis.Report]:
    reports = []
    if "invariants" in checks:
        reports.append(analysis.invariant_check(W))
        if not reports[-1].passed:
            return reports
    if "decomposition" in checks:
        reports.append(analysis.verify_decomposition(analysis.augmented_from_topology(W), W).report)
    if "optimality" in checks:
        problem = probs.gen_least_squares(W.n, 5, 50, sigma_h=1.0, seed=seed)
        gamma = gamma_scale / problem.L
        reports.append(analysis.optimality_check(problem, W, gamma))
        reports.append(analysis.initial_error_bound_check(problem, gamma, W))
    if W.n > 1 and ("contraction" in checks or "clamp" in checks):
        R = topo.multi_gossip_rounds(W.n, W.beta)
        if "contraction" in checks:
            reports.append(analysis.contraction_check(W, R))
        if "clamp" in checks:
            reports.append(analysis.clamp_check(W, R))
    return reports


def cmd_verify(args) -> int:
    checks = [c for c in args.checks.split(",") if c]
    unknown = set(checks) - set(CHECKS)
    if unknown:
        raise UsageError(f"unknown checks {sorted(unknown)}; choose from {CHECKS}")
    if args.matrix is not None:
        targets = [topo.MixingMatrix.from_csv(args.matrix, validate=False)]
    elif args.n is not None or args.topo == "grid":
        targets = [_topology(args)]
    else:
        targets = [topo.build_cycle(8), topo.build_cycle(16)]
        targets += [topo.build_random(10, 0.4, seed=s) for s in range(5)]
    results = []
    for W in targets:
        for rep in _verify_one(W, checks, args.gamma_scale, args.seed):
            results.append({"topology": W.name, **rep.to_dict()})
    failed = [r for r in results if not r["passed"]]
    _emit({"passed": not failed, "checks": results})
    for r in results:
        _say(f"{'PASS' if r['passed'] else 'FAIL'}  {r['check']:20s} {r['topology']}")
    if failed:
        _say(f"{len(failed)} check(s) failed; first: {failed[0]['check']} on {failed[0]['topology']}")
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="decentsim", description="Decentralized stochastic optimization simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("spectrum", help="spectral constants of a mixing matrix")
    _add_topology(p)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("gen", help="generate a synthetic problem and save it")
    _add_topology(p)
    _add_problem(p)
    p.add_argument("--seed", type=int, default=0)
    _add_output(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run one algorithm and write its trace")
    _add_topology(p)
    _add_problem(p)
    _add_run(p)
    _add_output(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="cartesian sweep over algorithms, sizes and seeds")
    _add_topology(p)
    _add_problem(p)
    _add_run(p, single_alg=False)
    p.add_argument("--algs", default="psgd,dsgd,d2ed,mg_d2ed")
    p.add_argument("--ns", type=_int_list)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds starting at --seed")
    p.add_argument("--seed-list", type=_int_list)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--delta", type=float, default=0.5, help="transient-stage tolerance")
    _add_output(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="numerical checks of the algorithm's structural results")
    _add_topology(p)
    p.add_argument("--checks", default=",".join(CHECKS), help=f"comma-separated subset of {CHECKS}")
    p.add_argument("--gamma-scale", type=float, default=0.25, help="step size as a multiple of 1/L")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VerificationFailure as exc:
        _say(f"verification failed: {exc}")
        return EXIT_VERIFY
    except (UsageError, DecentsimError, OSError, ValueError) as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
