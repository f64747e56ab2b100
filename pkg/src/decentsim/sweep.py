"""Cartesian-product experiment sweeps with deterministic result merging."""

from __future__ import annotations

import dataclasses
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import problems as probs
from . import topology as topo
from .algorithms import ALGORITHMS, RunConfig, run
from .errors import ConfigurationError, DecentsimError
from .metrics import MetricsTrace, transient_stage

SUMMARY_HEADER = "alg,n,topo,inv_gap,final_mse,t_trans"


@dataclass(frozen=True)
class TopologySpec:
    kind: str = "cycle"
    n: int | None = None
    rows: int | None = None
    cols: int | None = None
    beta: float | None = None
    p: float = 0.3
    seed: int = 0

    def build(self) -> topo.MixingMatrix:
        return topo.build_topology(self.kind, self.n, rows=self.rows, cols=self.cols,
                                   beta=self.beta, p=self.p, seed=self.seed)

    @property
    def label(self) -> str:
        if self.kind == "grid":
            return f"grid{self.rows}x{self.cols}"
        if self.kind == "convex":
            return f"convex{self.n}_b{self.beta:g}"
        if self.kind == "random":
            return f"random{self.n}_p{self.p:g}_s{self.seed}"
        return f"{self.kind}{self.n}"


@dataclass(frozen=True)
class ProblemSpec:
    """Synthetic problem recipe. ``seed=None`` ties the instance to the run seed."""

    kind: str = "ls"
    d: int = 10
    M: int = 1000
    sigma_h: float = 0.0
    sigma_s: float = 0.0
    rho: float = 0.0
    seed: int | None = None

    def build(self, n: int, run_seed: int):
        seed = run_seed if self.seed is None else self.seed
        if self.kind == "ls":
            return probs.gen_least_squares(n, self.d, self.M, self.sigma_h, self.sigma_s, seed=seed)
        if self.kind == "logistic":
            return probs.gen_logistic(n, self.d, self.M, self.sigma_h, seed=seed, rho=self.rho)
        raise ConfigurationError(f"unknown problem kind {self.kind!r}")

    @property
    def label(self) -> str:
        return f"{self.kind}_d{self.d}_M{self.M}_h{self.sigma_h:g}_s{self.sigma_s:g}"


@dataclass(frozen=True)
class RunKey:
    config: str
    topology: str
    problem: str
    seed: int

    def __str__(self):
        return f"{self.config}-{self.topology}-{self.problem}-s{self.seed}"


@dataclass
class SweepResult:
    traces: dict = field(default_factory=dict)      # RunKey -> MetricsTrace
    failures: dict = field(default_factory=dict)    # RunKey -> message
    configs: dict = field(default_factory=dict)     # config key -> RunConfig
    topologies: dict = field(default_factory=dict)  # label -> (n, inv_gap)
    summary: list = field(default_factory=list)

    def summary_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(SUMMARY_HEADER + "\n")
        for row in self.summary:
            buf.write(f"{row['alg']},{row['n']},{row['topo']},{row['inv_gap']:.17g},"
                      f"{row['final_mse']:.17g},{row['t_trans']:.17g}\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def write(self, directory) -> Path:
        out = Path(directory)
        (out / "traces").mkdir(parents=True, exist_ok=True)
        for key in sorted(self.traces, key=str):
            tr = self.traces[key]
            tr.write(out / "traces" / f"{key}.csv", out / "traces" / f"{key}.json")
        self.summary_csv(out / "summary.csv")
        fails = {str(k): v for k, v in sorted(self.failures.items(), key=lambda kv: str(kv[0]))}
        (out / "failures.json").write_text(json.dumps(fails, indent=2))
        return out


def _execute(task):
    config, tspec, pspec, seed = task
    try:
        W = tspec.build()
        problem = pspec.build(W.n, seed)
        cfg = dataclasses.replace(config, seed=seed)
        return run(cfg, W, problem), None
    except DecentsimError as exc:
        return getattr(exc, "trace", None), f"{type(exc).__name__}: {exc}"
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _median(values) -> float:
    return float(np.median(values)) if len(values) else math.nan


_SHARED = ("gamma", "schedule", "halve_every", "T", "stochastic", "x0")


def _reference_key(key: RunKey, config: RunConfig, configs: dict) -> RunKey | None:
    """P-SGD run with the same step-size schedule, budget, topology, problem and seed."""
    want = tuple(getattr(config, f) for f in _SHARED)
    matches = [ck for ck, c in configs.items()
               if c.algorithm == "psgd" and tuple(getattr(c, f) for f in _SHARED) == want]
    if not matches:
        return None
    return RunKey(sorted(matches)[0], key.topology, key.problem, key.seed)


def summarize(result: SweepResult, delta: float = 0.5) -> list[dict]:
    groups: dict = {}
    for key, trace in result.traces.items():
        groups.setdefault((key.config, key.topology, key.problem), []).append(key)
    rows = []
    for (ck, tl, pl), keys in sorted(groups.items()):
        config = result.configs[ck]
        n, inv_gap = result.topologies[tl]
        finals, trans = [], []
        for key in sorted(keys, key=lambda k: k.seed):
            trace = result.traces[key]
            if key in result.failures:
                finals.append(math.inf)
                trans.append(math.inf)
                continue
            finals.append(trace.final_mse)
            ref = _reference_key(key, config, result.configs)
            if ref is None or ref not in result.traces or ref in result.failures:
                trans.append(math.nan)
            else:
                trans.append(transient_stage(trace, result.traces[ref], delta).t_trans)
        rows.append({"alg": config.algorithm, "n": n, "topo": tl, "inv_gap": inv_gap,
                     "final_mse": _median(finals), "t_trans": _median(trans),
                     "config": ck, "problem": pl, "seeds": len(keys)})
    rows.sort(key=lambda r: (ALGORITHMS.index(r["alg"]), r["n"], r["topo"], r["problem"], r["config"]))
    return rows


def sweep(configs, topology_specs, problem_specs, seeds, workers: int = 1, delta: float = 0.5) -> SweepResult:
    """Run every (config, topology, problem, seed) combination.

    Failed runs are recorded in ``failures`` (keeping any partial trace) and
    do not stop the sweep. Results are keyed, so worker scheduling has no
    effect on the output.
    """
    configs, topology_specs = list(configs), list(topology_specs)
    problem_specs, seeds = list(problem_specs), list(seeds)
    if not (configs and topology_specs and problem_specs and seeds):
        raise ConfigurationError("sweep needs non-empty configs, topologies, problems and seeds")
    result = SweepResult()
    for t in topology_specs:
        W = t.build()
        result.topologies[t.label] = (W.n, W.spectrum.inv_gap)
    tasks, keys = [], []
    for c in configs:
        result.configs[c.key()] = c
        for t in topology_specs:
            for p in problem_specs:
                for s in seeds:
                    tasks.append((c, t, p, int(s)))
                    keys.append(RunKey(c.key(), t.label, p.label, int(s)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_execute, tasks))
    else:
        outcomes = [_execute(task) for task in tasks]
    for key, (trace, error) in sorted(zip(keys, outcomes), key=lambda kv: str(kv[0])):
        if trace is not None:
            result.traces[key] = trace
        if error is not None:
            result.failures[key] = error
            if trace is None:
                result.traces[key] = MetricsTrace.from_records([])
    result.summary = summarize(result, delta)
    return result
