"""Experiment runner: JSON configs in, CSV traces and summaries out.

Subcommands::

    acrcd-bench run --config exp.json --out results/ [--seeds 0..100] [--workers 4]
    acrcd-bench compare --config a.json --config b.json [--out table.csv]
    acrcd-bench fit-slope results/*.csv --k-min 100 --k-max 10000
    acrcd-bench gen-instance --kind entropy_lp --n 10 --m 3 --seed 0 --out inst.json

Seeds written as ``a..b`` mean a, a+1, ..., b-1.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

import numpy as np
from jsonschema import Draft7Validator

from .core import ContractError, DivergenceError, TraceRecord, WeightedNorm, wrap_inexact
from .coupling import (NonSmoothError, RunConfig, Schedule, acrcd_epoch, acrcd_restart,
                       acrcd_star, accelerated_full_gradient, epoch_parameters, restart_length)
from .problems import (DualPhi1, OverflowWarningError, QuadraticProblem, instance_from_spec,
                       instance_to_json, make_entropy_lp, newton_phi1, recover_primal)
from .sampler import SamplingTree
from .sparse_engine import acrcd_prime_run, acrcd_star_prime_run, least_squares_instance
from .vrsum import make_ridge_finite_sum, vr_epoch

CSV_VERSION = "# acrcd-trace v1"
TRACE_COLUMNS = [f.name for f in fields(TraceRecord)]
SUMMARY_COLUMNS = ["run_id", "seed", "method", "status", "final_gap", "coord_calls",
                   "value_calls", "feasibility", "certificate_gap", "scaled_feasibility",
                   "message"]
THRESHOLDS = (1e-2, 1e-4, 1e-6)

PROBLEM_KINDS = ["example2", "chain", "ridge", "heterogeneous", "hub", "entropy_lp",
                 "least_squares", "ridge_finite_sum"]
METHODS = ["acrcd", "acrcd_epoch", "acrcd_star", "acrcd_star_sc", "acrcd_sparse",
           "acrcd_star_sparse", "full_gradient", "vr"]

_pos = {"type": "number", "exclusiveMinimum": 0}
_int1 = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["problem", "method"],
    "properties": {
        "version": {"const": 1},
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "n"],
            "properties": {
                "kind": {"enum": PROBLEM_KINDS},
                "n": _int1,
                "m": _int1,
                "seed": {"type": "integer"},
                "density": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "params": {"type": "object"},
            },
        },
        "method": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": METHODS},
                "iterations": _int1,
                "schedule": {"enum": ["simple", "recurrence"]},
                "mu": _pos,
                "delta": {"type": "number", "minimum": 0},
                "lipschitz": _pos,
                "step_size": _pos,
                "inner": _int1,
                "batch": _int1,
                "epochs": _int1,
            },
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "theta": _pos,
                "d": _pos,
                "epsilon": _pos,
                "sigma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "beta": {"type": "number", "minimum": 0, "maximum": 1},
                "epoch_constant": _pos,
                "adaptive_lipschitz": {"type": "boolean"},
                "max_iters": _int1,
            },
        },
        "seeds": {
            "oneOf": [
                {"type": "array", "items": {"type": "integer", "minimum": 0}},
                {"type": "string", "pattern": r"^\d+\.\.\d+$"},
            ]
        },
        "output": {"type": "string"},
        "stride": _int1,
        "timing": {"type": "boolean"},
        "workers": _int1,
    },
}


class ConfigError(ValueError):
    """Invalid experiment config; ``diagnostics`` lists ``path:line: field: message``."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(self.diagnostics))


# --------------------------------------------------------------------------
# config handling


def _line_of(text, key):
    if key is None:
        return 1
    m = re.search(r'"%s"\s*:' % re.escape(str(key)), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def validate_config(data, text=None, source="<config>"):
    """Raise :class:`ConfigError` listing every schema violation."""
    text = json.dumps(data, indent=2) if text is None else text
    errors = sorted(Draft7Validator(CONFIG_SCHEMA).iter_errors(data), key=lambda e: list(e.path))
    if not errors:
        return data
    diags = []
    for err in errors:
        path = [str(p) for p in err.path]
        key = next((p for p in reversed(err.path) if isinstance(p, str)), None)
        if err.validator == "additionalProperties":
            allowed = err.schema.get("properties", {})
            extra = [k for k in err.instance if k not in allowed]
            key = extra[0] if extra else key
            path = path + extra[:1]
        field_name = ".".join(path) or "<root>"
        diags.append(f"{source}:{_line_of(text, key)}: {field_name}: {err.message}")
    raise ConfigError(diags)


def load_config(path):
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}:{e.lineno}: <json>: {e.msg} (column {e.colno})"]) from None
    return validate_config(data, text, str(path))


def parse_seeds(spec):
    if spec is None:
        return [0]
    if isinstance(spec, str):
        m = re.fullmatch(r"(\d+)\.\.(\d+)", spec.strip())
        if not m:
            raise ConfigError([f"<seeds>:1: seeds: expected a..b, got {spec!r}"])
        return list(range(int(m.group(1)), int(m.group(2))))
    return [int(s) for s in spec]


# --------------------------------------------------------------------------
# instances


def build_problem(spec):
    """Problem object for a config ``problem`` section."""
    kind = spec["kind"]
    n = spec["n"]
    m = spec.get("m")
    seed = spec.get("seed", 0)
    params = dict(spec.get("params", {}))
    if kind in ("example2", "chain", "ridge", "heterogeneous", "hub"):
        return instance_from_spec(kind, n, seed=seed, **params)
    if kind == "entropy_lp":
        inst = make_entropy_lp(n, m or 3, seed)
        y_star, _, _ = newton_phi1(inst)
        phi = DualPhi1(inst)
        phi.fstar_hint = phi.value(y_star)
        return phi
    if kind == "least_squares":
        obj = least_squares_instance(m or 50, n, spec.get("density", 0.05), seed)
        dense = obj.matrix.toarray()
        x_ls = np.linalg.lstsq(dense, obj.phi.b, rcond=None)[0]
        obj.fstar_hint = obj.value(x_ls)
        return obj
    if kind == "ridge_finite_sum":
        return make_ridge_finite_sum(m or 200, n, seed, **params)
    raise ContractError(f"unknown problem kind {kind!r}")


def _dist_sq(problem, z):
    xs = getattr(problem, "minimizer_hint", None)
    if xs is None:
        return math.nan
    e = np.asarray(z) - xs
    return 0.5 * float(e @ e)


def _theta_d(problem, norm, x0, run, level_set=False):
    """Theta and d from the config, else from the known optimum."""
    d = run.get("d")
    if d is None:
        d = float(problem.gap(x0))
    theta = run.get("theta")
    if theta is None:
        if level_set and isinstance(problem, QuadraticProblem):
            theta = problem.level_set_theta(d, norm.weights)
        elif problem.minimizer_hint is not None:
            theta = norm.prox_distance(x0, problem.minimizer_hint)
        else:
            raise ContractError("run.theta is required when the optimum is unknown")
    return float(theta), float(d)


# --------------------------------------------------------------------------
# single run


@dataclass
class RunOutput:
    run_id: str
    seed: int
    method: str
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


class _Logger:
    def __init__(self, run_id, stride, timing):
        self.run_id = run_id
        self.stride = stride
        self.timing = timing
        self.records = []
        self.t0 = time.perf_counter_ns()

    def log(self, epoch, k, coord_calls, value_calls, gap, dist_sq):
        if self.records and k <= self.records[-1].k:
            return
        ns = time.perf_counter_ns() - self.t0 if self.timing else 0
        self.records.append(TraceRecord(self.run_id, epoch, k, coord_calls, value_calls,
                                        float(gap), float(dist_sq), ns))


def execute(config, seed):
    """Run one (config, seed) pair; never raises for numerical failures."""
    method = config["method"]
    name = method["name"]
    run_id = f"{name}-s{seed}"
    out = RunOutput(run_id=run_id, seed=seed, method=name)
    summary = {c: "" for c in SUMMARY_COLUMNS}
    summary.update(run_id=run_id, seed=seed, method=name, status="ok")
    try:
        problem = build_problem(config["problem"])
        logger = _Logger(run_id, config.get("stride"), config.get("timing", False))
        final_gap, calls, vcalls, extra = _dispatch(problem, config, seed, logger)
        summary.update(final_gap=repr(float(final_gap)), coord_calls=calls, value_calls=vcalls)
        summary.update(extra)
    except (DivergenceError, NonSmoothError, OverflowWarningError, FloatingPointError) as e:
        summary.update(status="diverged", message=str(e).replace(",", ";"))
    out.records = logger.records if "logger" in locals() else []
    out.summary = summary
    return out


def _stride(config, N):
    return config.get("stride") or max(1, math.ceil(N / 1000))


def _dispatch(problem, config, seed, logger):
    method = config["method"]
    name = method["name"]
    run = config.get("run", {})
    rng = np.random.default_rng(seed)
    if method.get("delta"):
        problem = wrap_inexact(problem, method["delta"], seed)
    n = problem.n
    x0 = np.zeros(n)

    if name == "vr":
        return _run_vr(problem, method, rng, logger)

    if name == "full_gradient":
        N = method.get("iterations", 1000)
        stride = _stride(config, N)
        L = method.get("lipschitz")
        if L is None:
            L = problem.lambda_max() if isinstance(problem, QuadraticProblem) else None
        if L is None:
            raise ContractError("full_gradient needs method.lipschitz")
        logger.log(0, 0, 0, 0, problem.gap(x0), _dist_sq(problem, x0))

        def cb(k, y):
            if k % stride == 0 or k == N:
                logger.log(0, k, n * k, 0, problem.gap(y), _dist_sq(problem, y))

        y = accelerated_full_gradient(problem, x0, N, L, callback=cb)
        return problem.gap(y), n * N, 0, {}

    beta = run.get("beta", 0.0)
    norm = WeightedNorm(problem.lipschitz, beta)
    tree = SamplingTree.from_lipschitz(problem.lipschitz, beta)
    adaptive = run.get("adaptive_lipschitz", False)
    logger.log(0, 0, 0, 0, problem.gap(x0), _dist_sq(problem, x0))

    if name in ("acrcd_star", "acrcd_star_sparse"):
        N = method.get("iterations", 1000)
        stride = _stride(config, N)
        sched = Schedule.recurrence(tree.total) if method.get("schedule") == "recurrence" \
            else Schedule.simple(tree.total)
        if name == "acrcd_star_sparse":
            def cbs(k, materialize):
                if k % stride == 0 or k == N:
                    logger.log(0, k, k, 0, problem.gap(materialize()), math.nan)

            y, st = acrcd_star_prime_run(problem, norm, tree, x0, N, sched, rng, y_callback=cbs)
            logger.log(0, N, N, 0, problem.gap(y), math.nan)
            return problem.gap(y), N, 0, {}
        payload = problem.recover if isinstance(problem, DualPhi1) else None

        def cb(k, st):
            if k % stride == 0 or k == N:
                logger.log(0, k, st.coord_calls, st.value_calls, problem.gap(st.y),
                           _dist_sq(problem, st.z))

        y, st = acrcd_star(problem, norm, tree, x0, N, sched, rng, adaptive=adaptive,
                           payload=payload, callback=cb)
        extra = {}
        if payload is not None:
            _, cert = recover_primal(st, problem.instance, y)
            extra = {"feasibility": repr(cert.feasibility), "certificate_gap": repr(cert.gap),
                     "scaled_feasibility": repr(cert.scaled_feasibility)}
        return problem.gap(y), st.coord_calls, st.value_calls, extra

    if name in ("acrcd_epoch", "acrcd_sparse"):
        theta, d = _theta_d(problem, norm, x0, run)
        alpha, tau, K = epoch_parameters(tree.total, theta, d, run.get("epoch_constant", 9.0))
        K = method.get("iterations", K)
        if name == "acrcd_sparse":
            xb = acrcd_prime_run(problem, norm, tree, x0, alpha, tau, K, rng)
            logger.log(0, K, K, 0, problem.gap(xb), _dist_sq(problem, xb))
            return problem.gap(xb), K, 0, {}
        xb, st = acrcd_epoch(problem, norm, tree, x0, alpha, tau, K, rng, adaptive=adaptive,
                             return_state=True)
        logger.log(0, K, st.coord_calls, st.value_calls, problem.gap(xb), _dist_sq(problem, xb))
        return problem.gap(xb), st.coord_calls, st.value_calls, {}

    if name == "acrcd":
        theta, d = _theta_d(problem, norm, x0, run, level_set=True)
        cfg = RunConfig(theta=theta, d=d, epsilon=run.get("epsilon", d / 2 ** 10),
                        sigma=run.get("sigma", 0.1), beta=beta, seed=seed,
                        epoch_constant=run.get("epoch_constant", 9.0),
                        adaptive_lipschitz=adaptive, max_iters=run.get("max_iters", 10 ** 9))

        def cbr(r, x, res):
            logger.log(r, res.coord_calls, res.coord_calls, res.value_calls, problem.gap(x),
                       _dist_sq(problem, x))

        res = acrcd_restart(problem, norm, tree, cfg, rng, x0, callback=cbr)
        extra = {"message": "budget exhausted"} if res.budget_exhausted else {}
        return problem.gap(res.x), res.coord_calls, res.value_calls, extra

    if name == "acrcd_star_sc":
        mu = method.get("mu")
        if mu is None:
            raise ContractError("acrcd_star_sc needs method.mu")
        theta, _ = _theta_d(problem, norm, x0, run)
        eps = run.get("epsilon", 1e-6)
        N = restart_length(tree.total, mu)
        x = x0
        calls = 0
        r = 0
        while mu * theta > eps and r < 200:
            x, st = acrcd_star(problem, norm, tree, x, N, Schedule.simple(tree.total), rng,
                               adaptive=adaptive)
            calls += st.coord_calls
            theta /= 2.0
            r += 1
            logger.log(r, calls, calls, st.value_calls, problem.gap(x), _dist_sq(problem, x))
        return problem.gap(x), calls, 0, {}

    raise ContractError(f"unknown method {name!r}")


def _run_vr(problem, method, rng, logger):
    N = method.get("inner", math.ceil(4 * problem.L / problem.mu))
    step = method.get("step_size", 1.0 / (10.0 * problem.L))
    batch = method.get("batch", 1)
    epochs = method.get("epochs", 20)
    y = np.zeros(problem.n)
    logger.log(0, 0, 0, 0, problem.gap(y), _dist_sq_vr(problem, y))
    st = None
    for e in range(epochs):
        y, st = vr_epoch(problem, y, N, step, rng, batch=batch, state=st)
        logger.log(e + 1, (e + 1) * N, st.evaluations, 0, problem.gap(y), _dist_sq_vr(problem, y))
    return problem.gap(y), st.evaluations if st else 0, 0, {}


def _dist_sq_vr(problem, x):
    e = x - problem.x_star
    return 0.5 * float(e @ e)


# --------------------------------------------------------------------------
# output


def _cell(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def trace_csv(records):
    buf = io.StringIO()
    buf.write(CSV_VERSION + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in records:
        w.writerow([_cell(v) for v in astuple(r)])
    return buf.getvalue()


def summary_csv(outputs):
    buf = io.StringIO()
    buf.write(CSV_VERSION + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for o in outputs:
        w.writerow([_cell(o.summary.get(c, "")) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def run_all(config, seeds=None, workers=1):
    """Execute every seed; results come back in seed order."""
    seeds = parse_seeds(config.get("seeds")) if seeds is None else list(seeds)
    workers = workers or config.get("workers", 1)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(execute, [config] * len(seeds), seeds))
    return [execute(config, s) for s in seeds]


def run(config, out_dir=None, seeds=None, workers=1):
    """Write one trace CSV per run plus summary.csv; returns the run outputs."""
    config = validate_config(config)
    out_dir = Path(out_dir or config.get("output", "results"))
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = run_all(config, seeds, workers)
    # single writer: workers only return data
    for o in outputs:
        (out_dir / f"{o.run_id}.csv").write_text(trace_csv(o.records))
    (out_dir / "summary.csv").write_text(summary_csv(outputs))
    return outputs


def read_trace(path):
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for rec in csv.DictReader(lines):
        rows.append(rec)
    return rows


def calls_to_threshold(records, threshold):
    """Coordinate calls at the first logged point with gap <= threshold (inf if never)."""
    for r in records:
        if r.gap <= threshold:
            return r.coord_calls
    return math.inf


def compare(config_a, config_b, seeds=None, workers=1, thresholds=THRESHOLDS):
    """Median coordinate calls to each gap threshold and the ratio B / A."""
    config_a = validate_config(config_a)
    config_b = validate_config(config_b)
    if config_a["problem"] != config_b["problem"]:
        raise ContractError("compare needs both configs to share the problem spec")
    outs = [run_all(c, seeds, workers) for c in (config_a, config_b)]
    table = []
    for thr in thresholds:
        med = [float(np.median([calls_to_threshold(o.records, thr) for o in runs]))
               for runs in outs]
        if med[0] == med[1]:
            ratio = 1.0
        elif med[0] == 0 or math.isinf(med[0]):
            ratio = math.inf if med[0] == 0 else 0.0
        else:
            ratio = med[1] / med[0]
        table.append({"threshold": thr, "median_a": med[0], "median_b": med[1], "ratio": ratio})
    return table


def comparison_csv(table, name_a="a", name_b="b"):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", f"median_calls_{name_a}", f"median_calls_{name_b}", "ratio_b_over_a"])
    for row in table:
        w.writerow([repr(row["threshold"]), repr(row["median_a"]), repr(row["median_b"]),
                    repr(row["ratio"])])
    return buf.getvalue()


def fit_slope(paths, k_min, k_max, min_points=20):
    """Least-squares slope of log(mean gap over runs) against log k in [k_min, k_max]."""
    sums = {}
    for p in paths:
        for r in read_trace(p):
            k = int(r["k"])
            if k_min <= k <= k_max and r["gap"] != "":
                s = sums.setdefault(k, [0.0, 0])
                s[0] += float(r["gap"])
                s[1] += 1
    ks = np.array(sorted(k for k, (s, c) in sums.items() if s / c > 0))
    if ks.size < min_points:
        raise ContractError(f"need >= {min_points} points with positive gap in "
                            f"[{k_min}, {k_max}], found {ks.size}")
    means = np.array([sums[k][0] / sums[k][1] for k in ks])
    return float(np.polyfit(np.log(ks), np.log(means), 1)[0])


# --------------------------------------------------------------------------
# command line


def _cmd_run(args):
    cfg = load_config(args.config)
    seeds = parse_seeds(args.seeds) if args.seeds else None
    outs = run(cfg, args.out, seeds, args.workers)
    bad = sum(o.summary["status"] != "ok" for o in outs)
    print(f"{len(outs)} runs written to {args.out or cfg.get('output', 'results')}"
          + (f" ({bad} diverged)" if bad else ""))
    return 0


def _cmd_compare(args):
    if len(args.config) != 2:
        raise ConfigError(["<args>:1: --config: compare needs exactly two configs"])
    a, b = (load_config(p) for p in args.config)
    seeds = parse_seeds(args.seeds) if args.seeds else None
    table = compare(a, b, seeds, args.workers)
    text = comparison_csv(table, a["method"]["name"], b["method"]["name"])
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def _cmd_fit_slope(args):
    print(repr(fit_slope(args.csv, args.k_min, args.k_max)))
    return 0


def _cmd_gen_instance(args):
    if args.kind == "entropy_lp":
        inst = make_entropy_lp(args.n, args.m, args.seed)
    else:
        inst = instance_from_spec(args.kind, args.n, seed=args.seed)
    text = instance_to_json(inst)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="acrcd-bench", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a config over its seeds")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seeds", help="a..b (half-open), overrides the config")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("compare", help="oracle calls to gap thresholds for two configs")
    c.add_argument("--config", action="append", required=True)
    c.add_argument("--out")
    c.add_argument("--seeds")
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(func=_cmd_compare)

    f = sub.add_parser("fit-slope", help="log-log slope of the mean gap")
    f.add_argument("csv", nargs="+")
    f.add_argument("--k-min", type=int, default=100)
    f.add_argument("--k-max", type=int, default=10 ** 4)
    f.set_defaults(func=_cmd_fit_slope)

    g = sub.add_parser("gen-instance", help="write a generated instance as JSON")
    g.add_argument("--kind", required=True, choices=["example2", "chain", "ridge",
                                                     "heterogeneous", "hub", "entropy_lp"])
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--m", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=_cmd_gen_instance)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        for line in e.diagnostics:
            print(line, file=sys.stderr)
        return 2
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
