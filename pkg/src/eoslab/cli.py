"""Command-line experiment harness.

Subcommands: quadratic, run, flow, compare, stableness-scan, plot. Each one
writes CSV files plus a JSON summary into the output directory. Exit codes:
0 success, 1 check failure, 2 configuration/input error, 3 numerical failure.
"""

import argparse
import json
import logging
import math
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import quadratic_lab
from .config import ExperimentConfig, build_loss, load_config
from .diagnostics import eos_two_step_report, sqrt_stableness, stableness
from .errors import (ConfigError, DegenerateManifoldError, ProjectionError, UndefinedUpdate,
                     ValidationError)
from .limiting_flow import (LOG_FLOW, PLAIN_FLOW, TimeScaling, compare_trajectories, integrate_flow,
                            toy_closed_form)
from .optimizers import GD, NORMALIZED_GD, SQRT_LOSS_GD, OptimizerKind, effective_lr, run
from .plotting import MissingColumnError, plot_csv
from .trace_io import TraceWriter, write_comparison, write_flow, write_table

log = logging.getLogger("eoslab")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

# time map per optimizer for comparisons: (flow kind, c_time)
COMPARE_DEFAULTS = {NORMALIZED_GD: (LOG_FLOW, 0.25), SQRT_LOSS_GD: (PLAIN_FLOW, 0.125),
                    GD: (PLAIN_FLOW, 0.125)}


class NumericalFailure(RuntimeError):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class Context:
    def __init__(self, args, cfg):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out_dir or cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs = []
        self.checks = {}

    def path(self, name):
        prefix = f"{self.cfg.prefix}_" if self.cfg.prefix else ""
        p = self.out / f"{prefix}{name}"
        self.outputs.append(str(p))
        return p

    def check(self, name, ok):
        if self.args.check:
            self.checks[name] = "pass" if ok else "fail"

    def finish(self, command, results):
        summary = {
            "command": command,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "config": self.cfg.source or None,
            "seed": self.cfg.seed,
            "results": results,
            "checks": self.checks,
            "outputs": self.outputs,
        }
        path = self.path("summary.json")
        summary["outputs"] = self.outputs
        path.write_text(json.dumps(_jsonable(summary), indent=2) + "\n")
        if not self.args.quiet:
            print(json.dumps(_jsonable({**results, **self.checks}), indent=2))
        return EXIT_CHECK if any(v == "fail" for v in self.checks.values()) else EXIT_OK


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.noise.seed = args.seed
        cfg.loss.data_seed = args.seed
        cfg.loss.init_seed = args.seed
    if args.eta is not None:
        if not args.eta > 0:
            raise ConfigError("--eta must be positive")
        cfg.eta = args.eta
    if args.steps is not None:
        if args.steps < 1:
            raise ConfigError("--steps must be >= 1")
        cfg.steps = args.steps
    return cfg


def _optimizer(cfg):
    return OptimizerKind(cfg.optimizer, cfg.eta, cfg.noise)


def _run_trace(ctx, model, x0, name="trace.csv"):
    cfg = ctx.cfg
    with TraceWriter(ctx.path(name), cfg.r_columns) as writer:
        trace = run(model, _optimizer(cfg), x0, cfg.steps, diag=cfg.diag, on_record=writer)
    return trace


# --------------------------------------------------------------------------
# subcommands


def cmd_quadratic(ctx):
    q = ctx.cfg.quadratic
    seeds = ctx.args.seeds if getattr(ctx.args, "seeds", None) is not None else q.seeds
    overall, rows = quadratic_lab.run_suite(seeds, q.steps, q.dim, q.bound)
    keys = list(overall)
    cols = ["seed", "x0_norm", "C", "s", "invariant_set_violations"] + keys
    write_table(ctx.path("quadratic_suite.csv"), cols,
                [[r["seed"], r["x0_norm"], r["C"], r["s"], r["invariant_set_violations"],
                  *[bool(r[k]) for k in keys]] for r in rows])
    for k, v in overall.items():
        ctx.check(k, v == "pass")
    return ctx.finish("quadratic", {**overall, "instances": seeds, "bound": q.bound})


def cmd_run(ctx):
    model, x0 = build_loss(ctx.cfg.loss)
    trace = _run_trace(ctx, model, x0)
    last = trace[-1]
    results = {"optimizer": ctx.cfg.optimizer, "eta": ctx.cfg.eta, "rows": len(trace),
               "final_step": last.step, "final_loss": last.loss, "event": last.event or None}
    diag = [r.diagnostics for r in trace if r.diagnostics is not None]
    if diag:
        results["final_lambda1_at_phi"] = diag[-1].lambda1_at_phi
    ctx.check("finite_trace", last.event != "nan_abort")
    ctx.check("steps_monotone", all(b.step == a.step + 1 for a, b in zip(trace, trace[1:])))
    if last.event == "nan_abort":
        raise NumericalFailure(f"non-finite iterate at step {last.step}")
    return ctx.finish("run", results)


def _flow(ctx, model, x0, kind, coefficient):
    fl = ctx.cfg.flow
    return integrate_flow(model, x0, fl.tau_end, kind, fl.eta_flow, fl.proj, coefficient,
                          record_every=fl.record_every)


def cmd_flow(ctx):
    model, x0 = build_loss(ctx.cfg.loss)
    fl = ctx.cfg.flow
    trace = _flow(ctx, model, x0, fl.kind, fl.coefficient)
    write_flow(ctx.path("flow.csv"), trace)
    lams = np.array([s.lambda1 for s in trace])
    monotone = bool(np.all(np.diff(lams) <= 1e-10 * np.maximum(1.0, np.abs(lams[:-1]))))
    ctx.check("lambda1_non_increasing", monotone)
    results = {"flow_kind": fl.kind, "tau_end": trace[-1].tau, "lambda1_start": lams[0],
               "lambda1_end": lams[-1], "x_end": trace[-1].x,
               "warnings": sorted({w for s in trace for w in s.warnings})}
    return ctx.finish("flow", results)


def cmd_compare(ctx):
    cfg = ctx.cfg
    model, x0 = build_loss(cfg.loss)
    flow_kind, c_default = COMPARE_DEFAULTS[cfg.optimizer]
    cp = cfg.compare
    c_time = cp.c_time if cp.c_time is not None else c_default
    scaling = TimeScaling(c_time, cp.flow_coefficient,
                          f"tau = t*eta^2*{c_time!r}; {flow_kind} with coefficient {cp.flow_coefficient!r}")
    # discrete run long enough to cover tau_end
    steps_needed = int(math.floor(cfg.flow.tau_end / (cfg.eta ** 2 * c_time) + 1e-9))
    cfg.steps = max(cfg.steps, steps_needed)
    trace = _run_trace(ctx, model, x0)
    if cp.reference == "closed_form":
        def reference(tau):
            return toy_closed_form(x0, tau, flow_kind, cp.flow_coefficient)
    else:
        reference = _flow(ctx, model, x0, flow_kind, cp.flow_coefficient)
        write_flow(ctx.path("flow.csv"), reference)
    taus = np.linspace(0.0, cfg.flow.tau_end, cp.samples)
    phi_kwargs = {"tol_phi": cfg.diag.phi_tol, "max_flow_time": cfg.diag.phi_max_flow_time,
                  "max_step_factor": cfg.diag.phi_max_step_factor}
    report = compare_trajectories(reference, trace, model, scaling, cfg.eta, taus, phi_kwargs)
    write_comparison(ctx.path("comparison.csv"), report)
    results = {"convention": report.convention, "c_time": c_time, "reference": cp.reference,
               "max_distance": report.max_distance, "valid_samples": int(report.valid.sum()),
               "samples": len(taus)}
    if cp.max_distance is not None:
        ctx.check("max_distance_within_bound", report.max_distance <= cp.max_distance)
    return ctx.finish("compare", results)


def cmd_stableness_scan(ctx):
    cfg = ctx.cfg
    model, x0 = build_loss(cfg.loss)
    trace = run(model, _optimizer(cfg), x0, cfg.steps)
    every = cfg.diag.every or 1
    d = cfg.diag
    rows = []
    consistent = True
    for a, b in zip(trace[:-1], trace[1:]):
        if a.step % every or a.event or b.event:
            continue
        eta_eff = effective_lr(model, a.x, cfg.eta, cfg.optimizer, loss=a.loss)
        if not math.isfinite(eta_eff):
            continue
        if cfg.optimizer == SQRT_LOSS_GD:
            res = sqrt_stableness(model, a.x, cfg.eta, d.grid_n, tol=d.spectral_tol)
        else:
            res = stableness(model, a.x, eta_eff, d.grid_n, tol=d.spectral_tol)
        pair = eos_two_step_report(model, [a, b], cfg.eta, cfg.optimizer if cfg.optimizer != GD
                                   else NORMALIZED_GD, d.grid_n, d.spectral_tol,
                                   with_stableness=cfg.optimizer != GD)
        two = pair[0] if pair else None
        consistent &= res.diverged or res.value >= res.lower_bound - 1e-12 * max(1.0, res.lower_bound)
        rows.append([a.step, res.value, res.lower_bound, res.argmax_s, res.diverged,
                     two.inv_stableness_sum if two else None, two.sqrt_loss_sum if two else None,
                     two.predicted_sqrt_sum if two else None, two.ratio if two else None])
    cols = ["step", "stableness", "stableness_lb", "argmax_s", "diverged", "inv_stableness_sum",
            "sqrt_loss_sum", "predicted_sqrt_sum", "ratio"]
    write_table(ctx.path("stableness.csv"), cols, rows)
    ctx.check("stableness_above_lower_bound", consistent)
    vals = np.array([r[1] for r in rows if not r[4]], dtype=float)
    ratios = np.array([r[8] for r in rows if r[8] is not None], dtype=float)
    results = {"rows": len(rows), "diverged": sum(bool(r[4]) for r in rows),
               "mean_stableness": float(vals.mean()) if vals.size else None,
               "mean_two_step_ratio": float(ratios.mean()) if ratios.size else None}
    return ctx.finish("stableness-scan", results)


def cmd_plot(ctx):
    args = ctx.args
    panels = tuple(p.strip() for p in args.panels.split(",")) if args.panels else None
    out = ctx.path(Path(args.input).with_suffix(".svg").name)
    kw = {"panels": panels} if panels else {}
    plot_csv(args.input, out, **kw)
    return ctx.finish("plot", {"input": args.input})


COMMANDS = {"quadratic": cmd_quadratic, "run": cmd_run, "flow": cmd_flow, "compare": cmd_compare,
            "stableness-scan": cmd_stableness_scan, "plot": cmd_plot}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment configuration")
    common.add_argument("--out-dir", help="output directory (overrides [output] dir)")
    common.add_argument("--seed", type=int, help="global seed override")
    common.add_argument("--eta", type=float, help="learning-rate override")
    common.add_argument("--steps", type=int, help="step-count override")
    common.add_argument("--check", action="store_true", help="evaluate property checks; exit 1 on failure")
    common.add_argument("--quiet", action="store_true", help="no stdout summary")

    parser = argparse.ArgumentParser(prog="eoslab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    q = sub.add_parser("quadratic", parents=[common], help="random-instance checks of the quadratic dynamics")
    q.add_argument("--seeds", type=int, help="number of random instances")
    sub.add_parser("run", parents=[common], help="optimizer trace with diagnostics")
    sub.add_parser("flow", parents=[common], help="limiting-flow trace")
    sub.add_parser("compare", parents=[common], help="discrete run versus limiting flow")
    sub.add_parser("stableness-scan", parents=[common], help="stableness along a trace")
    p = sub.add_parser("plot", parents=[common], help="SVG line charts from a CSV file")
    p.add_argument("input", help="trace CSV")
    p.add_argument("--panels", help="comma-separated column names")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.quiet:
        warnings.simplefilter("ignore")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = _apply_overrides(cfg, args)
        ctx = Context(args, cfg)
        return COMMANDS[args.command](ctx)
    except (ConfigError, ValidationError, MissingColumnError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, FloatingPointError, ProjectionError, UndefinedUpdate,
            DegenerateManifoldError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
