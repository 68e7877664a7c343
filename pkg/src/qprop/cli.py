"""Command-line front end: mean-field analysis, spacing sweeps, grids, simulations and kernels.

Every subcommand prints a JSON summary on stdout and, with ``--out DIR``,
writes its plot-ready data files there.  Exit codes: 0 success, 1 usage or
invalid input, 2 numerical failure (non-convergence, singular fixed point),
3 I/O.
"""

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import __version__
from . import activations as acts
from . import calibrate as cal
from . import meanfield as mf
from . import ntk
from . import simulate as sim
from .errors import (
    ConvergenceError,
    DomainError,
    EstimationError,
    FitError,
    IngestionError,
    ResourceError,
    SingularityError,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
LARGE_N = 10_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we reserve 2 for numerics."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- output


def _plain(obj):
    """JSON-ready copy: numpy scalars and arrays become Python, non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps(obj):
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False)


def _fmt(v):
    if isinstance(v, str):
        return v
    return "%.17g" % v


class Output:
    """Collects files for ``--out`` and the stdout summary."""

    def __init__(self, directory):
        self.directory = directory
        if directory is not None:
            os.makedirs(directory, exist_ok=True)
            if not os.access(directory, os.W_OK):
                raise PermissionError(f"output directory {directory} is not writable")

    def _path(self, name):
        return os.path.join(self.directory, name)

    def json(self, name, obj):
        if self.directory is not None:
            with open(self._path(name), "w") as fh:
                fh.write(dumps(obj) + "\n")

    def csv(self, name, header, rows):
        if self.directory is None:
            return
        with open(self._path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------- helpers


def _activation(args, required=True):
    if args.act is None:
        if required:
            raise UsageError("an activation is required (--act)")
        return None
    desc = args.act if isinstance(args.act, (str, dict)) else json.dumps(args.act)
    return acts.from_descriptor(desc)


def _constant_states(act):
    """N for a constant-spaced activation built by make_constant_spaced, else None."""
    n = act.n_states
    if n >= 2 and act == acts.make_constant_spaced(n):
        return n
    return None


def _init_for(n, coarse_points=None):
    if coarse_points is None:
        coarse_points = 200 if n <= LARGE_N else 40
    curve = cal.optimize_spacing(n, coarse_points=coarse_points)
    return cal.init_params(n, curve.d_tilde_opt)


def _hyper(args, act):
    """(HyperParams, InitRecommendation or None) honoring --auto-init."""
    if getattr(args, "auto_init", False):
        n = _constant_states(act)
        if n is None:
            raise UsageError("--auto-init needs a constant-spaced activation")
        rec = _init_for(n)
        return mf.HyperParams.from_std(rec.sigma_w, rec.sigma_b), rec
    return mf.HyperParams.from_std(args.sw, args.sb), None


def _add_common(p, act_default=None):
    p.add_argument("--act", default=act_default, help='activation descriptor: "sign" or JSON such as {"kind":"constant","states":10}')
    p.add_argument("--sw", type=float, default=1.0, help="weight standard deviation sigma_w")
    p.add_argument("--sb", type=float, default=0.0, help="bias standard deviation sigma_b")
    p.add_argument("--out", default=None, help="directory for data files")
    p.add_argument("--seed", type=int, default=0)


# ---------------------------------------------------------------- subcommands


def cmd_analyze(args):
    act = _activation(args)
    hp, rec = _hyper(args, act)
    report = mf.analyze(act, hp, tol=args.tol, max_iter=args.max_iter)
    out = report.to_dict()
    out.update(
        sigma_w=hp.sigma_w,
        sigma_b=hp.sigma_b,
        activation=act.to_dict(),
        solver={"tol": args.tol, "max_iter": args.max_iter,
                "iterations_q": report.iterations_q, "iterations_c": report.iterations_c},
    )
    if rec is not None:
        out["init"] = rec.to_dict()
    return out, {"analyze.json": out}


def cmd_spacing(args):
    states = [int(n) for n in args.states]
    curves = cal.chi_max_sweep(states, coarse_points=args.coarse_points, refine_tol=args.refine_tol)
    rows = [(c.n_states, d, x) for c in curves for d, x in c.samples]
    summary = {
        "curves": [
            {"n_states": c.n_states, "d_tilde_opt": c.d_tilde_opt, "chi_max": c.chi_max,
             "xi_max": c.xi_max, "degenerate": c.degenerate}
            for c in curves
        ],
    }
    fit_points = [(c.n_states, c.chi_max) for c in curves if not c.degenerate]
    if len({n for n, _ in fit_points}) >= 3:
        fit = cal.fit_power_law(fit_points)
        summary["fit"] = fit.to_dict()
        summary["fit"]["states"] = [n for n, _ in fit_points]
    else:
        summary["fit"] = None
        print("notice: fewer than three non-degenerate N values, power-law fit skipped", file=sys.stderr)
    files = {"spacing.csv": (("n_states", "d_tilde", "chi"), rows), "spacing.json": summary}
    return summary, files


def cmd_grid(args):
    n = int(args.states)
    if args.kind == "depthscale":
        grid = cal.grid_depthscale(n, args.sw_range, args.sb_range, args.resolution, spacing=args.spacing)
    else:
        grid = cal.grid_linear_spacing(n, args.d0_range, args.d1_range, args.resolution)
    header = [f"{grid.row_name}\\{grid.col_name}"] + [_fmt(v) for v in grid.col_values]
    rows = [[r] + list(vals) for r, vals in zip(grid.row_values, grid.values)]
    i, j = grid.argmax()
    summary = {
        "kind": args.kind,
        "n_states": n,
        "rows": grid.row_name,
        "columns": grid.col_name,
        "argmax": {grid.row_name: grid.row_values[i], grid.col_name: grid.col_values[j], "xi": grid.values[i, j]},
    }
    return summary, {f"grid_{args.kind}.csv": (header, rows), f"grid_{args.kind}.json": summary}


def cmd_simulate(args):
    act = _activation(args, required=False)
    if act is None:
        act = acts.make_constant_spaced(args.states)
    n = _constant_states(act)
    if args.sw_base is not None:
        base = args.sw_base
    elif n is not None:
        base = _init_for(n).sigma_w
    else:
        raise UsageError("--sw-base is required for activations that are not constant-spaced")
    if args.width < 1 or args.depth < 1 or args.samples < 2 or args.seeds < 1:
        raise DomainError("width, depth and seeds must be positive and samples at least 2")
    seeds = [args.seed + k for k in range(args.seeds)]
    files, runs = {}, []
    for factor in args.factors:
        hp = mf.HyperParams.from_std(factor * base, args.sb)
        run = sim.run_manifold(act, hp, args.width, args.depth, args.samples, seeds)
        rows = [
            (layer + 1, dt, run.c_emp[layer, k], run.c_theory[layer, k])
            for layer in range(run.c_emp.shape[0])
            for k, dt in enumerate(run.delta_theta)
        ]
        files[f"figure1_sw{factor:g}.csv"] = (("layer", "delta_theta", "c_emp", "c_theory"), rows)
        runs.append({
            "factor": factor, "sigma_w": hp.sigma_w, "sigma_b": hp.sigma_b,
            "mae_first_20": run.mae(min(20, args.depth)), "persistence": run.persistence(),
            "q_emp_layer1": run.q_emp[0],
        })
    slowest = max(runs, key=lambda r: r["persistence"])["factor"]
    summary = {
        "sigma_w_base": base, "width": args.width, "depth": args.depth, "samples": args.samples,
        "seeds": seeds, "runs": runs, "slowest_decay_factor": slowest,
    }
    if args.estimators:
        hp = mf.HyperParams.from_std(base, args.sb)
        spec = sim.NetworkSpec(args.width, args.width, args.estimator_depth, hp, act, args.seed)
        est = sim.empirical_chi(spec, (-args.chi_window, args.chi_window), args.seeds)
        summary["empirical_chi"] = est.to_dict()
        q_star = mf.solve_q_star(act, hp)[0]
        ste = acts.SteSurrogate(rho=cal.ste_rho(hp.sigma_w, q_star))
        summary["jacobian_moment"] = sim.jacobian_moment_mc(spec, ste, args.seeds).to_dict()
    files["simulate.json"] = summary
    return summary, files


def cmd_init(args):
    n = int(args.states)
    if n < 2:
        raise UsageError("--states must be >= 2")
    rec = _init_for(n, args.coarse_points)
    out = rec.to_dict()
    out["n_states"] = n
    out["alpha"] = rec.xavier_factor
    if args.fan_in is not None and args.fan_out is not None:
        out["fan_in"], out["fan_out"] = args.fan_in, args.fan_out
        out["xavier_sigma_w"] = cal.xavier_std(n, args.fan_in, args.fan_out)
    return out, {"init.json": out}


def cmd_ntk(args):
    act = _activation(args)
    hp, _ = _hyper(args, act)
    if args.data is not None:
        x, labels = ntk.read_labeled_csv(args.data)
    else:
        x, labels = ntk.synthetic_clusters(args.points, args.dim, args.separation, args.seed)
    if args.normalize:
        q_star = mf.solve_q_star(act, hp)[0]
        target = sim.input_scale(act, hp, q_star) ** 2
        x = x / np.sqrt(np.mean(x * x, axis=1, keepdims=True)) * math.sqrt(target)
    g = ntk.LabeledGram.from_data(x, labels)
    layers = sorted({int(d) for d in args.depths})
    if layers[0] < 1:
        raise DomainError("depths count layers and must be >= 1")
    kernels = ntk.ntk_by_depth(g, act, hp, [d - 1 for d in layers], args.kind, args.rho, args.smoothing)
    deepest = kernels[-1]
    snr = ntk.snr_metrics(deepest, g.labels)
    metrics = {
        "S": snr.S,
        "SNR": snr.SNR,
        "excluded_rows": int(snr.excluded.sum()),
        "layers": layers,
        "sigma_w": hp.sigma_w,
        "sigma_b": hp.sigma_b,
        "derivative": args.kind,
    }
    if len(kernels) >= 2:
        structure = ntk.deep_limit_structure(kernels)
        metrics["alpha"] = structure[-1].alpha
        metrics["beta"] = structure[-1].beta
        metrics["dispersion_by_depth"] = [
            {"layers": s.depth + 1, "alpha": s.alpha, "beta": s.beta, "dispersion": s.dispersion, "cv": s.cv}
            for s in structure
        ]
    else:
        theta = deepest.entries / layers[0]
        off = theta[~np.eye(theta.shape[0], dtype=bool)]
        metrics["alpha"] = float(np.diag(theta).mean())
        metrics["beta"] = float(off.mean())
        metrics["dispersion_by_depth"] = [{"layers": layers[0], "dispersion": float(off.std())}]
    files = {"ntk.json": metrics}
    for k in kernels:
        size = k.entries.shape[0]
        files[f"ntk_kernel_L{k.depth + 1}.csv"] = ([f"x{j}" for j in range(size)], k.entries.tolist())
    return metrics, files


def cmd_cq_compare(args):
    sw = np.geomspace(args.sw_range[0], args.sw_range[1], args.points)
    rows, table = [], []
    for n in args.states:
        for beta in args.beta:
            res = cal.grid_cq_comparison(n, beta, sw, args.sb)
            rows.extend((n, beta, s, c, q) for s, c, q in res)
            ratio = res[-1][2] / res[-1][1] if res[-1][1] > 0 else math.nan
            table.append({
                "n_states": n, "beta": beta,
                "c_dominates": all(c >= q for _, c, q in res),
                "ratio_at_largest_sigma_w": ratio,
            })
    summary = {"comparisons": table}
    return summary, {"cq_compare.csv": (("n_states", "beta", "sigma_w", "chi_c", "chi_q"), rows), "cq_compare.json": summary}


# ---------------------------------------------------------------- parser


def build_parser():
    parser = _Parser(prog="qprop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qprop {__version__}")
    sub = parser.add_subparsers(dest="subcommand", parser_class=_Parser, metavar="SUBCOMMAND")

    p = sub.add_parser("analyze", help="fixed points, slope and depth scale")
    _add_common(p)
    p.add_argument("--auto-init", action="store_true", help="use the critical initialization for a constant-spaced activation")
    p.add_argument("--tol", type=float, default=mf.TOL)
    p.add_argument("--max-iter", type=int, default=mf.MAX_ITER)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("spacing", help="chi against normalized spacing and the power-law fit")
    p.add_argument("--states", type=int, nargs="+", default=list(cal.DEFAULT_FIT_STATES))
    p.add_argument("--coarse-points", type=int, default=200)
    p.add_argument("--refine-tol", type=float, default=1e-6)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_spacing)

    p = sub.add_parser("grid", help="depth-scale grids")
    p.add_argument("--kind", choices=("depthscale", "linear"), default="depthscale")
    p.add_argument("--states", type=int, default=4)
    p.add_argument("--resolution", type=int, default=50)
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--sw-range", type=float, nargs=2, default=(0.5, 5.0))
    p.add_argument("--sb-range", type=float, nargs=2, default=(0.0, 1.0))
    p.add_argument("--d0-range", type=float, nargs=2, default=(0.05, 2.0))
    p.add_argument("--d1-range", type=float, nargs=2, default=(-0.2, 1.0))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("simulate", help="propagate a circle of inputs through random networks")
    _add_common(p)
    p.add_argument("--states", type=int, default=16)
    p.add_argument("--width", type=int, default=1000)
    p.add_argument("--depth", type=int, default=100)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, counting up from --seed")
    p.add_argument("--factors", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    p.add_argument("--sw-base", type=float, default=None, help="sigma_w the factors multiply (default: critical init)")
    p.add_argument("--estimators", action="store_true", help="also estimate chi and the STE Jacobian moment")
    p.add_argument("--estimator-depth", type=int, default=20)
    p.add_argument("--chi-window", type=float, default=0.2)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("init", help="critical initialization and Xavier correction")
    p.add_argument("--states", type=int, required=True)
    p.add_argument("--fan-in", type=int, default=None)
    p.add_argument("--fan-out", type=int, default=None)
    p.add_argument("--coarse-points", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("ntk", help="infinite-width tangent kernel and its deep-limit structure")
    _add_common(p, act_default='{"kind": "constant", "states": 10}')
    p.add_argument("--auto-init", action="store_true")
    p.add_argument("--data", default=None, help="CSV of feature columns followed by a label column")
    p.add_argument("--points", type=int, default=40)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--normalize", action="store_true", help="rescale inputs to the variance fixed point")
    p.add_argument("--depths", type=int, nargs="+", default=[5, 30, 100], help="network depths in layers")
    p.add_argument("--kind", choices=ntk.DERIVATIVE_KINDS, default="ste")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--smoothing", type=float, default=0.1)
    p.set_defaults(func=cmd_ntk)

    p = sub.add_parser("cq-compare", help="correlation-map against variance-map slopes")
    p.add_argument("--states", type=int, nargs="+", default=[4, 10])
    p.add_argument("--beta", type=float, nargs="+", default=[0.0, 1.0, 4.0])
    p.add_argument("--sw-range", type=float, nargs=2, default=(0.3, 30.0))
    p.add_argument("--points", type=int, default=40)
    p.add_argument("--sb", type=float, default=0.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_cq_compare)
    return parser, sub


def _load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


def parse_args(argv=None):
    """Parse argv, filling unset options from ``--config`` when given."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, rest = pre.parse_known_args(argv)
    parser, sub = build_parser()
    if known.config is not None:
        cfg = dict(_load_config(known.config))
        name = cfg.pop("subcommand", None)
        present = [a for a in rest if a in sub.choices]
        if present:
            name = present[0]
        elif name is not None:
            rest = [name] + rest
        if name not in sub.choices:
            raise UsageError("config needs a valid 'subcommand' or one on the command line")
        target = sub.choices[name]
        valid = {a.dest for a in target._actions}
        defaults = {}
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if dest not in valid or dest == "help":
                raise UsageError(f"unknown config key {key!r} for {name}")
            if dest == "act" and isinstance(value, dict):
                value = json.dumps(value)
            defaults[dest] = value
        target.set_defaults(**defaults)
    args = parser.parse_args(rest)
    if args.subcommand is None:
        parser.error("a subcommand is required")
    return args


def _fail(code, kind, message, **extra):
    print(dumps({"error": kind, "message": message, **extra}))
    return code


def main(argv=None):
    try:
        args = parse_args(argv)
        out = Output(getattr(args, "out", None))
        summary, files = args.func(args)
        for name, payload in files.items():
            if isinstance(payload, tuple):
                out.csv(name, *payload)
            else:
                out.json(name, payload)
    except UsageError as exc:
        print(f"qprop: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConvergenceError as exc:
        return _fail(EXIT_NUMERIC, "convergence", str(exc), iterations=exc.iterations, last=exc.last)
    except (SingularityError, EstimationError, FitError) as exc:
        return _fail(EXIT_NUMERIC, type(exc).__name__, str(exc))
    except IngestionError as exc:
        return _fail(EXIT_IO, "ingestion", str(exc))
    except (DomainError, ResourceError) as exc:
        return _fail(EXIT_USAGE, type(exc).__name__, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    print(dumps(summary))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
