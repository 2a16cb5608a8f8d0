"""Command-line interface: ``ecap fit | adjust | simulate | evaluate``.

Input CSV files need a header with a ``p_tilde`` column and may carry ``z``
(0/1 outcomes), ``group`` and ``weight`` columns. Exit codes: 0 success,
2 bad input or configuration, 3 empty result, 4 numerical failure.
"""
import argparse
import csv
import io
import json
import logging
import math
import os
import sys

import numpy as np

from .errors import ConfigurationError, DomainError, InsufficientDataError, NumericError

log = logging.getLogger("ecap")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_EMPTY = 3
EXIT_NUMERIC = 4


class InputError(Exception):
    """Bad input file; the message lists offending rows."""


class EmptyResult(Exception):
    pass


# --------------------------------------------------------------------------
# io helpers
# --------------------------------------------------------------------------

def read_table(path, need_z=False, group_col=None):
    """Read a forecast CSV into a dict of columns, validating every row.

    Returns ``{"p_tilde": array, "z": array or None, "weight": array or None,
    "group": list or None}``.
    """
    try:
        fh = sys.stdin if path == "-" else open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "p_tilde" not in reader.fieldnames:
            raise InputError(f"{path}: header must contain a p_tilde column")
        has_z = "z" in reader.fieldnames
        has_w = "weight" in reader.fieldnames
        gcol = group_col or ("group" if "group" in reader.fieldnames else None)
        if group_col and group_col not in reader.fieldnames:
            raise InputError(f"{path}: no column named {group_col!r}")
        if need_z and not has_z:
            raise InputError(f"{path}: a z column is required")
        p, z, w, g, problems = [], [], [], [], []
        for line, row in enumerate(reader, start=2):
            try:
                pv = float(row["p_tilde"])
                if not 0.0 <= pv <= 1.0:
                    raise ValueError("p_tilde outside [0, 1]")
                p.append(pv)
                if has_z:
                    zv = row["z"].strip()
                    if zv not in ("0", "1", "0.0", "1.0"):
                        raise ValueError(f"z must be 0 or 1, got {zv!r}")
                    z.append(float(zv))
                if has_w:
                    wv = float(row["weight"])
                    if not wv > 0 or not math.isfinite(wv):
                        raise ValueError("weight must be positive")
                    w.append(wv)
                if gcol:
                    g.append(row[gcol])
            except (ValueError, TypeError) as exc:
                problems.append(f"row {line}: {exc}")
        if problems:
            shown = problems[:20]
            more = f"\n... and {len(problems) - 20} more" if len(problems) > 20 else ""
            raise InputError(f"{path}: invalid rows\n" + "\n".join(shown) + more)
    return {
        "p_tilde": np.array(p, dtype=float),
        "z": np.array(z, dtype=float) if has_z else None,
        "weight": np.array(w, dtype=float) if has_w else None,
        "group": g if gcol else None,
    }


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_rows(rows, columns, path, fmt):
    """Write a list of dicts as CSV or JSON to ``path`` (``-`` for stdout)."""
    buf = io.StringIO()
    if fmt == "json":
        clean = [{c: (None if isinstance(r[c], float) and math.isnan(r[c]) else _jsonable(r[c]))
                  for c in columns} for r in rows]
        json.dump(clean, buf, indent=1)
        buf.write("\n")
    else:
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    text = buf.getvalue()
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _jsonable(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _ecap_config(args):
    from .estimator import EcapConfig

    cfg = EcapConfig.from_dict(_read_json(args.config)) if args.config else EcapConfig()
    return cfg.with_cv_seed(args.seed).replace(split_seed=args.seed)


def cmd_fit(args):
    from .estimator import fit, save_model

    cfg = _ecap_config(args)
    data = read_table(args.input)
    if data["z"] is None and not cfg.trivial_grid:
        raise ConfigurationError("the input has no z column, which a gamma/theta grid search needs; "
                                 "add outcomes or use single-point grids")
    model = fit(data["p_tilde"], cfg, z=data["z"])
    if args.output in (None, "-"):
        json.dump(model.to_dict(), sys.stdout, indent=1)
        sys.stdout.write("\n")
    else:
        save_model(model, args.output)
    log.info("fitted: lambda=%g gamma=%g theta=%g", model.spline.lam, model.gamma_hat, model.theta_hat)
    return EXIT_OK


def cmd_adjust(args):
    from .estimator import adjust_detail, load_model

    model = load_model(args.model)
    data = read_table(args.input)
    p_hat, mu, s2, flipped = adjust_detail(model, data["p_tilde"])
    rows = [{"p_tilde": a, "p_hat": b, "mu_hat": c, "sigma2_hat": d, "flipped": bool(e)}
            for a, b, c, d, e in zip(data["p_tilde"], p_hat, mu, s2, flipped)]
    write_rows(rows, ["p_tilde", "p_hat", "mu_hat", "sigma2_hat", "flipped"], args.output, args.format)
    return EXIT_OK


def cmd_simulate(args):
    from .estimator import EcapConfig
    from .simulation import DEFAULT_C_GRID, ExperimentSpec, run_experiment

    if args.seed is None:
        raise ConfigurationError("simulate needs --seed")
    if not args.config:
        raise ConfigurationError("simulate needs --config with an experiment spec")
    d = dict(_read_json(args.config))
    ecap_cfg = EcapConfig.from_dict(d.pop("ecap")) if "ecap" in d else None
    c_grid = tuple(d.pop("c_grid", DEFAULT_C_GRID))
    d["rng_seed"] = args.seed
    spec = ExperimentSpec.from_dict(d)
    result = run_experiment(spec, ecap_cfg, c_grid)
    write_rows(result.rows(), ["method", "mean_ec2", "se", "replicates"], args.output, args.format)
    if args.details:
        detail = []
        for rec in result.replicates:
            for method in spec.methods:
                params = rec["params"].get(method, {})
                detail.append({"replicate": rec["replicate"], "method": method,
                               "ec2": rec["loss"].get(method, float("nan")),
                               "params": json.dumps(params, sort_keys=True),
                               "error": rec["errors"].get(method, "")})
        write_rows(detail, ["replicate", "method", "ec2", "params", "error"], args.details, "csv")
    if not result.mean:
        raise EmptyResult("every method failed on every replicate")
    return EXIT_OK


def cmd_evaluate(args):
    from .estimator import adjust_array, load_model
    from .evaluation import Window, grouped_ec_curve

    if bool(args.model) == bool(args.unadjusted):
        raise ConfigurationError("evaluate needs exactly one of --model or --unadjusted")
    window = Window.parse(args.window)
    data = read_table(args.input, need_z=True, group_col=args.group_by)
    p = data["p_tilde"]
    adjusted = p if args.unadjusted else adjust_array(load_model(args.model), p)
    groups = data["group"] if args.group_by else ["all"] * p.size
    curve = grouped_ec_curve(p, data["z"], adjusted, window, groups, weights=data["weight"],
                             level=args.level, draws=args.draws, seed=args.seed)
    if all(pt.missing for pt in curve):
        raise EmptyResult(f"no group has at least two forecasts in [{window.lower}, {window.upper}]")
    rows = [{"group": pt.key, "ec": pt.ec, "lo": pt.lo, "hi": pt.hi, "n_delta": pt.n_delta} for pt in curve]
    write_rows(rows, ["group", "ec", "lo", "hi", "n_delta"], args.output, args.format)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="ecap", description="Adjust probability estimates for excess certainty.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--output", "-o", default="-", help="output path (default stdout)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--seed", type=int, default=seed_default)

    p = sub.add_parser("fit", help="fit a model to a forecast CSV")
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--config", help="JSON file with estimator settings")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("adjust", help="adjust forecasts with a fitted model")
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--model", "-m", required=True)
    common(p)
    p.set_defaults(func=cmd_adjust)

    p = sub.add_parser("simulate", help="run a seeded simulation study")
    p.add_argument("--config", required=True, help="JSON experiment spec")
    p.add_argument("--details", help="optional per-replicate CSV")
    common(p, seed_default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="windowed empirical excess certainty with bootstrap intervals")
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--model", "-m")
    p.add_argument("--unadjusted", action="store_true", help="evaluate the raw forecasts")
    p.add_argument("--window", required=True, help="lo,hi on the flipped scale, e.g. 0,0.02")
    p.add_argument("--group-by", help="column to group on")
    p.add_argument("--level", type=float, default=0.9)
    p.add_argument("--draws", type=int, default=2000)
    common(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EmptyResult as exc:
        print(f"ecap: empty result: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except InsufficientDataError as exc:
        code = EXIT_EMPTY if args.command == "evaluate" else EXIT_INPUT
        print(f"ecap: {exc}", file=sys.stderr)
        return code
    except (InputError, ConfigurationError, DomainError) as exc:
        print(f"ecap: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"ecap: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BrokenPipeError:
        # downstream reader closed early (e.g. `| head`); not an error
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
