"""Command-line front end.

Every estimator and the coupling pipeline is a subcommand emitting one
JSON (or CSV) record.  Parameters resolve with flag > config file >
built-in default precedence, and the chosen source of each value is kept
in the record's provenance block.  All randomness derives from the single
--seed through the stream tagged with the command name; estimators split
that stream into replica blocks internally, and multi-part commands hand
child streams to their parts.  Reports are byte-stable: rerunning the
same config reproduces the record except for the wall_time field.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import subprocess
import sys
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__, acceptance
from .coupling import make_schedule, multiscale_drive, one_step_couple
from .errors import AvoidanceError, IoError, UsageError
from .estimators import (
    Estimate,
    annulus_exit_prob,
    boundary_layer_tail,
    escape_curved_boundary_prob,
    estimate_green,
    exit_time_tail,
    hitting_measure_max,
    inverse_square_samples,
)
from .intersections import (
    classify_good_times,
    event_H_prob,
    hittability_sweep,
    intersection_prob,
    moment_sum,
)
from .streams import RandomStream
from .walker import walk_fixed_length
from .lattice import origin

SCHEMA_VERSION = 1
DEFAULT_SEED = 0xA11CE


def _version_string() -> str:
    """v<version>+g<commit> inside a checkout, plain v<version> elsewhere.
    Resolved once per process, so reports stay byte-stable."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always"],
            capture_output=True, text=True, timeout=2,
            cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


VERSION_STRING = _version_string()


# ---------------------------------------------------------------------------
# Typed parameter table
# ---------------------------------------------------------------------------

def _point(text):
    try:
        coords = tuple(int(c) for c in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a lattice point: {text!r}")
    if not coords:
        raise argparse.ArgumentTypeError("empty point")
    return coords


def _float_list(text):
    try:
        vals = tuple(float(c) for c in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma list of numbers: {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _opt_float(text):
    if str(text).lower() in ("none", ""):
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number or 'none': {text!r}")


def _opt_int(text):
    if str(text).lower() in ("none", ""):
        return None
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer or 'none': {text!r}")


@dataclass(frozen=True)
class Param:
    name: str
    convert: Callable
    default: object
    help: str


def _p(name, convert, default, help):
    return Param(name, convert, default, help)


PARAMS: dict[str, tuple[Param, ...]] = {
    "green": (
        _p("x", _point, (1, 0, 0, 0), "target point"),
        _p("truncation", _opt_float, None,
           "stop radius; 'none' uses the estimator default of ~4|x|"),
        _p("replicas", int, 100_000, "walk count"),
    ),
    "annulus": (
        _p("n", float, 100.0, "base radius"),
        _p("a", float, 0.51, "inner radius exponent, must be < 1"),
        _p("A", float, 2.0, "outer radius factor, must be > 1"),
        _p("replicas", int, 200_000, "walk count"),
    ),
    "exit-time": (
        _p("n", float, 10.0, "ball radius"),
        _p("replicas", int, 20_000, "walk count"),
    ),
    "boundary-layer": (
        _p("n", float, 15.0, "ball radius"),
        _p("k", float, 5.0, "layer depth, 0 < k < n"),
        _p("lam", float, 2.0, "occupation threshold multiplier"),
        _p("replicas", int, 20_000, "walk count"),
    ),
    "hitting-measure": (
        _p("n", float, 5.0, "start ball radius"),
        _p("m", float, 10.0, "exit ball radius, >= 2n"),
        _p("x", _point, (0, 0, 0, 0), "start point in B(n)"),
        _p("replicas", int, 20_000, "walk count"),
    ),
    "escape": (
        _p("n", float, 20.0, "stopping ball radius"),
        _p("x", _point, (17, 0, 0, 0), "start point in B(n)"),
        _p("k", float, 4.0, "escape distance from the start"),
        _p("replicas", int, 20_000, "walk count"),
    ),
    "invsq": (
        _p("n", int, 1000, "number of steps summed"),
        _p("replicas", int, 10_000, "walk count"),
    ),
    "intersect": (
        _p("s1", _point, (8, 0, 0, 0), "first start"),
        _p("s2", _point, (-8, 0, 0, 0), "second start"),
        _p("m", float, 32.0, "chop radius"),
        _p("replicas", int, 5_000, "pair count"),
    ),
    "moments": (
        _p("n", float, 8.0, "entry radius"),
        _p("m", float, 32.0, "exit radius"),
        _p("k", int, 4, "partner walk count"),
        _p("r", int, 2, "moment order"),
        _p("replicas", int, 2_000, "outer replicas"),
    ),
    "good-times": (
        _p("n", float, 1024.0, "scale for the log2(n) thresholds"),
        _p("steps", int, 2048, "path length; must exceed 2*window"),
        _p("lam", float, 4.0, "threshold knob"),
        _p("window", int, 32, "forward window length"),
        _p("replicas", int, 64, "path count"),
    ),
    "hittability": (
        _p("n", float, 64.0, "outer-path start radius"),
        _p("m", float, 256.0, "chop radius"),
        _p("eps", _float_list, (0.1, 0.2, 0.4), "epsilon sweep values"),
        _p("outer", int, 400, "outer paths per point"),
        _p("inner", int, 400, "probe walks per outer path"),
    ),
    "event-h": (
        _p("n", float, 32.0, "trace scale"),
        _p("k", _opt_float, None, "exclusion distance; 'none' uses n/log2 n"),
        _p("c1", float, 0.05, "visibility threshold constant"),
        _p("outer", int, 48, "trace replicas"),
        _p("inner", int, 16, "probe walks per grid point"),
        _p("grid", int, 24, "far-grid size"),
        _p("horizon", float, 4.0, "probe walk horizon factor"),
    ),
    "couple-step": (
        _p("s1", _point, (-3, -2, -1, -1), "first start, on the shell of B(n)"),
        _p("s2", _point, (-1, 2, 2, 2), "second start, on the shell of B(n)"),
        _p("n", float, 4.0, "entry radius"),
        _p("m", float, 8.0, "exit radius"),
        _p("T", int, 384, "path length"),
        _p("sample-size", _opt_int, 512, "ensemble size; 'none' enumerates"),
        _p("separation", _opt_float, None, "endpoint separation; 'none' is m/log2 m"),
        _p("budget", int, 64, "hittability probe count"),
        _p("epsilon", _opt_float, None, "hittability threshold; 'none' derives it"),
    ),
    "drive": (
        _p("radii", _float_list, (8.0, 16.0, 64.0), "schedule radii"),
        _p("replicas", int, 1, "independent drives"),
        _p("sample-size", int, 192, "per-step ensemble size"),
        _p("budget", int, 24, "hittability probe count"),
        _p("c1", float, 1.0, "far-visibility constant"),
        _p("start", _point, (1, 0, 0, 0), "second walker's origin offset"),
    ),
    "verify-all": (
        _p("only", str, "", "comma list of check names; empty runs all"),
    ),
}

COMMANDS = tuple(PARAMS)


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    command: str
    params: dict
    seed: int
    replicas: int
    output: Optional[str]
    format: str
    provenance: dict


def _flag(name):
    return "--" + name


def _read_config_file(path):
    entries = {}
    try:
        with open(path, "r", encoding="utf-8") as fp:
            for lineno, raw in enumerate(fp, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(
                        f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, val = line.partition("=")
                entries[key.strip()] = val.strip()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}")
    return entries


COMMON_KEYS = ("seed", "output", "format")


def parse_config(argv: Optional[Sequence[str]] = None) -> RunConfig:
    """argv (or sys.argv) to a fully-resolved, validated RunConfig."""
    parser = argparse.ArgumentParser(
        prog="avoidance",
        description="Random-walk estimators and the two-walk coupling "
                    "pipeline; every subcommand emits one report record.",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    for cmd, table in PARAMS.items():
        sp = subs.add_parser(cmd, help=f"run the {cmd} computation")
        for param in table:
            sp.add_argument(_flag(param.name), dest=param.name,
                            type=param.convert, default=argparse.SUPPRESS,
                            help=f"{param.help} (default {param.default!r})")
        sp.add_argument("--config", default=None,
                        help="flat key=value file; flags override it")
        sp.add_argument("--seed", dest="seed", type=int,
                        default=argparse.SUPPRESS,
                        help=f"top-level seed (default {DEFAULT_SEED})")
        sp.add_argument("--output", dest="output", default=argparse.SUPPRESS,
                        help="report path (default stdout)")
        sp.add_argument("--format", dest="format", choices=("json", "csv"),
                        default=argparse.SUPPRESS,
                        help="report format (default json)")

    ns = parser.parse_args(argv)
    cmd = ns.command
    table = {param.name: param for param in PARAMS[cmd]}

    resolved = {name: param.default for name, param in table.items()}
    common = {"seed": DEFAULT_SEED, "output": None, "format": "json"}
    provenance = {name: "default" for name in (*table, *COMMON_KEYS)}

    if ns.config is not None:
        for key, text in _read_config_file(ns.config).items():
            if key in table:
                try:
                    resolved[key] = table[key].convert(text)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise UsageError(f"config key {key!r}: {exc}")
            elif key == "seed":
                try:
                    common["seed"] = int(text)
                except ValueError:
                    raise UsageError(f"config key 'seed': not an integer: {text!r}")
            elif key in ("output", "format"):
                if key == "format" and text not in ("json", "csv"):
                    raise UsageError("config key 'format': must be json or csv")
                common[key] = text
            else:
                raise UsageError(f"unknown config key {key!r} for {cmd}")
            provenance[key] = "config"

    for name in table:
        if hasattr(ns, name):
            resolved[name] = getattr(ns, name)
            provenance[name] = "flag"
    for name in COMMON_KEYS:
        if hasattr(ns, name):
            common[name] = getattr(ns, name)
            provenance[name] = "flag"

    for name, value in resolved.items():
        if isinstance(value, int) and not isinstance(value, bool):
            if name in ("replicas", "outer", "inner", "T", "steps") and value < 1:
                raise UsageError(f"--{name} must be a positive integer")

    return RunConfig(
        command=cmd,
        params=resolved,
        seed=common["seed"],
        replicas=int(resolved.get("replicas", 1)),
        output=common["output"],
        format=common["format"],
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Command runners
# ---------------------------------------------------------------------------

def _est_fields(est: Estimate) -> dict:
    return {
        "value": float(est.value),
        "stderr": float(est.stderr),
        "ci95": [float(est.ci95[0]), float(est.ci95[1])],
    }


def _run_green(p, rng):
    return _est_fields(estimate_green(p["x"], p["replicas"], rng,
                                      truncation_radius=p["truncation"]))


def _run_annulus(p, rng):
    return _est_fields(annulus_exit_prob(p["n"], p["a"], p["A"],
                                         p["replicas"], rng))


def _run_exit_time(p, rng):
    res = exit_time_tail(p["n"], p["replicas"], rng)
    body = _est_fields(res.mean)
    body["tails"] = [[int(t), float(e.value), float(e.stderr)]
                     for t, e in res.tails]
    return body


def _run_boundary_layer(p, rng):
    return _est_fields(boundary_layer_tail(p["n"], p["k"], p["lam"],
                                           p["replicas"], rng))


def _run_hitting_measure(p, rng):
    return _est_fields(hitting_measure_max(p["n"], p["m"], p["x"],
                                           p["replicas"], rng))


def _run_escape(p, rng):
    return _est_fields(escape_curved_boundary_prob(p["n"], p["x"], p["k"],
                                                   p["replicas"], rng))


def _run_invsq(p, rng):
    sums = inverse_square_samples(p["n"], p["replicas"], rng)
    mean = float(sums.mean())
    se = float(sums.std(ddof=1) / math.sqrt(len(sums))) if len(sums) > 1 else 0.0
    return {
        "value": mean,
        "stderr": se,
        "ci95": [mean - 1.96 * se, mean + 1.96 * se],
        "log2_n": math.log2(p["n"]) if p["n"] > 1 else 0.0,
    }


def _run_intersect(p, rng):
    return _est_fields(intersection_prob(p["s1"], p["s2"], p["m"],
                                         p["replicas"], rng))


def _run_moments(p, rng):
    return _est_fields(moment_sum(p["n"], p["m"], p["k"], p["r"],
                                  p["replicas"], rng))


def _run_good_times(p, rng):
    if p["steps"] < 2 * p["window"] + 1:
        raise UsageError("steps must exceed twice the window")
    fracs = np.empty(p["replicas"], dtype=np.float64)
    for i in range(p["replicas"]):
        path = walk_fixed_length(origin(4), p["steps"], rng.child(i))
        mask = classify_good_times(path, p["n"], p["lam"], p["window"])
        flags = mask.flags
        fracs[i] = 1.0 - float(flags.mean()) if len(flags) else 0.0
    mean = float(fracs.mean())
    se = float(fracs.std(ddof=1) / math.sqrt(len(fracs))) if len(fracs) > 1 else 0.0
    return {
        "value": mean,
        "stderr": se,
        "ci95": [mean - 1.96 * se, mean + 1.96 * se],
    }


def _run_hittability(p, rng):
    sweep = hittability_sweep(p["n"], p["m"], list(p["eps"]), p["outer"],
                              p["inner"], rng)
    rows = [[float(eps), float(est.value), float(est.stderr), int(p["outer"])]
            for eps, est in sweep]
    last = sweep[-1][1]
    body = _est_fields(last)
    body["sweep"] = rows
    return body


def _run_event_h(p, rng):
    k = p["k"] if p["k"] is not None else p["n"] / math.log2(p["n"])
    est = event_H_prob(p["n"], k, p["c1"], p["outer"], p["inner"], rng,
                       grid_size=p["grid"], horizon_factor=p["horizon"])
    body = _est_fields(est)
    body["k"] = float(k)
    return body


def _run_couple_step(p, rng):
    res = one_step_couple(
        p["s1"], p["s2"], p["n"], p["m"], p["T"], (), rng,
        separation=p["separation"], sample_size=p["sample-size"],
        hittability_budget=p["budget"], epsilon_filter=p["epsilon"],
    )
    body = _est_fields(res.success_prob)
    body["step"] = _jsonable(res.record)
    return body


def _drive_summary(result) -> dict:
    return {
        "success": bool(result.success),
        "disjoint": bool(result.disjoint),
        "failed_step": result.failed_step,
        "reason": result.reason,
        "p_sequence": [float(x) for x in result.p_sequence],
    }


def _run_drive(p, rng):
    schedule = make_schedule(list(p["radii"]))
    sched_rows = [[s.index, float(s.inner_radius), float(s.outer_radius),
                   float(s.separation)] for s in schedule]
    kw = dict(sample_size=p["sample-size"], hittability_budget=p["budget"],
              c1=p["c1"], start=p["start"])
    if p["replicas"] == 1:
        res = multiscale_drive(schedule, None, rng.child(0), **kw)
        ok = res.success and res.disjoint
        return {
            "value": 1.0 if ok else 0.0,
            "stderr": None,
            "ci95": None,
            "schedule": sched_rows,
            "steps": _jsonable(list(res.steps)),
            "p_sequence": [float(x) for x in res.p_sequence],
            "disjoint": bool(res.disjoint),
            "reason": res.reason,
            "segments": {"first": _jsonable(list(res.segments1)),
                         "second": _jsonable(list(res.segments2))},
        }
    drives = []
    hits = 0
    for i in range(p["replicas"]):
        res = multiscale_drive(schedule, None, rng.child(i), **kw)
        hits += bool(res.success and res.disjoint)
        drives.append(_drive_summary(res))
    est = Estimate.from_binomial(hits, p["replicas"], rng)
    body = _est_fields(est)
    body["schedule"] = sched_rows
    body["drives"] = drives
    return body


def _run_verify_all(p, rng, seed):
    names = tuple(x for x in p["only"].split(",") if x) or None
    checks = acceptance.run_all(seed, only=names)
    return {
        "value": sum(c.passed for c in checks) / len(checks),
        "stderr": None,
        "ci95": None,
        "passed": all(c.passed for c in checks),
        "checks": [{
            "name": c.name,
            "passed": bool(c.passed),
            "detail": c.detail,
            "numbers": _jsonable(c.numbers),
            "wall_time": float(c.wall_time),
        } for c in checks],
    }


RUNNERS = {
    "green": _run_green,
    "annulus": _run_annulus,
    "exit-time": _run_exit_time,
    "boundary-layer": _run_boundary_layer,
    "hitting-measure": _run_hitting_measure,
    "escape": _run_escape,
    "invsq": _run_invsq,
    "intersect": _run_intersect,
    "moments": _run_moments,
    "good-times": _run_good_times,
    "hittability": _run_hittability,
    "event-h": _run_event_h,
    "couple-step": _run_couple_step,
    "drive": _run_drive,
}


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, int, float, str)) or value is None:
        return value
    return str(value)


def run(config: RunConfig) -> dict:
    """Execute the command and assemble the full report record."""
    t0 = time.perf_counter()
    rng = RandomStream(config.seed).tagged(config.command)
    if config.command == "verify-all":
        body = _run_verify_all(config.params, rng, config.seed)
    else:
        body = RUNNERS[config.command](config.params, rng)
    record = {
        "schema": SCHEMA_VERSION,
        "version": VERSION_STRING,
        "command": config.command,
        "seed": config.seed,
        "replicas": config.replicas,
        "params": _jsonable(config.params),
        "provenance": dict(config.provenance),
    }
    record.update(body)
    record["wall_time"] = time.perf_counter() - t0
    return record


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def render(record: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(record, indent=2, sort_keys=True) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf)
    if record["command"] == "hittability":
        writer.writerow(["ε", "δ", "stderr", "replicas"])
        for row in record["sweep"]:
            writer.writerow(row)
    elif record["command"] == "verify-all":
        writer.writerow(["name", "passed", "detail", "wall_time"])
        for check in record["checks"]:
            writer.writerow([check["name"], check["passed"], check["detail"],
                             check["wall_time"]])
    else:
        writer.writerow(["command", "seed", "value", "stderr", "ci_lo",
                         "ci_hi", "replicas", "wall_time"])
        ci = record.get("ci95") or [None, None]
        writer.writerow([record["command"], record["seed"], record["value"],
                         record.get("stderr"), ci[0], ci[1],
                         record["replicas"], record["wall_time"]])
    return buf.getvalue()


def emit_report(record: dict, config: RunConfig) -> str:
    """Render and write the record; returns the rendered text."""
    text = render(record, config.format)
    if config.output is None:
        sys.stdout.write(text)
    else:
        try:
            with open(config.output, "w", encoding="utf-8") as fp:
                fp.write(text)
        except OSError as exc:
            raise IoError(f"cannot write report to {config.output}: {exc}")
    return text


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        config = parse_config(argv)
        record = run(config)
        emit_report(record, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AvoidanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    if config.command == "verify-all" and not record["passed"]:
        return 1
    return 0
