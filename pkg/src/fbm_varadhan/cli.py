"""Command-line interface: ``fbm-varadhan <command> [options]``.

Every command resolves a configuration (defaults, then an optional YAML file,
then command-line flags), runs, and writes one JSON document that embeds the
resolved configuration and the package version. Output is sorted and free of
timestamps, so identical configurations give byte-identical files.

Exit codes: 0 pass, 1 verdict failure, 2 usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .density import DEFAULT_EPS, varadhan_report
from .errors import DomainError, FbmError, FlowBlowUp, InfeasibleTarget, JetOrderError, OmegaSpanError
from .fields import box_sampler, build_bracket_table, hypo_check
from .gaussian_driver import DEFAULT_PAIRS, FbmEnsemble, GridSpec, empirical_covariance_report, sample_fbm
from .malliavin import inv_gamma_scaling, write_scaling_csv
from .rate import minimize_energy, minimize_energy_restricted, minimize_pair
from .systems import DEFAULT_X0, REGISTRY, from_expressions, get_system

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "system": "scalar-linear",
    "fields": None,
    "H": 0.5,
    "x0": None,
    "m": 16,
    "substeps": 1,
    "seed": 0,
    "workers": 1,
    "fbm_check": {"N": 100000, "m": 64, "d": 1, "method": "circulant", "threshold": 4.0, "sample_H": None},
    "hypo_check": {"l": 3, "trials": 1000, "box": None},
    "rate": {"y": None, "restricted": False, "delta_det": 1e-6, "restarts": 8, "grids": [8, 16, 32], "y_grid": None},
    "density": {"y": None, "eps_grid": list(DEFAULT_EPS), "N": 200000, "importance": True, "delta_det": 1e-6},
    "scaling": {"eps_grid": [1.0, 0.5, 0.25, 0.125], "N": 500, "m": 32, "substeps": 2, "bounds": None},
}


class UsageError(Exception):
    pass


def version_string() -> str:
    """``git describe``-style version; falls back to the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _floats(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(",", " ").split()]


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a mapping")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = _merge(cfg, loaded)
    for key in ("system", "H", "m", "substeps", "seed", "workers"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "x0", None) is not None:
        cfg["x0"] = _floats(args.x0)
    block = {"fbm-check": "fbm_check", "hypo-check": "hypo_check", "rate": "rate", "density": "density",
             "scaling": "scaling", "report": "density"}.get(args.command)
    for key, v in vars(args).items():
        if key.startswith("opt_") and v is not None:
            name = key[4:]
            target = "rate" if name in ("restricted", "restarts", "grids", "y_grid") and block == "density" else block
            if name in ("y", "eps_grid", "box", "bounds", "grids"):
                v = _floats(v)
            cfg[target][name] = v
    if args.command == "report" and cfg["density"]["y"] is not None:
        cfg["rate"]["y"] = cfg["density"]["y"]
    if cfg["fields"] is not None:
        cfg["system"] = "inline"
    elif cfg["system"] not in REGISTRY:
        raise UsageError(f"unknown system {cfg['system']!r}; choose from {sorted(REGISTRY)}")
    if cfg["x0"] is None:
        cfg["x0"] = DEFAULT_X0.get(cfg["system"])
    return cfg


def _system(cfg):
    if cfg["fields"] is not None:
        return from_expressions(cfg["fields"])
    return get_system(cfg["system"])


def _x0(cfg, sys_):
    x0 = cfg["x0"] if cfg["x0"] is not None else [0.0] * sys_.n
    if len(x0) != sys_.n:
        raise UsageError(f"x0 needs {sys_.n} entries")
    return np.asarray(x0, dtype=float)


def _dump(doc, path):
    text = json.dumps(doc, sort_keys=True, indent=2, allow_nan=False, default=_jsonable) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serialisable: {type(v)}")


def _clean(obj):
    """Replace non-finite floats with strings so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not np.isfinite(obj):
        return "nan" if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _document(cfg, command, result, status):
    return _clean({"command": command, "config": cfg, "version": version_string(), "status": status, "result": result})


# ---------------------------------------------------------------------------
# commands


def cmd_fbm_check(cfg):
    o = cfg["fbm_check"]
    if int(o["N"]) < 1:
        raise UsageError("fbm-check needs N >= 1")
    spec = GridSpec(int(o["m"]), float(cfg["H"]), int(o["d"]))
    sample_H = o["sample_H"] if o["sample_H"] is not None else cfg["H"]
    ens = sample_fbm(GridSpec(spec.m, float(sample_H), spec.d), int(o["N"]), int(cfg["seed"]), o["method"])
    ens = FbmEnsemble(spec, ens.paths, ens.seed, ens.method, ens.fallback, ens.notes)
    rows = empirical_covariance_report(ens, DEFAULT_PAIRS)
    ok = all(abs(r["z"]) < float(o["threshold"]) for r in rows)
    return {"rows": rows, "fallback": ens.fallback, "notes": ens.notes}, ok


def cmd_hypo_check(cfg):
    o = cfg["hypo_check"]
    s = _system(cfg)
    table = build_bracket_table(s, int(o["l"]))
    box = o["box"] or list(s.box)
    lam, pt = hypo_check(table, box_sampler(s, int(cfg["seed"]), box[0], box[1], _x0(cfg, s)), int(o["trials"]))
    return {"lambda_hat": lam, "argmin": pt.tolist(), "words": len(table.words), "caveat": "sampled"}, lam > 0


def _rate_opts(cfg):
    o = cfg["rate"]
    return {"restarts": int(o["restarts"]), "grids": tuple(int(g) for g in o["grids"]), "seed": int(cfg["seed"]),
            "substeps": max(4, int(cfg["substeps"]))}


def _rate_one(cfg, s, y):
    o = cfg["rate"]
    spec = GridSpec(int(cfg["m"]), float(cfg["H"]), s.d)
    x0 = _x0(cfg, s)
    if o["restricted"]:
        r, rR = minimize_pair(y, s, x0, spec, float(o["delta_det"]), _rate_opts(cfg))
        ok = (not rR.feasible) or (r.d2 <= rR.d2 + 1e-12)
        return {"d2": r.to_dict(), "d2R": rR.to_dict(), "inclusion_ok": bool(ok)}, ok
    r = minimize_energy(y, s, x0, spec, _rate_opts(cfg))
    return {"d2": r.to_dict()}, True


def cmd_rate(cfg, csv_path=None):
    o = cfg["rate"]
    s = _system(cfg)
    if o["y_grid"]:
        ys = [_floats(line) for line in Path(o["y_grid"]).read_text().splitlines() if line.strip()]
        results, ok = [], True
        for y in ys:
            res, good = _rate_one(cfg, s, y)
            results.append({"y": y, **res})
            ok = ok and good
        if csv_path:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"y{k + 1}" for k in range(s.n)] + ["d2", "d2R"])
                for r in results:
                    d2 = r["d2"]["d2"]
                    d2R = r["d2R"]["d2"] if "d2R" in r else ""
                    w.writerow([repr(v) for v in r["y"]] + [repr(d2) if d2 is not None else "inf", d2R if d2R != "" else ""])
        return {"batch": results}, ok
    if o["y"] is None:
        raise UsageError("rate needs a target --y")
    return _rate_one(cfg, s, o["y"])


def _density(cfg, s):
    o = cfg["density"]
    if o["y"] is None:
        raise UsageError("density needs a target --y")
    if int(o["N"]) < 1000:
        raise UsageError("density needs N >= 1000")
    x0 = _x0(cfg, s)
    spec = GridSpec(int(cfg["m"]), float(cfg["H"]), s.d)
    rates = minimize_pair(o["y"], s, x0, spec, float(o["delta_det"]), _rate_opts(cfg))
    rep = varadhan_report(s, x0, float(cfg["H"]), o["y"], o["eps_grid"], int(o["N"]), int(cfg["seed"]),
                          int(cfg["m"]), int(cfg["substeps"]), rates, float(o["delta_det"]), bool(o["importance"]))
    return rep, rates


def cmd_density(cfg, csv_path=None, plot_path=None):
    s = _system(cfg)
    rep, _ = _density(cfg, s)
    if csv_path:
        rep.write_csv(csv_path)
    if plot_path:
        rep.write_plot_data(plot_path)
    return rep.to_dict(), rep.passed


def cmd_scaling(cfg, csv_path=None):
    o = cfg["scaling"]
    s = _system(cfg)
    rep = inv_gamma_scaling(s, _x0(cfg, s), float(cfg["H"]), o["eps_grid"], int(o["N"]), int(cfg["seed"]),
                            int(o["m"]), int(o["substeps"]))
    if csv_path:
        write_scaling_csv(rep, csv_path)
    ok = True
    if o["bounds"]:
        lo, hi = o["bounds"]
        ok = bool(lo <= rep.slope <= hi)
    return rep.to_dict(), ok


def cmd_report(cfg):
    s = _system(cfg)
    rep, (r, rR) = _density(cfg, s)
    d = rep.to_dict()
    if not np.isfinite(r.d2):
        verdict = "UNREACHABLE"
        note = "density decays faster than any exp(-c/eps^2) scale tested"
        ok = True
    else:
        verdict = "PASS" if rep.passed else "FAIL"
        note = ""
        ok = rep.passed
    table = {
        "system": s.name,
        "y": d["y"],
        "d2": d["d2"],
        "d2R": d["d2R"],
        "v0": d["v0"],
        "v0_ci": d["v0_ci"],
        "tol": d["tol"],
        "upper_ok": d["upper_ok"],
        "lower_ok": d["lower_ok"],
        "verdict": verdict,
        "note": note,
    }
    return {"verdict": table, "rate": {"d2": r.to_dict(), "d2R": rR.to_dict()}, "density": d}, ok


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbm-varadhan", description="fBm-driven SDE densities and rate functions")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML configuration file")
        sp.add_argument("--system", help=f"one of {sorted(REGISTRY)}")
        sp.add_argument("--H", type=float)
        sp.add_argument("--x0", help="start point, comma separated")
        sp.add_argument("--m", type=int, help="grid steps")
        sp.add_argument("--substeps", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help="parallelism cap (results do not depend on it)")
        sp.add_argument("--out", help="write JSON here instead of stdout")
        sp.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    sp = sub.add_parser("fbm-check", help="empirical vs exact fBm covariance")
    common(sp)
    sp.add_argument("--N", dest="opt_N", type=int)
    sp.add_argument("--threshold", dest="opt_threshold", type=float)
    sp.add_argument("--method", dest="opt_method", choices=["circulant", "cholesky"])

    sp = sub.add_parser("hypo-check", help="sampled uniform spanning constant")
    common(sp)
    sp.add_argument("--l", dest="opt_l", type=int)
    sp.add_argument("--trials", dest="opt_trials", type=int)
    sp.add_argument("--box", dest="opt_box", help="low,high")

    sp = sub.add_parser("rate", help="energy minimisation d2 / d2_R")
    common(sp)
    sp.add_argument("--y", dest="opt_y")
    sp.add_argument("--restricted", dest="opt_restricted", action="store_const", const=True)
    sp.add_argument("--delta-det", dest="opt_delta_det", type=float)
    sp.add_argument("--restarts", dest="opt_restarts", type=int)
    sp.add_argument("--y-grid", dest="opt_y_grid", help="file with one target per line")
    sp.add_argument("--csv")

    for name, helptext in (("density", "Monte Carlo density slope"), ("report", "rate and density verdict")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--y", dest="opt_y")
        sp.add_argument("--eps-grid", dest="opt_eps_grid")
        sp.add_argument("--N", dest="opt_N", type=int)
        sp.add_argument("--delta-det", dest="opt_delta_det", type=float)
        sp.add_argument("--restarts", dest="opt_restarts", type=int)
        if name == "density":
            sp.add_argument("--csv")
            sp.add_argument("--plot")

    sp = sub.add_parser("scaling", help="inverse Malliavin matrix scaling in eps")
    common(sp)
    sp.add_argument("--eps-grid", dest="opt_eps_grid")
    sp.add_argument("--N", dest="opt_N", type=int)
    sp.add_argument("--bounds", dest="opt_bounds", help="low,high accepted slope range")
    sp.add_argument("--csv")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_PASS
    try:
        cfg = resolve_config(args)
        if args.print_config:
            _dump({"config": _clean(cfg), "version": version_string()}, args.out)
            return EXIT_PASS
        cmd = args.command
        if cmd == "fbm-check":
            result, ok = cmd_fbm_check(cfg)
        elif cmd == "hypo-check":
            result, ok = cmd_hypo_check(cfg)
        elif cmd == "rate":
            result, ok = cmd_rate(cfg, args.csv)
        elif cmd == "density":
            result, ok = cmd_density(cfg, args.csv, args.plot)
        elif cmd == "scaling":
            result, ok = cmd_scaling(cfg, args.csv)
        else:
            result, ok = cmd_report(cfg)
    except (UsageError, DomainError, JetOrderError) as exc:
        sys.stderr.write(f"[{args.command}] usage error: {exc}\n")
        return EXIT_USAGE
    except (FlowBlowUp, OmegaSpanError, FbmError, InfeasibleTarget, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"[{args.command}] numerical failure: {type(exc).__name__}: {exc}\n")
        return EXIT_NUMERIC
    _dump(_document(cfg, cmd, result, "pass" if ok else "fail"), args.out)
    return EXIT_PASS if ok else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
