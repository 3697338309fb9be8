"""Command-line driver.

Usage::

    collapsed-ns run --config run.json --set m=200 --set model_params.N=256
    collapsed-ns diagnose --out results/
    collapsed-ns recover --out results/ --set S=500
    collapsed-ns bench-hessian --set sizes=[20,50,100]
    collapsed-ns reproduce funnel

Every output file carries ``schema_version`` and the resolved configuration.
Exit codes: 0 ok, 2 configuration error, 3 model error, 4 numerical failure,
5 reproduction check failed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collapse import CollapseOptions
from .diagnostics import ess_profile, posterior_ess, recover_posterior
from .errors import CollapseError, ConfigError, NotFound
from .models import SCHEMA_VERSION, get_model
from .nested import DeadTrace, NsResult, NsSettings, make_likelihood, run
from .reproduce import RECIPES, bench_hessian

EXIT_OK, EXIT_CONFIG, EXIT_MODEL, EXIT_NUMERICAL, EXIT_FAIL = 0, 2, 3, 4, 5
MODES = ("gaussian", "student", "exact-reference", "joint-full-ns")


@dataclass
class RunConfig:
    """Resolved run configuration.

    ``grid`` is ``[lo, hi, n]`` for a one-dimensional diagnostic grid over the
    first hyperparameter; when unset, diagnostics use ``M`` posterior draws.
    """

    model: str = "eight_schools"
    model_params: dict = field(default_factory=dict)
    mode: str = "gaussian"
    m: int = 500
    k: int = 100
    s: int = 5
    threshold: float = -3.0
    volume: str = "batch"
    n_boot: int = 200
    seed: int = 0
    output: str = "results"
    threads: int = 1
    nu_estimator: str = "taylor"
    K: int = 5000
    M: int = 200
    S: int = 2000
    proposal: str = "gaussian"
    grid: list | None = None
    sizes: list = field(default_factory=lambda: [20, 50, 100, 200])

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.proposal not in ("gaussian", "student"):
            raise ConfigError("proposal must be gaussian or student")
        if self.volume not in ("batch", "sequential"):
            raise ConfigError("volume must be batch or sequential")
        if self.nu_estimator not in ("taylor", "as_written"):
            raise ConfigError("nu_estimator must be taylor or as_written")
        for key in ("m", "k", "s", "n_boot", "threads", "K", "M", "S"):
            v = getattr(self, key)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{key} must be a positive integer")
        if self.m < 2 * self.k:
            raise ConfigError("need m >= 2 k")
        if not isinstance(self.model_params, dict):
            raise ConfigError("model_params must be an object")
        if self.grid is not None and (len(self.grid) != 3 or int(self.grid[2]) < 1):
            raise ConfigError("grid must be [lo, hi, n]")
        if not self.sizes or any(int(n) < 2 for n in self.sizes):
            raise ConfigError("sizes must be integers >= 2")
        try:
            float(self.threshold)
        except (TypeError, ValueError):
            raise ConfigError("threshold must be a number") from None
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=(), env=None):
    """Merge a JSON file, ``key=value`` overrides and ``ALCS_SEED``.

    Dotted keys set entries of ``model_params`` (``model_params.N=256``).

    Raises
    ------
    ConfigError
        On unreadable files, malformed overrides or unknown keys.
    """
    env = os.environ if env is None else env
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        value = _parse_value(text)
        if "." in key:
            head, sub = key.split(".", 1)
            if head != "model_params":
                raise ConfigError(f"unknown nested key {key!r}")
            data.setdefault("model_params", {})[sub] = value
        else:
            data[key] = value
    if "ALCS_SEED" in env:
        try:
            data["seed"] = int(env["ALCS_SEED"])
        except ValueError:
            raise ConfigError("ALCS_SEED must be an integer") from None
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    try:
        cfg = RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def fmt(x):
    """Float with 17 significant digits; ints and other scalars unchanged.

    Examples
    --------
    >>> fmt(0.1), fmt(3), fmt(float("-inf"))
    ('0.10000000000000001', '3', '-Infinity')
    """
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def dumps(obj):
    """JSON text with every float written to 17 significant digits."""
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, float, np.integer, np.floating)):
        return fmt(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _envelope(cfg, payload):
    return {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(), **payload}


def _write_json(path, obj):
    path.write_text(dumps(obj) + "\n")


def _write_csv(path, header, rows, cfg):
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION} config={dumps(cfg.to_dict())}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (int, float, np.number)) else v for v in r])


def read_csv(path):
    """Header and float rows of a CSV written by this module."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rd = csv.reader(lines)
    header = next(rd)
    return header, [[float(v) for v in row] for row in rd]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _model(cfg):
    try:
        return get_model(cfg.model, **cfg.model_params)
    except (KeyError, TypeError, ValueError) as exc:
        raise _ModelError(str(exc)) from None


class _ModelError(Exception):
    pass


def _options(cfg):
    return CollapseOptions(nu_estimator=cfg.nu_estimator)


def _outdir(cfg):
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(cfg):
    """Nested sampling run; writes summary, dead points and weighted posterior."""
    model = _model(cfg)
    try:
        like = make_likelihood(model, cfg.mode, _options(cfg))
    except ValueError as exc:
        raise _ModelError(str(exc)) from None
    res = run(like, cfg.mode, m=cfg.m, k=cfg.k, s=cfg.s, seed=cfg.seed, threshold=cfg.threshold,
              n_boot=cfg.n_boot, threads=cfg.threads, volume=cfg.volume, options=_options(cfg))
    out = _outdir(cfg)
    names = _theta_names(model, cfg)
    _write_json(out / "summary.json", _envelope(cfg, {
        "model": model.describe(), "logZ": res.log_z, "sigma": res.sigma, "N_dead": res.n_dead,
        "D_KL": res.dkl, "flagged_fraction": res.flagged_fraction, "n_eval": res.n_eval,
        "n_iter": res.n_iter, "seed": res.seed,
        "settings": dataclasses.asdict(res.settings)}))
    tr = res.trace
    with open(out / "deadpoints.jsonl", "w") as fh:
        for i in range(len(tr)):
            fh.write(dumps({"theta": tr.theta[i], "logl": tr.logl[i], "logx": tr.logx[i],
                            "logw": tr.logw[i], "flags": int(tr.flags[i]),
                            "live": bool(i >= tr.n_dead)}) + "\n")
    lw = res.log_weights
    _write_csv(out / "posterior.csv", names + ["logl", "log_weight", "flags"],
               [list(tr.theta[i]) + [tr.logl[i], lw[i], int(tr.flags[i])] for i in range(len(tr))],
               cfg)
    return EXIT_OK


def _theta_names(model, cfg):
    if cfg.mode == "joint-full-ns":
        return list(model.theta_names) + [f"z{j}" for j in range(model.d_z)]
    return list(model.theta_names)


def load_run(outdir):
    """Rebuild a nested-sampling result from ``summary.json`` and ``deadpoints.jsonl``.

    Raises
    ------
    NotFound
        If either file is missing.
    """
    out = Path(outdir)
    sp, dp = out / "summary.json", out / "deadpoints.jsonl"
    if not sp.exists() or not dp.exists():
        raise NotFound(f"no completed run in {out}")
    summary = json.loads(sp.read_text())
    recs = [json.loads(ln) for ln in dp.read_text().splitlines() if ln.strip()]
    theta = np.array([r["theta"] for r in recs], dtype=float)
    n_dead = int(summary["N_dead"])
    trace = DeadTrace(u=np.zeros((len(recs), 0)), theta=theta,
                      logl=np.array([r["logl"] for r in recs], dtype=float),
                      logx=np.array([r["logx"] for r in recs], dtype=float),
                      logw=np.array([r["logw"] for r in recs], dtype=float),
                      flags=np.array([r["flags"] for r in recs], dtype=int), n_dead=n_dead,
                      nlive=np.zeros(n_dead))
    st = summary["settings"]
    settings = NsSettings(**st)
    return NsResult(log_z=summary["logZ"], sigma=summary["sigma"], n_dead=n_dead,
                    dkl=summary["D_KL"], trace=trace, settings=settings, seed=summary["seed"],
                    n_eval=summary["n_eval"], n_iter=summary["n_iter"]), summary


def _run_or_load(cfg, fresh):
    if fresh:
        code = cmd_run(cfg)
        if code:
            return None
    return load_run(cfg.output)[0]


def cmd_diagnose(cfg, fresh=False):
    """ESS profile over a grid or posterior draws; writes diagnostics files."""
    model = _model(cfg)
    out = _outdir(cfg)
    if cfg.grid is not None:
        lo, hi, n = cfg.grid
        thetas = np.zeros((int(n), model.d_theta))
        thetas[:, 0] = np.linspace(float(lo), float(hi), int(n))
        if fresh:
            cmd_run(cfg)
        prof = ess_profile(model, thetas, cfg.K, cfg.proposal, cfg.seed, _options(cfg))
    else:
        res = _run_or_load(cfg, fresh)
        prof = posterior_ess(res, model, cfg.M, cfg.K, cfg.proposal, cfg.seed, _options(cfg))
    _write_json(out / "diagnostics.json", _envelope(cfg, {
        "model": model.describe(), "proposal": cfg.proposal, "K": cfg.K,
        "quantiles": prof.quantiles, "median_ess_fraction": prof.median,
        "n_points": len(prof.records),
        "n_degenerate": int(sum(r["degenerate"] for r in prof.records))}))
    names = list(model.theta_names)
    _write_csv(out / "ess_profile.csv",
               names + ["logl", "ess_fraction", "log_mean_weight", "corrected_logl", "flags"],
               [r["theta"] + [r["logl"], r["ess_fraction"], r["log_mean_weight"],
                              r["corrected_logl"], r["flags"]] for r in prof.records], cfg)
    return EXIT_OK


def cmd_recover(cfg, fresh=False):
    """Joint posterior draws; writes ``joint_samples.csv``."""
    model = _model(cfg)
    res = _run_or_load(cfg, fresh)
    js = recover_posterior(res, model, cfg.S, cfg.seed, _options(cfg))
    out = _outdir(cfg)
    header = list(model.theta_names) + [f"z{j}" for j in range(model.d_z)] + ["flags"]
    rows = [list(js.theta[i]) + list(js.z[i]) + [int(js.flags[i])] for i in range(len(js))]
    _write_csv(out / "joint_samples.csv", header, rows, cfg)
    return EXIT_OK


def cmd_bench_hessian(cfg):
    """Dense vs tridiagonal Hessian timing; writes ``bench.csv``."""
    rep = bench_hessian(tuple(int(n) for n in cfg.sizes), seed=cfg.seed)
    out = _outdir(cfg)
    _write_csv(out / "bench.csv", ["d_z", "t_dense", "t_tri", "max_deviation"],
               [[r["d_z"], r["t_dense"], r["t_tri"], r["max_deviation"]] for r in rep["rows"]],
               cfg)
    return EXIT_OK if all(c["passed"] for c in rep["checks"]) else EXIT_FAIL


def cmd_reproduce(cfg, table):
    """Run a desk-scale recipe and write ``report.json`` with PASS/FAIL rows."""
    if table not in RECIPES:
        raise ConfigError(f"unknown table {table!r}; choose from {sorted(RECIPES)}")
    rep = RECIPES[table]()
    out = _outdir(cfg)
    rows = [{"name": c["name"], "observed": c["value"], "paper": c["paper"],
             "tolerance": c["target"], "result": "PASS" if c["passed"] else "FAIL"}
            for c in rep["checks"]]
    _write_json(out / "report.json", _envelope(cfg, {"table": table, "rows": rows,
                                                     "details": rep}))
    for r in rows:
        print(f"{r['result']}: {r['name']} observed={r['observed']} tolerance={r['tolerance']}")
    return EXIT_OK if all(r["result"] == "PASS" for r in rows) else EXIT_FAIL


def build_parser():
    ap = argparse.ArgumentParser(prog="collapsed-ns", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration key (repeatable)")
        p.add_argument("--out", help="output directory (same as --set output=...)")
        p.add_argument("--threads", type=int, help="concurrent evaluation chunks")
        return p

    common(sub.add_parser("run", help="nested sampling run"))
    common(sub.add_parser("diagnose", help="importance-sampling ESS diagnostics")).add_argument(
        "--fresh", action="store_true", help="run the sampler first")
    common(sub.add_parser("recover", help="joint posterior recovery")).add_argument(
        "--fresh", action="store_true", help="run the sampler first")
    common(sub.add_parser("bench-hessian", help="dense vs tridiagonal Hessian benchmark"))
    rp = common(sub.add_parser("reproduce", help="desk-scale reproduction recipe"))
    rp.add_argument("table", choices=sorted(RECIPES))
    return ap


def _error(code, exc):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                 "exit_code": code}) + "\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if args.out:
            overrides.append(f"output={json.dumps(args.out)}")
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        cfg = load_config(args.config, overrides)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "diagnose":
            return cmd_diagnose(cfg, args.fresh)
        if args.command == "recover":
            return cmd_recover(cfg, args.fresh)
        if args.command == "bench-hessian":
            return cmd_bench_hessian(cfg)
        return cmd_reproduce(cfg, args.table)
    except (ConfigError, NotFound) as exc:
        return _error(EXIT_CONFIG, exc)
    except _ModelError as exc:
        return _error(EXIT_MODEL, exc)
    except (CollapseError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _error(EXIT_NUMERICAL, exc)


if __name__ == "__main__":
    sys.exit(main())
