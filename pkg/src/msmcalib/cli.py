"""Command-line front end.

Every option can come from a flag or from ``--config FILE``; flags win.
Config files are ``key = value`` lines (keys as the long flag names, with
dashes or underscores) or the ``manifest.json`` of an earlier run, which
makes any run replayable from its manifest.

Exit status: 0 success, 2 usage, 3 data/validation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import platform
import sys
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import calibrate as cal
from .dataset import LongitudinalDataset, load_long
from .errors import ConvergenceError, DataError, InfeasibleCalibrationError, MsmCalibError, NumericalError
from .msm import MsmSpec, bootstrap, fit_msm
from .pipeline import (
    CoefficientPipeline,
    PipelineConfig,
    add_derived,
    build_system,
    initial_weights,
    run_pipeline,
)
from .restrictions import write_diagnostics
from .simulate import ESTIMATORS, ScenarioConfig, run_study
from .weights import fit_censoring_model, fit_treatment_model, read_weights, write_weights

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4

# option name -> (type, default, help); shared by flags and config files
_MODEL_OPTIONS = {
    "data": (str, None, "long-format CSV input"),
    "treatment_kind": (str, None, "ordinal3, binary or continuous (default: detected from columns)"),
    "numerator_a0": (str, None, "numerator formula for a0 (binary/ordinal)"),
    "numerator_a1": (str, None, "numerator formula for a1 given a0 = 1 (ordinal)"),
    "denominator_a0": (str, None, "denominator formula for a0"),
    "denominator_a1": (str, None, "denominator formula for a1 given a0 = 1"),
    "numerator_mean": (str, None, "numerator mean formula (continuous)"),
    "numerator_logvar": (str, None, "numerator log-variance formula (continuous)"),
    "denominator_mean": (str, None, "denominator mean formula (continuous)"),
    "denominator_logvar": (str, None, "denominator log-variance formula (continuous)"),
    "probe_a0": (str, None, "probe formula for a0 restrictions (default: denominator)"),
    "probe_a1": (str, None, "probe formula for a1 restrictions"),
    "probe_mean": (str, None, "probe mean formula (continuous)"),
    "probe_logvar": (str, None, "probe log-variance formula (continuous)"),
    "censoring": (str, None, "censoring model formula; omit when there is no dropout"),
    "stabilizer": (str, None, "treatment-history-only censoring formula for stabilized censoring weights"),
    "probe_censoring": (str, None, "probe censoring formula (default: censoring formula)"),
    "normalization": (str, "per_visit", "per_visit, single or none"),
    "target": (str, "repeated", "repeated or eventual outcome"),
    "scaling": (str, "none", "none, per_visit_to_n or total_to_nT"),
    "treatment_restrictions": (str, "yes", "include treatment balance restrictions (yes/no)"),
    "msm": (str, None, "MSM design formula, e.g. '1 + cum_a'"),
    "derived": (str, "", "cumulative columns 'name=expr;name=expr', e.g. 'cum_a=a0+a1'"),
    "treatment_terms": (str, "", "comma-separated MSM columns holding treatment effects"),
    "visits": (str, None, "analysis visit range 'lo,hi' (default 1,T)"),
    "tol": (float, 1e-8, "calibration tolerance, relative to max(1, max|l|)"),
    "out": (str, ".", "output directory"),
}

_COMMANDS = {
    "simulate": {
        "scenario": (int, 1, "1: no censoring; 2: covariate-dependent censoring"),
        "covariates": (str, "correct", "correct or transformed"),
        "n": (int, 500, "subjects per replicate"),
        "T": (int, 10, "follow-up visits"),
        "replicates": (int, 300, "number of replicates"),
        "seed": (int, 0, "base seed"),
        "noise_sd": (float, 20.0, "outcome error standard deviation"),
        "estimators": (str, "mle,cmle", "comma-separated subset of mle,cmle,true"),
        "jobs": (int, 1, "parallel worker processes"),
        "out": (str, ".", "output directory"),
    },
    "fit-weights": {k: v for k, v in _MODEL_OPTIONS.items() if k not in ("msm", "treatment_terms", "derived", "tol")},
    "calibrate": {**_MODEL_OPTIONS, "weights": (str, None, "initial weight CSV from fit-weights")},
    "fit-msm": {
        **{k: _MODEL_OPTIONS[k] for k in ("data", "treatment_kind", "msm", "derived", "treatment_terms", "visits", "out")},
        "weights": (str, None, "weight CSV (omit for an unweighted fit)"),
    },
    "bootstrap": {
        **_MODEL_OPTIONS,
        "B": (int, 200, "bootstrap replicates"),
        "seed": (int, 0, "base seed"),
        "jobs": (int, 1, "parallel worker processes"),
        "estimator": (str, "cmle", "mle or cmle"),
    },
    "diagnose": {**_MODEL_OPTIONS, "weights": (str, None, "weight CSV to diagnose (default: refit initial weights)")},
}

_SUMMARIES = {
    "simulate": "replication study on generated cohorts (bias, SD, RMSE)",
    "fit-weights": "fit weight models and write maximum-likelihood weights",
    "calibrate": "calibrate initial weights to the restriction system",
    "fit-msm": "weighted least-squares MSM fit",
    "bootstrap": "MSM estimates with subject-resampling bootstrap SEs",
    "diagnose": "per-restriction imbalance of a weight matrix",
}

_REQUIRED = {
    "fit-weights": ("data",),
    "calibrate": ("data", "weights"),
    "fit-msm": ("data", "msm"),
    "bootstrap": ("data", "msm"),
    "diagnose": ("data",),
}


class UsageError(Exception):
    pass


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msmcalib", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"msmcalib {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for cmd, opts in _COMMANDS.items():
        p = sub.add_parser(cmd, help=_SUMMARIES[cmd], description=_SUMMARIES[cmd])
        p.add_argument("--config", help="key = value file or manifest.json supplying options")
        for name, (typ, default, text) in opts.items():
            shown = "" if default in (None, "") else f" [default: {default}]"
            p.add_argument(_flag(name), dest=name, type=typ, default=None, help=text + shown)
    return parser


def _read_config(path: str) -> Dict[str, str]:
    text = Path(path).read_text()
    if path.endswith(".json"):
        cfg = json.loads(text)
        cfg = cfg.get("config", cfg)
        return {k: v for k, v in cfg.items() if v is not None}
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[options]\n" + text)
    return {k.replace("-", "_"): v for k, v in parser["options"].items()}


def resolve_options(command: str, ns: argparse.Namespace) -> Dict[str, object]:
    """Defaults, then the config file, then explicit flags."""
    opts = _COMMANDS[command]
    resolved = {name: default for name, (_, default, _) in opts.items()}
    if ns.config:
        if not os.path.exists(ns.config):
            raise DataError(f"config file not found: {ns.config}")
        for key, value in _read_config(ns.config).items():
            if key not in opts:
                if not any(key in o for o in _COMMANDS.values()):
                    raise UsageError(f"unknown config key {key!r}")
                continue  # shared config: key belongs to another command
            typ = opts[key][0]
            try:
                resolved[key] = typ(value)
            except ValueError:
                raise UsageError(f"config key {key!r}: cannot parse {value!r}") from None
    for name in opts:
        value = getattr(ns, name, None)
        if value is not None:
            resolved[name] = value
    missing = [k for k in _REQUIRED.get(command, ()) if not resolved.get(k)]
    if missing:
        raise UsageError(f"{command} needs {', '.join(_flag(m) for m in missing)}")
    return resolved


def _split(text: Optional[str]) -> List[str]:
    return [t.strip() for t in (text or "").split(",") if t.strip()]


def _derived(text: str) -> Dict[str, str]:
    out = {}
    for item in filter(None, (t.strip() for t in text.split(";"))):
        name, sep, expr = item.partition("=")
        if not sep or not name.strip() or not expr.strip():
            raise UsageError(f"derived column must look like name=expr, got {item!r}")
        out[name.strip()] = expr.strip()
    return out


def _visits(text: Optional[str]):
    if not text:
        return None
    parts = _split(text)
    try:
        lo, hi = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"visits must be 'lo,hi', got {text!r}") from None
    return lo, hi


def _load(opts) -> LongitudinalDataset:
    path = opts["data"]
    if not os.path.exists(path):
        raise DataError(f"data file not found: {path}")
    return load_long(path, treatment_kind=opts.get("treatment_kind"))


def pipeline_config(opts, data: LongitudinalDataset) -> PipelineConfig:
    parts = ("mean", "logvar") if data.treatment_kind == "continuous" else (
        ("a0", "a1") if data.treatment_kind == "ordinal3" else ("a0",)
    )

    def formulas(prefix, required=True):
        got = {p: opts.get(f"{prefix}_{p}") for p in parts}
        if all(v is None for v in got.values()) and not required:
            return None
        missing = [p for p, v in got.items() if v is None]
        if missing:
            raise UsageError(f"{data.treatment_kind} treatment needs {', '.join(_flag(f'{prefix}_{m}') for m in missing)}")
        return got

    flag = str(opts.get("treatment_restrictions", "yes")).lower()
    if flag not in ("yes", "no", "true", "false", "1", "0"):
        raise UsageError("treatment-restrictions must be yes or no")
    return PipelineConfig(
        numerator=formulas("numerator"),
        denominator=formulas("denominator"),
        msm_formula=opts.get("msm") or "1",
        censoring=opts.get("censoring"),
        stabilizer=opts.get("stabilizer"),
        probe_treatment=formulas("probe", required=False),
        probe_censoring=opts.get("probe_censoring"),
        normalization=opts.get("normalization", "per_visit"),
        target=opts.get("target", "repeated"),
        scaling=opts.get("scaling", "none"),
        treatment_restrictions=flag in ("yes", "true", "1"),
        derived=_derived(opts.get("derived") or ""),
        treatment_terms=tuple(_split(opts.get("treatment_terms"))),
        visits=_visits(opts.get("visits")),
        tol=float(opts.get("tol") or 1e-8),
    )


def _versions() -> Dict[str, str]:
    import numba
    import scipy

    return {
        "msmcalib": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def _write_manifest(out: Path, command: str, opts, outputs: Sequence[str], extra=None) -> None:
    manifest = {
        "command": command,
        "config": {k: v for k, v in opts.items()},
        "seed": opts.get("seed"),
        "versions": _versions(),
        "outputs": list(outputs),
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _dump(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_simulate(opts, out: Path):
    estimators = _split(opts["estimators"])
    bad = set(estimators) - set(ESTIMATORS)
    if bad:
        raise UsageError(f"unknown estimators {sorted(bad)}")
    config = ScenarioConfig.scenario(
        opts["scenario"],
        n=opts["n"],
        T=opts["T"],
        covariates=opts["covariates"],
        seed=opts["seed"],
        replicates=opts["replicates"],
        noise_sd=opts["noise_sd"],
    )
    summary = run_study(config, estimators, jobs=opts["jobs"])
    summary.write_csv(out / "summary.csv")
    (out / "summary.txt").write_text(summary.format_table() + "\n")
    print(summary.format_table())
    extra = {
        "scenario": config.to_dict(),
        "noise_interpretation": "outcome error N(0, noise_sd^2): noise_sd is a standard deviation",
        "failed_replicates": [list(f) for f in summary.failures],
    }
    return ["summary.csv", "summary.txt"], extra


def cmd_fit_weights(opts, out: Path):
    data = _load(opts)
    cfg = pipeline_config(opts, data)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        w0, _, _ = initial_weights(add_derived(data, cfg.derived), cfg)
    write_weights(w0, out / "weights.csv")
    _dump(out / "weights_provenance.json", dict(w0.provenance))
    return ["weights.csv", "weights_provenance.json"], {"warnings": [str(w.message) for w in caught]}


def _models(data, cfg: PipelineConfig):
    num = fit_treatment_model(data, cfg.numerator, cfg.visits)
    stab = fit_censoring_model(data, cfg.stabilizer, cfg.visits) if cfg.stabilizer else None
    return num, stab


def cmd_calibrate(opts, out: Path):
    data = _load(opts)
    cfg = pipeline_config(opts, data)
    data = add_derived(data, cfg.derived)
    w0 = read_weights(opts["weights"], data.ids, data.T)
    num, stab = _models(data, cfg)
    system = build_system(data, cfg, w0, num, stab)
    sol = cal.solve(w0, system, tol=cfg.tol)
    _dump(out / "solution.json", {**sol.to_dict(), "pruned": [list(p) for p in system.pruned]})
    if sol.infeasible or not sol.converged:
        raise (InfeasibleCalibrationError if sol.infeasible else ConvergenceError)(sol.message)
    w1 = cal.apply(w0, system, sol)
    write_weights(w1, out / "calibrated_weights.csv")
    write_diagnostics(system, out / "restrictions.csv", w0, w1)
    return ["calibrated_weights.csv", "solution.json", "restrictions.csv"], {}


def cmd_fit_msm(opts, out: Path):
    data = _load(opts)
    data = add_derived(data, _derived(opts.get("derived") or ""))
    w = read_weights(opts["weights"], data.ids, data.T) if opts.get("weights") else None
    spec = MsmSpec(opts["msm"], tuple(_split(opts.get("treatment_terms"))), _visits(opts.get("visits")))
    est = fit_msm(data, spec, w)
    est.write_csv(out / "estimates.csv")
    est.write_json(out / "estimates.json")
    return ["estimates.csv", "estimates.json"], {}


def cmd_bootstrap(opts, out: Path):
    data = _load(opts)
    cfg = pipeline_config(opts, data)
    if opts["estimator"] not in ("mle", "cmle"):
        raise UsageError("estimator must be mle or cmle")
    if opts["estimator"] == "mle":
        cfg = replace(cfg, calibrate=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_pipeline(data, cfg)
        boot = bootstrap(data, CoefficientPipeline(cfg, opts["estimator"]), opts["B"], opts["seed"], jobs=opts["jobs"])
    est = res.cmle if opts["estimator"] == "cmle" else res.mle
    est = replace(
        est,
        bootstrap_se=boot.se,
        replicates_used=boot.replicates_used,
        failed_replicates=boot.failed_replicates,
        extra={"failure_rate": boot.failure_rate, "failures": [list(f) for f in boot.failures]},
    )
    est.write_csv(out / "estimates.csv")
    est.write_json(out / "estimates.json")
    return ["estimates.csv", "estimates.json"], {}


def cmd_diagnose(opts, out: Path):
    data = _load(opts)
    cfg = pipeline_config(opts, data)
    data = add_derived(data, cfg.derived)
    w0, num, stab = initial_weights(data, cfg)
    w = read_weights(opts["weights"], data.ids, data.T) if opts.get("weights") else w0
    system = build_system(data, cfg, w, num, stab)
    report = cal.imbalance(w, system)
    lines = ["label,l,residual,scaled_residual"]
    raw = system.residual(w)
    for (lab, scaled), lv, rv in zip(report.rows(), system.l, raw):
        lines.append(f"{lab},{float(lv)!r},{float(rv)!r},{scaled!r}")
    (out / "imbalance.csv").write_text("\n".join(lines) + "\n")
    summary = {
        "max_abs_residual": float(np.max(np.abs(raw))) if raw.size else 0.0,
        "tolerance": cfg.tol * max(1.0, float(np.max(np.abs(system.l))) if raw.size else 1.0),
        "restrictions": system.r,
        "rows": system.m,
        "pruned": [list(p) for p in system.pruned],
        "weight_kind": w.kind,
    }
    _dump(out / "imbalance.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return ["imbalance.csv", "imbalance.json"], {}


_HANDLERS = {
    "simulate": cmd_simulate,
    "fit-weights": cmd_fit_weights,
    "calibrate": cmd_calibrate,
    "fit-msm": cmd_fit_msm,
    "bootstrap": cmd_bootstrap,
    "diagnose": cmd_diagnose,
}


def _fail(category: str, message: str, code: int) -> int:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        opts = resolve_options(ns.command, ns)
        out = Path(opts.get("out") or ".")
        out.mkdir(parents=True, exist_ok=True)
        outputs, extra = _HANDLERS[ns.command](opts, out)
        _write_manifest(out, ns.command, opts, outputs, extra)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except NumericalError as exc:
        return _fail("numerical", f"{type(exc).__name__}: {exc}", EXIT_NUMERICAL)
    except (DataError, MsmCalibError, OSError) as exc:
        return _fail("data", f"{type(exc).__name__}: {exc}", EXIT_DATA)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
