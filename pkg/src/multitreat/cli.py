"""Command-line interface: estimate effects on a CSV, trim, report balance, simulate.

Configuration comes from an optional JSON file plus flags; flags win. Every
output file embeds the resolved-config hash and the seed, and no output
contains timestamps or other run-varying content, so identical invocations
produce byte-identical files. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .balance import balance_report, report_to_csv, report_to_json
from .dataset import CsvSchema, load_csv
from .errors import ConfigError, DataError, MultitreatError, NumericalError
from .estimators import (
    ALL_METHODS,
    POPULATION_FULL,
    POPULATION_TRIMMED,
    contrast_pairs,
    effects_from_imputation,
    estimate_dif,
    estimate_gpss,
    estimate_weighting,
    estimates_to_csv,
    estimates_to_json,
    impute_matrix,
    ppsm_components,
)
from .gps import fit_multinomial_logit, model_to_json, predict_scores
from .inference import CiSpec, bootstrap_ci, matching_variance
from .simulation import design_by_name, run_monte_carlo, summary_to_csv, summary_to_json
from .simulation import RunOptions
from .trimming import mask_to_csv, trim, trim_result_to_json

_BOOT_TAGS = ("DIF", "GPSS", "W")

_COMMON_DEFAULTS = {
    "seed": 0,
    "ridge": 0.0,
    "output_dir": "out",
    "formats": ["csv", "json"],
}

_SCHEMA_DEFAULTS = {
    "input": None,
    "treatment_col": None,
    "outcome_col": None,
    "covariate_cols": None,
    "delimiter": ",",
}

_DEFAULTS = {
    "estimate": {
        **_COMMON_DEFAULTS,
        **_SCHEMA_DEFAULTS,
        "estimators": list(ALL_METHODS),
        "trim": False,
        "refit": True,
        "clip": None,
        "subclasses": 5,
        "bootstrap_reps": 1000,
        "level": 0.95,
        "gpsm_bootstrap": False,
    },
    "trim": {**_COMMON_DEFAULTS, **_SCHEMA_DEFAULTS, "refit": True},
    "balance": {**_COMMON_DEFAULTS, **_SCHEMA_DEFAULTS, "trim": False, "refit": True, "bins": 20},
    "simulate": {
        **_COMMON_DEFAULTS,
        "design": "design1",
        "reps": 1000,
        "workers": 1,
        "estimators": list(ALL_METHODS),
        "bootstrap_reps": 1000,
        "subclasses": 5,
        "clip": None,
        "level": 0.95,
        "gpsm_bootstrap": False,
        "fixed_arm_sizes": True,
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multitreat",
        description="Pairwise treatment-effect estimation under multi-level treatments",
    )
    parser.add_argument("--version", action="version", version=f"multitreat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--ridge", type=float, help="ridge penalty for the score model")
        p.add_argument("--output-dir")
        p.add_argument("--formats", help="comma-separated subset of csv,json")

    def add_schema(p):
        p.add_argument("--input", help="CSV file with a header row")
        p.add_argument("--treatment-col")
        p.add_argument("--outcome-col")
        p.add_argument("--covariate-cols", help="comma-separated covariate column names")
        p.add_argument("--delimiter")

    p = sub.add_parser("estimate", help="fit scores and estimate all pairwise effects")
    add_common(p)
    add_schema(p)
    p.add_argument("--estimators", help=f"comma-separated subset of {','.join(ALL_METHODS)}")
    p.add_argument("--trim", action=argparse.BooleanOptionalAction)
    p.add_argument("--refit", action=argparse.BooleanOptionalAction,
                   help="re-fit the score model on the trimmed sample")
    p.add_argument("--clip", type=float, nargs="?", const=1e-6,
                   help="floor for scores in weighting (default off; bare flag uses 1e-6)")
    p.add_argument("--subclasses", type=int)
    p.add_argument("--bootstrap-reps", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--gpsm-bootstrap", action=argparse.BooleanOptionalAction,
                   help="bootstrap GPSM instead of the matched-sample variance")

    p = sub.add_parser("trim", help="trim the sample for overlap and report the threshold")
    add_common(p)
    add_schema(p)
    p.add_argument("--refit", action=argparse.BooleanOptionalAction)

    p = sub.add_parser("balance", help="normalized differences and overlap histograms")
    add_common(p)
    add_schema(p)
    p.add_argument("--trim", action=argparse.BooleanOptionalAction,
                   help="also report balance after trimming")
    p.add_argument("--refit", action=argparse.BooleanOptionalAction)
    p.add_argument("--bins", type=int)

    p = sub.add_parser("simulate", help="Monte Carlo comparison of the estimators")
    add_common(p)
    p.add_argument("--design", choices=["design1", "design2"])
    p.add_argument("--reps", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--estimators")
    p.add_argument("--bootstrap-reps", type=int)
    p.add_argument("--subclasses", type=int)
    p.add_argument("--clip", type=float, nargs="?", const=1e-6)
    p.add_argument("--level", type=float)
    p.add_argument("--gpsm-bootstrap", action=argparse.BooleanOptionalAction)
    p.add_argument("--fixed-arm-sizes", action=argparse.BooleanOptionalAction)
    return parser


def _parse_list(value, what):
    if value is None or isinstance(value, list):
        return value
    items = [v.strip() for v in str(value).split(",") if v.strip()]
    if not items:
        raise ConfigError(f"empty {what} list")
    return items


def resolve_config(args: argparse.Namespace) -> dict:
    """Layer defaults, then the config file, then explicit flags."""
    command = args.command
    cfg = dict(_DEFAULTS[command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from None
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; valid keys: {sorted(cfg)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        cfg[key] = value
    cfg["command"] = command
    for key in ("estimators", "covariate_cols", "formats"):
        if key in cfg:
            cfg[key] = _parse_list(cfg[key], key)
    if "formats" in cfg:
        bad = [f for f in cfg["formats"] if f not in ("csv", "json")]
        if bad:
            raise ConfigError(f"unknown output formats {bad}")
    if "estimators" in cfg and cfg["estimators"] is not None:
        bad = [t for t in cfg["estimators"] if t not in ALL_METHODS]
        if bad:
            raise ConfigError(f"unknown estimator tags {bad}; valid: {list(ALL_METHODS)}")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _schema_from(cfg) -> CsvSchema:
    for key in ("input", "treatment_col", "outcome_col", "covariate_cols"):
        if not cfg.get(key):
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")
    return CsvSchema(
        treatment=cfg["treatment_col"],
        outcome=cfg["outcome_col"],
        covariates=list(cfg["covariate_cols"]),
        delimiter=cfg["delimiter"],
    )


class _Writer:
    """Writes outputs stamped with the config hash and seed."""

    def __init__(self, cfg):
        self.dir = Path(cfg["output_dir"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(cfg)
        self.seed = cfg["seed"]
        self.formats = cfg.get("formats", ["csv", "json"])
        self.stamp = f"config_hash={self.hash} seed={self.seed}"
        self.written: list[str] = []

    def csv(self, name, text):
        if "csv" in self.formats or name.endswith("_mask.csv"):
            body = text if text.startswith("#") else f"# {self.stamp}\n{text}"
            (self.dir / name).write_text(body)
            self.written.append(name)

    def json(self, name, payload):
        if "json" in self.formats or name == "metadata.json":
            obj = {"config_hash": self.hash, "seed": self.seed}
            obj.update(payload if isinstance(payload, dict) else json.loads(payload))
            (self.dir / name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
            self.written.append(name)


def _fit_and_scores(d, cfg):
    model = fit_multinomial_logit(d, ridge=cfg["ridge"])
    return model, predict_scores(model, d)


def _model_meta(model):
    return {
        "converged": model.converged,
        "iterations": model.iterations,
        "log_likelihood": model.log_likelihood,
        "T": model.T,
        "K": model.K,
    }


def _estimate_rows(d, scores, model, cfg, population):
    """All requested estimates with their intervals, in table row order."""
    tags = list(cfg["estimators"])
    level = cfg["level"]
    rows = {}
    boot_tags = [t for t in tags if t in _BOOT_TAGS]
    if cfg["gpsm_bootstrap"] and "GPSM" in tags:
        boot_tags.append("GPSM")
    if boot_tags:
        spec = CiSpec(level=level, bootstrap_reps=cfg["bootstrap_reps"], rng_seed=cfg["seed"])
        results = bootstrap_ci(
            d, boot_tags, spec,
            clip=cfg["clip"], subclasses=cfg["subclasses"], ridge=cfg["ridge"], model=model,
        )
        for tag, res in results.items():
            if isinstance(res, MultitreatError):
                raise res
            if tag == "DIF":
                ests = estimate_dif(d, population)
            elif tag == "W":
                ests = estimate_weighting(d, scores, clip=cfg["clip"], population=population)
            elif tag == "GPSS":
                ests = estimate_gpss(d, scores, subclasses=cfg["subclasses"], population=population)
            else:
                ests = effects_from_imputation(
                    d, impute_matrix(d, "gps-scalar", scores=scores), "GPSM", population
                )
            rows[tag] = [
                e.with_interval(res[(e.w, e.w_prime)].se,
                                res[(e.w, e.w_prime)].ci_lower,
                                res[(e.w, e.w_prime)].ci_upper)
                for e in ests
            ]
    matching_plan = [("COV", "covariates"), ("PSSM", "gps-vector")]
    if not cfg["gpsm_bootstrap"]:
        matching_plan.append(("GPSM", "gps-scalar"))
    for tag, method in matching_plan:
        if tag not in tags:
            continue
        imputed = impute_matrix(d, method, scores=scores)
        ests = effects_from_imputation(d, imputed, tag, population)
        intervals = matching_variance(d, imputed, level=level)
        rows[tag] = [
            e.with_interval(intervals[(e.w, e.w_prime)].se,
                            intervals[(e.w, e.w_prime)].ci_lower,
                            intervals[(e.w, e.w_prime)].ci_upper)
            for e in ests
        ]
    if "PPSM" in tags:
        ppsm_rows = []
        for pair in contrast_pairs(d.T):
            est, imputed, sub = ppsm_components(d, pair, ridge=cfg["ridge"])
            iv = matching_variance(sub, imputed, level=level)[(1, 2)]
            ppsm_rows.append(est.with_interval(iv.se, iv.ci_lower, iv.ci_upper))
        rows["PPSM"] = ppsm_rows
    return [e for tag in ALL_METHODS if tag in rows for e in rows[tag]]


def cmd_estimate(cfg) -> None:
    schema = _schema_from(cfg)
    d = load_csv(cfg["input"], schema)
    model, scores = _fit_and_scores(d, cfg)
    writer = _Writer(cfg)
    meta = {
        "command": "estimate",
        "package_version": __version__,
        "config": cfg,
        "n_units": d.n_units,
        "n_levels": d.T,
        "treatment_labels": list(d.treatment_labels),
        "gps": _model_meta(model),
    }
    population = POPULATION_FULL
    if cfg["trim"]:
        result = trim(d, scores, refit=cfg["refit"], ridge=cfg["ridge"])
        writer.json("trim.json", trim_result_to_json(result))
        writer.csv("trim_mask.csv", mask_to_csv(result.mask))
        d, scores = result.trimmed_dataset, result.trimmed_scores
        if result.trimmed_model is not None:
            model = result.trimmed_model
            meta["gps_trimmed"] = _model_meta(model)
        meta["trim"] = {"lambda": result.lam, "n_retained": result.mask.n_retained}
        population = POPULATION_TRIMMED
    estimates = _estimate_rows(d, scores, model, cfg, population)
    writer.csv("estimates.csv", estimates_to_csv(estimates, comment=writer.stamp))
    writer.json("estimates.json", {"estimates": json.loads(estimates_to_json(estimates))})
    writer.json("gps_model.json", model_to_json(model))
    writer.json("metadata.json", meta)
    print(f"wrote {', '.join(writer.written)} to {writer.dir}")


def cmd_trim(cfg) -> None:
    schema = _schema_from(cfg)
    d = load_csv(cfg["input"], schema)
    model, scores = _fit_and_scores(d, cfg)
    result = trim(d, scores, refit=cfg["refit"], ridge=cfg["ridge"])
    writer = _Writer(cfg)
    writer.json("trim.json", trim_result_to_json(result))
    writer.csv("trim_mask.csv", mask_to_csv(result.mask))
    writer.json(
        "metadata.json",
        {
            "command": "trim",
            "package_version": __version__,
            "config": cfg,
            "n_units": d.n_units,
            "gps": _model_meta(model),
        },
    )
    print(f"wrote {', '.join(writer.written)} to {writer.dir}")


def cmd_balance(cfg) -> None:
    schema = _schema_from(cfg)
    d = load_csv(cfg["input"], schema)
    model, scores = _fit_and_scores(d, cfg)
    writer = _Writer(cfg)
    report = balance_report(d, scores, bins=cfg["bins"])
    writer.json("balance.json", report_to_json(report))
    writer.csv("balance.csv", report_to_csv(report, comment=writer.stamp))
    meta = {
        "command": "balance",
        "package_version": __version__,
        "config": cfg,
        "n_units": d.n_units,
        "gps": _model_meta(model),
    }
    if cfg["trim"]:
        result = trim(d, scores, refit=cfg["refit"], ridge=cfg["ridge"])
        after = balance_report(result.trimmed_dataset, result.trimmed_scores, bins=cfg["bins"])
        writer.json("balance_trimmed.json", report_to_json(after))
        writer.csv("balance_trimmed.csv", report_to_csv(after, comment=writer.stamp))
        meta["trim"] = {"lambda": result.lam, "n_retained": result.mask.n_retained}
    writer.json("metadata.json", meta)
    print(f"wrote {', '.join(writer.written)} to {writer.dir}")


def cmd_simulate(cfg) -> None:
    design = design_by_name(cfg["design"])
    options = RunOptions(
        estimators=tuple(cfg["estimators"]),
        bootstrap_reps=cfg["bootstrap_reps"],
        subclasses=cfg["subclasses"],
        clip=cfg["clip"],
        level=cfg["level"],
        gpsm_bootstrap=cfg["gpsm_bootstrap"],
        fixed_arm_sizes=cfg["fixed_arm_sizes"],
        ridge=cfg["ridge"],
    )
    summary = run_monte_carlo(
        design,
        replications=cfg["reps"],
        seed=cfg["seed"],
        workers=cfg["workers"],
        options=options,
    )
    writer = _Writer(cfg)
    writer.csv("summary.csv", summary_to_csv(summary, comment=writer.stamp))
    writer.json("summary.json", summary_to_json(summary))
    writer.json(
        "metadata.json",
        {
            "command": "simulate",
            "package_version": __version__,
            "config": cfg,
            "unreliable_estimators": list(summary.unreliable),
        },
    )
    print(f"wrote {', '.join(writer.written)} to {writer.dir}")


_COMMANDS = {
    "estimate": cmd_estimate,
    "trim": cmd_trim,
    "balance": cmd_balance,
    "simulate": cmd_simulate,
}

_EXIT_CODES = [(ConfigError, 2), (DataError, 3), (NumericalError, 4)]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        _COMMANDS[args.command](cfg)
    except MultitreatError as e:
        print(f"error [{type(e).__name__}]: {e}", file=sys.stderr)
        for klass, code in _EXIT_CODES:
            if isinstance(e, klass):
                return code
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
