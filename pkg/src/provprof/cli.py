"""Command-line interface: estimate, simulate, funnel and oracle-check."""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (ColumnSchema, DataError, filter_min_volume, load_csv, make_folds,
                      scale_outcomes)
from .eif import FUNNEL_LEVELS, funnel
from .learners import LOG, SQUARED, EnsembleSpec, LearnerError, LearnerSpec
from .nuisance import (POOLED, NuisanceConfig, NuisanceError, default_outcome_spec,
                       default_propensity_spec, estimate_nuisances)
from .oracle import oracle_suite
from .simulation import SCENARIOS, SIM1, SIM2, SimConfig, default_threads, run_study
from .targeting import PARAMETERS, PositivityError, target_all

logger = logging.getLogger("provprof")

EXIT_OK, EXIT_FAIL, EXIT_VALIDATION, EXIT_ESTIMATION = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def fmt(x) -> str:
    """Floats with 9 significant digits; integers and strings unchanged."""
    if isinstance(x, (float, np.floating)):
        return "nan" if math.isnan(x) else f"{float(x):.9g}"
    return str(x)


# ---------------------------------------------------------------- learner specs

def _split_top(text: str) -> list:
    """Split on commas that are not inside parentheses."""
    out, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            out.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if depth != 0:
        raise ConfigError(f"unbalanced parentheses in {text!r}")
    tail = "".join(cur).strip()
    if tail:
        out.append(tail)
    return [x for x in out if x]


def _number(text: str):
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"hyperparameter value {text!r} is not a number") from None


def parse_learner(text: str) -> LearnerSpec:
    """``gbt(trees=50, depth=2)`` or a bare kind such as ``glm``."""
    text = text.strip()
    kind, _, rest = text.partition("(")
    params = {}
    if rest:
        if not rest.endswith(")"):
            raise ConfigError(f"malformed learner {text!r}")
        for item in _split_top(rest[:-1]):
            key, eq, val = item.partition("=")
            if not eq:
                raise ConfigError(f"malformed hyperparameter {item!r} in {text!r}")
            params[key.strip()] = _number(val.strip())
    try:
        return LearnerSpec.make(kind.strip(), **params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_ensemble(members: str, stacking_folds=3, loss=SQUARED, seed=0) -> EnsembleSpec:
    specs = tuple(parse_learner(x) for x in _split_top(members))
    try:
        return EnsembleSpec(specs, int(stacking_folds), loss, int(seed))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def ensemble_text(spec: EnsembleSpec) -> str:
    return ", ".join(s.label() for s in spec.members)


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    input: str | None = None
    output_dir: str = "provprof_out"
    parameters: tuple = PARAMETERS
    folds: int = 10
    seed: int = 0
    truncation: float = 1e-3
    positivity_threshold: float = 1e-3
    min_volume: int = 1
    level: float = 0.95
    delta: float = 0.005
    force_direct: bool = False
    mu_bar_mode: str = POOLED
    outcome: str = "y"
    provider: str = "provider"
    covariates: tuple | None = None
    outcome_kind: str | None = None
    propensity: EnsembleSpec = field(default_factory=default_propensity_spec)
    outcome_model: EnsembleSpec = field(default_factory=default_outcome_spec)
    outcome_direct: EnsembleSpec | None = None

    def validate(self):
        if not self.parameters:
            raise ConfigError("at least one parameter must be requested")
        bad = set(self.parameters) - set(PARAMETERS)
        if bad:
            raise ConfigError(f"unknown parameters {sorted(bad)}; choose from {PARAMETERS}")
        self.parameters = tuple(p for p in PARAMETERS if p in self.parameters)
        if not 0 < self.level < 1:
            raise ConfigError("CI level must lie strictly between 0 and 1")
        if self.folds < 1:
            raise ConfigError("folds must be at least 1")
        if self.min_volume < 1:
            raise ConfigError("min_volume must be at least 1")
        if self.truncation < 0 or self.positivity_threshold < 0:
            raise ConfigError("truncation and positivity threshold must be nonnegative")
        if not 0 <= self.delta < 0.5:
            raise ConfigError("delta must lie in [0, 0.5)")
        if self.outcome_kind not in (None, "binary", "continuous"):
            raise ConfigError("outcome_kind must be binary or continuous")
        if self.mu_bar_mode not in ("pooled", "per_provider"):
            raise ConfigError("mu_bar_mode must be pooled or per_provider")
        if self.input is None:
            raise ConfigError("no input file given")
        return self

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {
            "input": self.input or "", "output_dir": self.output_dir,
            "parameters": ", ".join(self.parameters), "folds": str(self.folds),
            "seed": str(self.seed), "truncation": repr(self.truncation),
            "positivity_threshold": repr(self.positivity_threshold),
            "min_volume": str(self.min_volume), "level": repr(self.level),
            "delta": repr(self.delta), "force_direct": str(self.force_direct).lower(),
            "mu_bar_mode": self.mu_bar_mode,
        }
        cols = {"outcome": self.outcome, "provider": self.provider}
        if self.covariates is not None:
            cols["covariates"] = ", ".join(self.covariates)
        if self.outcome_kind:
            cols["outcome_kind"] = self.outcome_kind
        cp["columns"] = cols
        for name, spec in (("propensity", self.propensity), ("outcome", self.outcome_model),
                           ("outcome_direct", self.outcome_direct)):
            if spec is None:
                continue
            cp[f"learner.{name}"] = {"members": ensemble_text(spec),
                                     "stacking_folds": str(spec.stacking_folds),
                                     "loss": spec.weight_loss, "seed": str(spec.seed)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _csv_list(text: str) -> tuple:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


_RUN_KEYS = {
    "input": str, "output_dir": str, "parameters": _csv_list, "folds": int, "seed": int,
    "truncation": float, "positivity_threshold": float, "min_volume": int, "level": float,
    "delta": float, "force_direct": _bool, "mu_bar_mode": str,
}


def _ensemble_from_section(sec, default: EnsembleSpec) -> EnsembleSpec:
    return parse_ensemble(sec.get("members", ensemble_text(default)),
                          sec.get("stacking_folds", default.stacking_folds),
                          sec.get("loss", default.weight_loss),
                          sec.get("seed", default.seed))


def load_run_config(path) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = RunConfig()
    known = {"run", "columns", "learner.propensity", "learner.outcome", "learner.outcome_direct"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    if cp.has_section("run"):
        for key, val in cp["run"].items():
            if key not in _RUN_KEYS:
                raise ConfigError(f"unknown key {key!r} in [run]")
            try:
                setattr(cfg, key, _RUN_KEYS[key](val))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
    if cp.has_section("columns"):
        sec = cp["columns"]
        for key in sec:
            if key not in ("outcome", "provider", "covariates", "outcome_kind"):
                raise ConfigError(f"unknown key {key!r} in [columns]")
        cfg.outcome = sec.get("outcome", cfg.outcome)
        cfg.provider = sec.get("provider", cfg.provider)
        if "covariates" in sec:
            cfg.covariates = _csv_list(sec["covariates"])
        cfg.outcome_kind = sec.get("outcome_kind", cfg.outcome_kind)
    if cp.has_section("learner.propensity"):
        cfg.propensity = _ensemble_from_section(cp["learner.propensity"], cfg.propensity)
    if cp.has_section("learner.outcome"):
        cfg.outcome_model = _ensemble_from_section(cp["learner.outcome"], cfg.outcome_model)
    if cp.has_section("learner.outcome_direct"):
        cfg.outcome_direct = _ensemble_from_section(cp["learner.outcome_direct"], cfg.outcome_model)
    return cfg


def resolve_run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    simple = ("input", "output_dir", "folds", "seed", "truncation", "positivity_threshold",
              "min_volume", "level", "delta", "mu_bar_mode", "outcome", "provider", "outcome_kind")
    for key in simple:
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    if args.parameters is not None:
        cfg.parameters = _csv_list(args.parameters)
    if args.covariates is not None:
        cfg.covariates = _csv_list(args.covariates)
    if args.force_direct:
        cfg.force_direct = True
    if args.propensity_learners is not None:
        cfg.propensity = parse_ensemble(args.propensity_learners, cfg.propensity.stacking_folds,
                                        LOG, cfg.propensity.seed)
    if args.outcome_learners is not None:
        cfg.outcome_model = parse_ensemble(args.outcome_learners, cfg.outcome_model.stacking_folds,
                                           SQUARED, cfg.outcome_model.seed)
    return cfg.validate()


# ---------------------------------------------------------------- writers

def write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x) for x in r])


def estimates_header(parameters) -> list:
    head = ["provider_label", "n_a"]
    for p in parameters:
        head += [p, f"se_{p}", f"ci_lo_{p}", f"ci_hi_{p}"]
    return head + ["positivity_flag", "notes"]


def estimates_rows(pe) -> list:
    rows = []
    for a in range(pe.m):
        r = [pe.labels[a], int(pe.n_a[a])]
        for p in pe.parameters:
            r += [pe.estimate[p][a], pe.se[p][a], pe.ci_lo[p][a], pe.ci_hi[p][a]]
        rows.append(r + [pe.positivity_flags[a], pe.notes[a]])
    return rows


def positivity_rows(labels, rep) -> list:
    return [[labels[a], rep.minimum[a], *rep.quantiles[a], rep.maximum[a],
             int(rep.below_bound[a]), rep.flags[a]] for a in range(len(labels))]


POSITIVITY_HEADER = ["provider_label", "min", "q01", "q05", "q50", "q95", "q99", "max",
                     "below_bound", "flag"]


# ---------------------------------------------------------------- estimate

def cmd_estimate(args) -> int:
    try:
        cfg = resolve_run_config(args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_VALIDATION
    if args.print_config:
        sys.stdout.write(cfg.to_ini())
    out = Path(cfg.output_dir)
    try:
        schema = ColumnSchema(cfg.outcome, cfg.provider,
                              list(cfg.covariates) if cfg.covariates is not None else None,
                              cfg.outcome_kind)
        d = load_csv(cfg.input, schema)
        filt = filter_min_volume(d, cfg.min_volume)
        if filt.dropped:
            logger.warning("dropped providers below volume %d: %s", cfg.min_volume,
                           ", ".join(map(str, filt.dropped)))
        d = filt.dataset
        if d.m < 2:
            raise DataError("at least two providers are required")
        if cfg.folds == 1:
            logger.warning("J=1: nuisances are trained and evaluated on the same rows (debug mode)")
        folds = make_folds(d, cfg.folds, cfg.seed)
        ds, scale = scale_outcomes(d, cfg.delta)
        if cfg.truncation >= 1.0 / d.m:
            raise ConfigError(f"truncation must be below 1/m = {1.0 / d.m:.6g}")
    except (DataError, ConfigError, ValueError) as exc:
        logger.error("validation error: %s", exc)
        return EXIT_VALIDATION
    ncfg = NuisanceConfig(propensity=cfg.propensity, outcome=cfg.outcome_model,
                          outcome_direct=cfg.outcome_direct, direct="phi" in cfg.parameters,
                          truncation=cfg.truncation, positivity_threshold=cfg.positivity_threshold,
                          mu_bar_mode=cfg.mu_bar_mode)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            nu = estimate_nuisances(ds, folds, ncfg)
        write_csv(out / "positivity.csv", POSITIVITY_HEADER, positivity_rows(d.labels, nu.positivity))
        bad = nu.positivity.violating
        if "phi" in cfg.parameters and bad:
            names = ", ".join(str(d.labels[a]) for a in bad)
            if not cfg.force_direct:
                raise PositivityError(
                    f"practical positivity violation for providers {names}; direct standardization "
                    "refused (use --force-direct to report anyway)")
            logger.warning("reporting phi despite positivity violations for providers %s", names)
        pe = target_all(ds, scale, nu, cfg.parameters, cfg.level)
        if "phi" in cfg.parameters:
            for a in bad:
                extra = "phi reported under force-direct despite positivity violation"
                pe.notes[a] = f"{pe.notes[a]}; {extra}" if pe.notes[a] else extra
    except (NuisanceError, LearnerError, PositivityError, RuntimeError, ValueError,
            FloatingPointError) as exc:
        logger.error("estimation error: %s", exc)
        return EXIT_ESTIMATION
    write_csv(out / "estimates.csv", estimates_header(pe.parameters), estimates_rows(pe))
    logger.info("wrote %s", out / "estimates.csv")
    return EXIT_OK


# ---------------------------------------------------------------- simulate

def sim_config_from_args(args, N) -> SimConfig:
    study = args.study
    full = args.full_scale and study == SIM2
    m = args.m or (75 if full else 20 if study == SIM2 else 10)
    k = 1 if study == SIM1 else (args.k or 10)
    if args.scenario:
        scenarios = _csv_list(args.scenario)
    else:
        scenarios = ("s1",) if study == SIM1 else SCENARIOS
    bad = set(scenarios) - set(SCENARIOS)
    if bad:
        raise ConfigError(f"unknown scenarios {sorted(bad)}; choose from {SCENARIOS}")
    params = _csv_list(args.parameters) if args.parameters else PARAMETERS
    bad = set(params) - set(PARAMETERS)
    if bad or not params:
        raise ConfigError(f"unknown parameters {sorted(bad)}")
    est = _csv_list(args.estimators) if args.estimators else ("tmle", "glm")
    folds = args.folds or (3 if study == SIM2 else 5)
    threads = args.threads or default_threads()
    return SimConfig(study=study, N=N, m=m, k=k, sigma=args.sigma, replicates=args.replicates,
                     seed=args.seed, scenarios=scenarios, estimators=est, parameters=params,
                     folds=folds, truth_draws=args.truth_draws, threads=threads)


SIM_HEADER = ["study", "scenario", "estimator", "parameter", "N", "ME", "MAE", "coverage",
              "replicates", "failures"]
AUDIT_HEADER = ["N", "replicate", "estimator", "scenario", "parameter", "provider", "estimate",
                "truth", "ci_lo", "ci_hi"]


def cmd_simulate(args) -> int:
    Ns = args.N or ([50000] if args.full_scale and args.study == SIM2 else
                    [5000, 20000] if args.study == SIM2 else [1000, 2500, 5000])
    try:
        cfgs = [sim_config_from_args(args, int(N)) for N in Ns]
    except (ConfigError, ValueError) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_VALIDATION
    rows, audit = [], []
    for cfg in cfgs:
        try:
            res = run_study(cfg)
        except (RuntimeError, ValueError) as exc:
            logger.error("simulation error: %s", exc)
            return EXIT_ESTIMATION
        if res.failures:
            logger.warning("N=%d: %d of %d replicates failed", cfg.N, res.failures, cfg.replicates)
        if res.failures == cfg.replicates:
            logger.error("every replicate failed at N=%d", cfg.N)
            return EXIT_ESTIMATION
        for r in res.summary:
            rows.append([r["study"], r["scenario"], r["estimator"], r["parameter"], r["N"],
                         r["ME"], r["MAE"], r["coverage"], cfg.replicates, res.failures])
        audit.extend([cfg.N, *x] for x in res.records)
    write_csv(Path(args.output), SIM_HEADER, rows)
    if args.audit:
        write_csv(Path(args.audit), AUDIT_HEADER, audit)
    return EXIT_OK


# ---------------------------------------------------------------- funnel

def read_estimates(path) -> tuple[list, np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        head = reader.fieldnames or []
        for col in ("provider_label", "smr", "se_smr"):
            if col not in head:
                raise DataError(f"estimates file lacks column {col!r}")
        labels, est, se = [], [], []
        for row in reader:
            labels.append(row["provider_label"])
            est.append(float(row["smr"]))
            se.append(float(row["se_smr"]))
    return labels, np.array(est), np.array(se)


def _parse_levels(text) -> tuple:
    if text is None or not _csv_list(text):
        return FUNNEL_LEVELS
    levels = tuple(float(x) for x in _csv_list(text))
    if not all(0 < x < 1 for x in levels):
        raise ConfigError("levels must lie strictly between 0 and 1")
    return levels


def funnel_svg(table, width=640, height=420, pad=50) -> str:
    """Minimal SVG: one circle per provider, limit polylines and the null line."""
    pts = table.points
    grid = table.precision_grid
    ys = [p.estimate for p in pts] + [1.0]
    for level in table.levels:
        ys += list(table.lower[level]) + list(table.upper[level])
    ys = [y for y in ys if np.isfinite(y)]
    y_lo, y_hi = min(ys), max(ys)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 1, y_hi + 1
    x_lo, x_hi = (float(grid.min()), float(grid.max())) if len(grid) else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1

    def sx(x):
        return pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{sx(x_lo):.2f}" y1="{sy(1.0):.2f}" x2="{sx(x_hi):.2f}" y2="{sy(1.0):.2f}" '
           'stroke="black" stroke-dasharray="4 3"/>']
    dash = {0: "", 1: ' stroke-dasharray="6 3"', 2: ' stroke-dasharray="2 2"'}
    for i, level in enumerate(table.levels):
        for curve in (table.lower[level], table.upper[level]):
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(grid, curve))
            out.append(f'<polyline fill="none" stroke="grey"{dash.get(i % 3, "")} '
                       f'points="{coords}"><title>{level * 100:g}% limit</title></polyline>')
    for p in pts:
        colour = "black" if p.classification == "within limits" else "red"
        out.append(f'<circle cx="{sx(p.precision):.2f}" cy="{sy(p.estimate):.2f}" r="4" '
                   f'fill="{colour}"><title>{_xml(str(p.label))}: {p.estimate:.4g} '
                   f'({p.classification})</title></circle>')
    out.append(f'<text x="{width / 2:.0f}" y="{height - 10}" text-anchor="middle" '
               'font-size="12">precision</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _xml(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def cmd_funnel(args) -> int:
    try:
        levels = _parse_levels(args.levels)
        labels, est, se = read_estimates(args.estimates)
    except (OSError, DataError, ConfigError, ValueError) as exc:
        logger.error("validation error: %s", exc)
        return EXIT_VALIDATION
    if args.log_scale:
        # delta-method variance of log SMR; limits stay on the ratio scale
        with np.errstate(divide="ignore", invalid="ignore"):
            table = funnel(labels, est, (se / est) ** 2, levels, log_scale=True)
    else:
        table = funnel(labels, est, se ** 2, levels)
    rows = [["point", p.label, "", p.precision, p.estimate, p.variance, "", "", p.classification]
            for p in table.points]
    for level in table.levels:
        for q, lo, hi in zip(table.precision_grid, table.lower[level], table.upper[level]):
            rows.append(["limit", "", level, q, "", "", lo, hi, ""])
    write_csv(Path(args.output), ["record", "provider_label", "level", "precision", "estimate",
                                  "variance", "lower", "upper", "classification"], rows)
    if args.svg:
        Path(args.svg).parent.mkdir(parents=True, exist_ok=True)
        Path(args.svg).write_text(funnel_svg(table), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- oracle-check

def cmd_oracle_check(args) -> int:
    if args.laws < 1:
        logger.error("laws must be at least 1")
        return EXIT_VALIDATION
    worst = oracle_suite(args.laws, args.seed)
    ok = True
    for name, val in worst.items():
        passed = val <= args.tolerance
        ok &= passed
        print(f"{name}: max |residual| = {val:.3e} over {args.laws} laws "
              f"({'ok' if passed else 'FAIL'} at tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="provprof", description="TMLE provider profiling.")
    ap.add_argument("--version", action="version", version=f"provprof {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="estimate standardization parameters from a CSV file")
    e.add_argument("input", nargs="?", help="input CSV (overrides [run] input)")
    e.add_argument("--config", help="INI configuration file")
    e.add_argument("--output-dir", dest="output_dir")
    e.add_argument("--parameters", help="comma-separated subset of " + ",".join(PARAMETERS))
    e.add_argument("--folds", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--truncation", type=float)
    e.add_argument("--positivity-threshold", dest="positivity_threshold", type=float)
    e.add_argument("--min-volume", dest="min_volume", type=int)
    e.add_argument("--level", type=float)
    e.add_argument("--delta", type=float)
    e.add_argument("--mu-bar-mode", dest="mu_bar_mode", choices=["pooled", "per_provider"])
    e.add_argument("--outcome")
    e.add_argument("--provider")
    e.add_argument("--covariates", help="comma-separated covariate columns")
    e.add_argument("--outcome-kind", dest="outcome_kind", choices=["binary", "continuous"])
    e.add_argument("--propensity-learners", dest="propensity_learners",
                   help="e.g. 'mean, glm, gbt(trees=50)'")
    e.add_argument("--outcome-learners", dest="outcome_learners")
    e.add_argument("--force-direct", dest="force_direct", action="store_true",
                   help="report phi despite flagged positivity violations")
    e.add_argument("--print-config", dest="print_config", action="store_true")
    e.add_argument("--threads", type=int, help="accepted for symmetry; estimation is single-process")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="run a simulation study")
    s.add_argument("--study", choices=[SIM1, SIM2], default=SIM1)
    s.add_argument("--N", type=int, nargs="+")
    s.add_argument("--m", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--replicates", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenario", help="comma-separated subset of " + ",".join(SCENARIOS))
    s.add_argument("--estimators", help="comma-separated subset of tmle,glm")
    s.add_argument("--parameters")
    s.add_argument("--folds", type=int)
    s.add_argument("--truth-draws", dest="truth_draws", type=int, default=10 ** 6)
    s.add_argument("--full-scale", dest="full_scale", action="store_true",
                   help="sim2 at m=75, N=50000")
    s.add_argument("--threads", type=int, help="worker processes (default: PROVPROF_THREADS or all cores)")
    s.add_argument("--output", default="simulation.csv")
    s.add_argument("--audit", help="per-replicate record CSV")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("funnel", help="funnel-plot table (and SVG) for SMR estimates")
    f.add_argument("estimates")
    f.add_argument("--levels", help="comma-separated confidence levels (default 0.95,0.99,0.999)")
    f.add_argument("--log-scale", dest="log_scale", action="store_true")
    f.add_argument("--output", default="funnel.csv")
    f.add_argument("--svg")
    f.set_defaults(func=cmd_funnel)

    o = sub.add_parser("oracle-check", help="von-Mises identity check on random discrete laws")
    o.add_argument("--laws", type=int, default=200)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--tolerance", type=float, default=1e-10)
    o.set_defaults(func=cmd_oracle_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="provprof: %(levelname)s: %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
