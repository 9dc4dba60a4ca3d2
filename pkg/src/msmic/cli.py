"""Batch front end: ingest data or simulate it, fit candidates, rank them by criterion.

Subcommands::

    msmic init [PATH]              write a commented config template
    msmic ingest-check CONFIG      validate the input file against the schema
    msmic select CONFIG            fit every candidate and write ranked reports
    msmic simulate CONFIG          selection frequencies over simulated replications
    msmic bias-match CONFIG        analytic penalty against the Monte Carlo optimism

Exit codes: 0 success, 2 config error, 3 ingestion error, 4 fit failure,
5 Monte Carlo experiment failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import sim
from .errors import (
    ConfigError,
    DataError,
    ExperimentError,
    IngestionError,
    MsmicError,
    NonConvergenceError,
    RankDeficiencyError,
    SingularMatrixError,
)
from .model import ContrastSpec, LossKernel, OutcomeMarginalFamily, TargetPopulation, TreatmentFrame
from .pipeline import ALLOWED_CRITERIA, ESTIMATORS, FitRecipe, fit_model

log = logging.getLogger("msmic")

EXIT_OK, EXIT_CONFIG, EXIT_INGEST, EXIT_FIT, EXIT_EXPERIMENT = 0, 2, 3, 4, 5
MAX_CANDIDATES = 2**12

TEMPLATE = """\
# msmic run configuration. Every key below shows its default.
seed: 20240601            # printed with every report; drives all simulation streams

input:
  data: null              # path to a delimited file with a header row ...
  delimiter: ","
  dgp: null               # ... or a simulated process (used by simulate / bias-match)
  # dgp:
  #   alpha0: [[0.3, 0.8]]          # (H-1) x (1 + dim_z), reference arm is the last
  #   arm_coef: [[0.5], [1.5]]      # H x (1 + dim_v): per-arm coefficients on (1, v)
  #   confounding: [[0.8], [0.8]]   # H x dim_z
  #   outcome: gaussian             # or bernoulli
  #   noise_sd: 1.0
  #   layout: full                  # full: (1, arm dummies, v, interactions); shared: (1, v)
  #   propensity_drops_z: false     # misspecify the fitted propensity
  #   conditional_drops_z: false    # misspecify the fitted outcome-conditional model
  n: 1000                 # rows per simulated frame

schema:                   # ignored when the input is a dgp
  outcome: y
  arm: arm                # integer arm column with values 1..H, or use
  assignment: null        # a list of one-hot columns
  regressors: []          # shared regressors, or
  regressors_per_arm: null  # one list of columns per arm (same length each)
  intercept: true         # prepend a constant regressor named "1"
  arm_indicators: false   # add dummies arm2..armH (shared layout)
  confounders: []

target: null              # d weights, one per arm; null = all ones (whole population)
estimator: IPW-unknown    # IPW-known | IPW-unknown | DR | CB
criteria: null            # null = every criterion the estimator supports
known_alpha: null         # flat propensity coefficients for IPW-known on real data
contrast: null            # CB only, e.g. [1, -1]

family:
  kind: gaussian          # gaussian | bernoulli
  variance: 1.0           # known variance of the gaussian family
  loss: loglik            # loglik | density_power
  gamma: 0.5              # density_power exponent

nuisance:
  propensity_z: null      # confounder names for the propensity model (null = all)
  conditional_z: null     # confounder names for the outcome-conditional model
  propensity_floor: 0.0   # 0 disables clipping; > 0 clips and warns

candidates:
  rule: all_subsets       # all_subsets | explicit
  max_size: 3             # all_subsets: largest subset size (at most 4096 subsets)
  required: ["1"]         # regressors present in every candidate
  explicit: []            # explicit: list of regressor-name lists

forms:
  ipwic: derived          # derived | literal
  cb: plugin              # plugin | sandwich | sandwich-fitted
  dric_fit_weight: target # target | inverse_propensity
  information: opg        # opg | hessian

solver:
  tol: 1.0e-8
  max_iter: 100

simulation:
  M: 1000                 # replications
  copy_factor: 10         # copy frame size as a multiple of n
  reference_n: 400000     # frame used for limit weights
  cb_weights: limit       # limit | fitted

n_jobs: 1                 # worker threads for candidates / replications
output: msmic-out
"""


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Schema:
    outcome: str = "y"
    arm: str | None = "arm"
    assignment: tuple[str, ...] | None = None
    regressors: tuple[str, ...] = ()
    regressors_per_arm: tuple[tuple[str, ...], ...] | None = None
    intercept: bool = True
    arm_indicators: bool = False
    confounders: tuple[str, ...] = ()

    def __post_init__(self):
        if (self.arm is None) == (self.assignment is None):
            raise ConfigError("schema needs exactly one of 'arm' or 'assignment'")
        if self.regressors and self.regressors_per_arm:
            raise ConfigError("schema: give 'regressors' or 'regressors_per_arm', not both")
        if self.regressors_per_arm and len({len(r) for r in self.regressors_per_arm}) > 1:
            raise ConfigError("schema: every arm needs the same number of regressors")
        if self.regressors_per_arm and self.arm_indicators:
            raise ConfigError("schema: arm_indicators applies to shared regressors only")
        roles = [[self.outcome], [self.arm] if self.arm else list(self.assignment),
                 list(self.regressors) + [c for r in self.regressors_per_arm or () for c in r],
                 list(self.confounders)]
        seen = {}
        for role, cols in zip(("outcome", "assignment", "regressors", "confounders"), roles):
            for col in cols:
                if col in seen and seen[col] != role:
                    raise ConfigError(f"column {col!r} used as both {seen[col]} and {role}")
                seen[col] = role

    @property
    def n_arms(self) -> int | None:
        if self.assignment is not None:
            return len(self.assignment)
        if self.regressors_per_arm is not None:
            return len(self.regressors_per_arm)
        return None


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: Path | None
    delimiter: str
    dgp: sim.DGPSpec | None
    n: int
    schema: Schema
    target: tuple[float, ...] | None
    recipe: FitRecipe
    known_alpha: np.ndarray | None
    candidate_rule: str
    max_size: int
    required: tuple[str, ...]
    explicit: tuple[tuple[str, ...], ...]
    M: int
    copy_factor: int
    reference_n: int
    cb_weights: str
    n_jobs: int
    output: Path
    raw: dict = field(default_factory=dict, repr=False, compare=False)


def _tuple(value):
    if value is None:
        return None
    if isinstance(value, str):
        return (value,)
    return tuple(value)


def _section(raw, key):
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    return value


def _check_keys(mapping, allowed, where):
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_config(path) -> RunConfig:
    """Parse and validate a YAML run configuration."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    return parse_config(raw, base=path.parent)


def parse_config(raw: dict, base: Path | None = None) -> RunConfig:
    defaults = yaml.safe_load(TEMPLATE)
    _check_keys(raw, defaults, "config")
    base = base or Path(".")

    inp = _section(raw, "input")
    _check_keys(inp, defaults["input"], "input")
    data = inp.get("data")
    dgp_raw = inp.get("dgp")
    if (data is None) == (dgp_raw is None):
        raise ConfigError("input needs exactly one of 'data' or 'dgp'")
    dgp = None
    if dgp_raw is not None:
        try:
            dgp = sim.DGPSpec(**dgp_raw)
        except TypeError as exc:
            raise ConfigError(f"input.dgp: {exc}") from None

    sch = _section(raw, "schema")
    _check_keys(sch, defaults["schema"], "schema")
    merged = {**defaults["schema"], **sch}
    if "assignment" in sch and "arm" not in sch:
        merged["arm"] = None
    per_arm = merged["regressors_per_arm"]
    schema = Schema(
        outcome=merged["outcome"],
        arm=merged["arm"],
        assignment=_tuple(merged["assignment"]),
        regressors=_tuple(merged["regressors"]) or (),
        regressors_per_arm=None if per_arm is None else tuple(tuple(r) for r in per_arm),
        intercept=bool(merged["intercept"]),
        arm_indicators=bool(merged["arm_indicators"]),
        confounders=_tuple(merged["confounders"]) or (),
    )

    fam = {**defaults["family"], **_section(raw, "family")}
    _check_keys(fam, defaults["family"], "family")
    family = OutcomeMarginalFamily(fam["kind"], loss=LossKernel(fam["loss"], float(fam["gamma"])),
                                   variance=float(fam["variance"]))
    forms = {**defaults["forms"], **_section(raw, "forms")}
    _check_keys(forms, defaults["forms"], "forms")
    solver = {**defaults["solver"], **_section(raw, "solver")}
    _check_keys(solver, defaults["solver"], "solver")
    nuis = {**defaults["nuisance"], **_section(raw, "nuisance")}
    _check_keys(nuis, defaults["nuisance"], "nuisance")
    simc = {**defaults["simulation"], **_section(raw, "simulation")}
    _check_keys(simc, defaults["simulation"], "simulation")
    cand = {**defaults["candidates"], **_section(raw, "candidates")}
    _check_keys(cand, defaults["candidates"], "candidates")

    estimator = raw.get("estimator", defaults["estimator"])
    if estimator not in ESTIMATORS:
        raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {estimator!r}")
    criteria = _tuple(raw.get("criteria"))
    if criteria:
        bad = set(criteria) - ALLOWED_CRITERIA[estimator]
        if bad:
            raise ConfigError(f"criteria {sorted(bad)} do not apply to {estimator}")

    target = _tuple(raw.get("target"))
    d = None
    if target is not None:
        d = TargetPopulation(np.asarray(target, dtype=float))
        H = dgp.H if dgp is not None else schema.n_arms
        if H is not None and d.H != H:
            raise ConfigError(f"target has {d.H} entries but there are {H} arms")
    contrast = _tuple(raw.get("contrast"))
    contrast = ContrastSpec(np.asarray(contrast, dtype=float)) if contrast else None

    confs = (tuple(f"z{j + 1}" for j in range(dgp.dim_z)) if dgp is not None
             else schema.confounders)

    def z_index(names, key):
        if names is None:
            return None
        names = _tuple(names)
        missing = [c for c in names if c not in confs]
        if missing:
            raise ConfigError(f"nuisance.{key}: {missing} are not confounders")
        return tuple(confs.index(c) for c in names)

    if forms["ipwic"] not in ("derived", "literal"):
        raise ConfigError("forms.ipwic must be 'derived' or 'literal'")
    if forms["cb"] not in ("plugin", "sandwich", "sandwich-fitted"):
        raise ConfigError("forms.cb must be 'plugin', 'sandwich' or 'sandwich-fitted'")
    if forms["dric_fit_weight"] not in ("target", "inverse_propensity"):
        raise ConfigError("forms.dric_fit_weight must be 'target' or 'inverse_propensity'")
    if forms["information"] not in ("opg", "hessian"):
        raise ConfigError("forms.information must be 'opg' or 'hessian'")

    recipe = FitRecipe(
        estimator=estimator,
        family=family,
        d=d,
        propensity_z=z_index(nuis["propensity_z"], "propensity_z"),
        conditional_z=z_index(nuis["conditional_z"], "conditional_z"),
        contrast=contrast,
        criteria=criteria,
        ipwic_form=forms["ipwic"],
        cb_form=forms["cb"],
        dric_fit_weight=forms["dric_fit_weight"],
        information=forms["information"],
        propensity_floor=float(nuis["propensity_floor"]),
        tol=float(solver["tol"]),
        max_iter=int(solver["max_iter"]),
    )
    known = raw.get("known_alpha")
    if estimator == "IPW-known" and dgp is None and known is None:
        raise ConfigError("IPW-known on real data needs 'known_alpha'")
    if cand["rule"] not in ("all_subsets", "explicit"):
        raise ConfigError("candidates.rule must be 'all_subsets' or 'explicit'")
    if simc["cb_weights"] not in ("limit", "fitted"):
        raise ConfigError("simulation.cb_weights must be 'limit' or 'fitted'")
    seed = raw.get("seed", defaults["seed"])
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    return RunConfig(
        seed=seed,
        data=None if data is None else (base / data),
        delimiter=inp.get("delimiter", ","),
        dgp=dgp,
        n=int(inp.get("n", defaults["input"]["n"])),
        schema=schema,
        target=target,
        recipe=recipe,
        known_alpha=None if known is None else np.asarray(known, dtype=float).ravel(),
        candidate_rule=cand["rule"],
        max_size=int(cand["max_size"]),
        required=_tuple(cand["required"]) or (),
        explicit=tuple(tuple(c) for c in cand["explicit"] or ()),
        M=int(simc["M"]),
        copy_factor=int(simc["copy_factor"]),
        reference_n=int(simc["reference_n"]),
        cb_weights=simc["cb_weights"],
        n_jobs=int(raw.get("n_jobs", 1)),
        output=base / raw.get("output", defaults["output"]),
        raw=raw,
    )


# --------------------------------------------------------------------------- #
# Ingestion
# --------------------------------------------------------------------------- #


def _number(text, col, row):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise IngestionError(f"column {col!r} has non-numeric value {text!r}", row) from None
    if not math.isfinite(value):
        raise IngestionError(f"column {col!r} is not finite", row)
    return value


def ingest(path, schema: Schema, delimiter: str = ",") -> TreatmentFrame:
    """Read a delimited file into a validated frame.

    Row numbers in errors count data rows from 1 (the header is row 0).
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise IngestionError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        needed = [schema.outcome, *(schema.assignment or [schema.arm]), *schema.regressors,
                  *(c for r in schema.regressors_per_arm or () for c in r), *schema.confounders]
        missing = [c for c in needed if c not in header]
        if missing:
            raise IngestionError(f"missing columns {missing}", 0)
        y, arms, onehot, xs, zs = [], [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            y.append(_number(row[schema.outcome], schema.outcome, row_no))
            if schema.assignment is not None:
                t = [_number(row[c], c, row_no) for c in schema.assignment]
                if any(v not in (0.0, 1.0) for v in t) or sum(t) != 1.0:
                    raise IngestionError(f"assignment columns must be one-hot, got {t}", row_no)
                onehot.append(t)
            else:
                a = _number(row[schema.arm], schema.arm, row_no)
                if a != int(a) or a < 1:
                    raise IngestionError(f"arm must be an integer >= 1, got {a}", row_no)
                arms.append(int(a))
            if schema.regressors_per_arm is not None:
                xs.append([[_number(row[c], c, row_no) for c in cols]
                           for cols in schema.regressors_per_arm])
            else:
                xs.append([_number(row[c], c, row_no) for c in schema.regressors])
            zs.append([_number(row[c], c, row_no) for c in schema.confounders])
    if not y:
        raise IngestionError(f"{path} has no data rows")
    n = len(y)
    if schema.assignment is not None:
        t = np.asarray(onehot)
    else:
        H = schema.n_arms or max(arms)
        if max(arms) > H:
            raise IngestionError(f"arm {max(arms)} exceeds H = {H}", arms.index(max(arms)) + 1)
        t = np.eye(H)[np.asarray(arms) - 1]
    H = t.shape[1]
    counts = t.sum(axis=0)
    if np.any(counts == 0):
        raise IngestionError(f"arm {int(np.argmin(counts)) + 1} has no records")
    if schema.regressors_per_arm is not None:
        x = np.asarray(xs, dtype=float).reshape(n, H, -1)
        names = [f"x{j + 1}" for j in range(x.shape[2])]
    else:
        base = np.asarray(xs, dtype=float).reshape(n, len(schema.regressors))
        x = np.repeat(base[:, None, :], H, axis=1)
        names = list(schema.regressors)
        if schema.arm_indicators:
            dummies = np.broadcast_to(np.eye(H)[None, :, 1:], (n, H, H - 1))
            x = np.concatenate([dummies, x], axis=2)
            names = [f"arm{h + 1}" for h in range(1, H)] + names
    if schema.intercept:
        x = np.concatenate([np.ones((n, H, 1)), x], axis=2)
        names = ["1"] + names
    if x.shape[2] == 0:
        raise ConfigError("no regressors: set intercept or list regressor columns")
    z = np.asarray(zs, dtype=float).reshape(n, len(schema.confounders))
    return TreatmentFrame(np.asarray(y), t, x, z, tuple(names), tuple(schema.confounders))


def write_frame(frame: TreatmentFrame, path, delimiter: str = ","):
    """Write a frame in the per-arm layout; ``frame_schema`` reads it back exactly."""
    schema = frame_schema(frame)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [schema.outcome, schema.arm,
              *(c for cols in schema.regressors_per_arm for c in cols), *schema.confounders]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(header)
        for i in range(frame.N):
            writer.writerow([repr(float(frame.y[i])), int(frame.arm[i]) + 1,
                             *(repr(float(v)) for v in frame.x[i].ravel()),
                             *(repr(float(v)) for v in frame.z[i])])
    return path


def frame_schema(frame: TreatmentFrame) -> Schema:
    per_arm = tuple(tuple(f"x{h + 1}_{j + 1}" for j in range(frame.dim_x))
                    for h in range(frame.H))
    return Schema(outcome="y", arm="arm", regressors_per_arm=per_arm, intercept=False,
                  confounders=tuple(f"z{j + 1}" for j in range(frame.dim_z)))


def load_frame(cfg: RunConfig) -> TreatmentFrame:
    if cfg.data is not None:
        return ingest(cfg.data, cfg.schema, cfg.delimiter)
    return sim.generate(cfg.dgp, cfg.n, cfg.seed)


# --------------------------------------------------------------------------- #
# Candidates and selection
# --------------------------------------------------------------------------- #


def enumerate_candidates(names: Sequence[str], rule: str, max_size: int = 3,
                         required: Sequence[str] = (), explicit=()) -> list[tuple[int, ...]]:
    """Candidate column-index sets, sorted for a deterministic order."""
    names = list(names)
    for r in required:
        if r not in names:
            raise ConfigError(f"required regressor {r!r} not among {names}")
    if rule == "explicit":
        if not explicit:
            raise ConfigError("candidates.explicit is empty")
        out = []
        for cand in explicit:
            bad = [c for c in cand if c not in names]
            if bad:
                raise ConfigError(f"candidate {list(cand)} names unknown regressors {bad}")
            out.append(tuple(sorted(names.index(c) for c in cand)))
        return out
    req = sorted(names.index(r) for r in required)
    free = [j for j in range(len(names)) if j not in req]
    top = max_size - len(req)
    if top < 0:
        raise ConfigError("max_size is smaller than the number of required regressors")
    total = sum(math.comb(len(free), k) for k in range(0, min(top, len(free)) + 1))
    if not req:
        total -= 1
    if total > MAX_CANDIDATES:
        raise ConfigError(f"{total} candidate subsets exceed the cap of {MAX_CANDIDATES}")
    out = []
    for k in range(0, min(top, len(free)) + 1):
        for combo in itertools.combinations(free, k):
            cols = tuple(sorted(req + list(combo)))
            if cols:
                out.append(cols)
    return out


@dataclass(frozen=True)
class SelectResult:
    rows: list
    argmin: dict
    failures: int
    seed: int


def run_select(cfg: RunConfig, frame: TreatmentFrame | None = None) -> SelectResult:
    """Fit every candidate on one frame and evaluate the configured criteria."""
    frame = frame if frame is not None else load_frame(cfg)
    names = frame.regressor_names or tuple(f"x{j + 1}" for j in range(frame.dim_x))
    cands = enumerate_candidates(names, cfg.candidate_rule, cfg.max_size, cfg.required,
                                 cfg.explicit)
    recipe = cfg.recipe
    recipe.target(frame.H)
    alpha_known = cfg.known_alpha
    if alpha_known is None and cfg.dgp is not None:
        alpha_known = cfg.dgp.alpha_flat
    if cfg.dgp is not None and recipe.estimator != "IPW-known":
        recipe = cfg.dgp.nuisance_recipe(recipe)

    def task(item):
        cid, cols = item
        label = "+".join(names[c] for c in cols)
        try:
            fm = fit_model(frame, recipe.with_columns(cols), alpha_known=alpha_known)
            reports = fm.criteria()
        except (NonConvergenceError, RankDeficiencyError, SingularMatrixError) as exc:
            return [{"candidate_id": cid, "candidate": label, "criterion": k, "ok": False,
                     "error": f"{type(exc).__name__}: {exc}"} for k in recipe.criteria]
        fit = fm.theta_fit or (fm.cb_fit.alpha_fit if fm.cb_fit else None)
        return [{
            "candidate_id": cid, "candidate": label, "criterion": k, "ok": True,
            "p": len(cols), "fit_term": r.fit_term, "penalty": r.penalty, "value": r.value,
            "converged": bool(fit.converged), "iterations": int(fit.iterations),
            "min_propensity": r.diagnostics.get("min_propensity"),
            "cond_A": r.diagnostics.get("cond_A"), "error": "",
        } for k, r in reports.items()]

    items = list(enumerate(cands))
    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            results = list(pool.map(task, items))
    else:
        results = [task(it) for it in items]
    rows = [row for res in results for row in res]
    argmin = {}
    for kind in recipe.criteria:
        ok = [r for r in rows if r["criterion"] == kind and r["ok"]]
        if ok:
            best = min(ok, key=lambda r: (r["value"], r["candidate_id"]))
            argmin[kind] = best["candidate"]
    for row in rows:
        row["argmin"] = row["ok"] and argmin.get(row["criterion"]) == row["candidate"]
        row["seed"] = cfg.seed
    failures = len({r["candidate_id"] for r in rows if not r["ok"]})
    return SelectResult(rows, argmin, failures, cfg.seed)


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Plain fixed-width table."""
    def cell(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #


def cmd_init(args) -> int:
    path = Path(args.path)
    if path.exists() and not args.force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    path.write_text(TEMPLATE)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_ingest_check(args) -> int:
    cfg = load_config(args.config)
    if cfg.data is None:
        raise ConfigError("ingest-check needs input.data")
    frame = ingest(cfg.data, cfg.schema, cfg.delimiter)
    print(f"rows: {frame.N}")
    print(f"arms: {frame.H}  counts: {frame.arm_counts().astype(int).tolist()}")
    print(f"regressors: {list(frame.regressor_names)}")
    print(f"confounders: {list(frame.confounder_names)}")
    return EXIT_OK


def cmd_select(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.output) if args.output else cfg.output
    print(f"seed: {cfg.seed}")
    res = run_select(cfg)
    sim.write_rows(out / "select.csv", res.rows)
    cols = ["candidate_id", "candidate", "criterion", "fit_term", "penalty", "value", "argmin"]
    table = format_table(res.rows, cols)
    summary = "\n".join(f"argmin {k}: {v}" for k, v in res.argmin.items())
    text = f"seed: {cfg.seed}\n{table}\n\n{summary}\n"
    (out / "select.txt").write_text(text)
    print(table)
    print()
    print(summary)
    if res.failures:
        for r in res.rows:
            if not r["ok"]:
                print(f"candidate {r['candidate']} failed: {r['error']}", file=sys.stderr)
                break
        return EXIT_FIT
    return EXIT_OK


def _need_dgp(cfg, what):
    if cfg.dgp is None:
        raise ConfigError(f"{what} needs input.dgp")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    _need_dgp(cfg, "simulate")
    out = Path(args.output) if args.output else cfg.output
    M = args.M or cfg.M
    print(f"seed: {cfg.seed}")
    names = cfg.dgp.regressor_names()
    cands = enumerate_candidates(names, cfg.candidate_rule, cfg.max_size, cfg.required,
                                 cfg.explicit)
    table = sim.selection_experiment(cfg.dgp, cfg.recipe, cands, None, cfg.n, M, cfg.seed,
                                     n_jobs=cfg.n_jobs)
    rows = table.rows()
    sim.write_rows(out / "simulate.csv", rows)
    text = format_table(rows, ["criterion", "candidate", "count", "frequency"])
    (out / "simulate.txt").write_text(f"seed: {cfg.seed}\nM: {table.M}\n{text}\n")
    print(text)
    return EXIT_OK


def cmd_bias_match(args) -> int:
    cfg = load_config(args.config)
    _need_dgp(cfg, "bias-match")
    out = Path(args.output) if args.output else cfg.output
    M = args.M or cfg.M
    print(f"seed: {cfg.seed}")
    recipe = cfg.recipe
    if cfg.candidate_rule == "explicit":
        names = cfg.dgp.regressor_names()
        recipe = recipe.with_columns(enumerate_candidates(names, "explicit",
                                                          explicit=cfg.explicit[:1])[0])
    reps = sim.run_replications(cfg.dgp, recipe, cfg.n, M, cfg.seed,
                                copy_factor=cfg.copy_factor, n_ref=cfg.reference_n,
                                n_jobs=cfg.n_jobs, cb_weights=cfg.cb_weights)
    sim.write_rows(out / "replications.csv", sim.replication_rows(reps))
    kinds = [k for k in recipe.criteria if k != "OBS-WEIGHT-IC"]
    rows = [sim.summarize(reps, k, cfg.n, cfg.seed).row() for k in kinds]
    sim.write_rows(out / "bias.csv", rows)
    text = format_table(rows, ["criterion", "penalty", "mc_bias", "mc_bias_se", "z_score",
                               "relative_error"])
    (out / "bias.txt").write_text(f"seed: {cfg.seed}\nN: {cfg.n}  M: {M}\n{text}\n")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msmic", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("init", help="write a config template")
    p.add_argument("path", nargs="?", default="msmic.yaml")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init)
    p = sub.add_parser("ingest-check", help="validate the input file")
    p.add_argument("config")
    p.set_defaults(func=cmd_ingest_check)
    for name, func, helptext in (
        ("select", cmd_select, "rank candidate structures on one data set"),
        ("simulate", cmd_simulate, "selection frequencies over simulated replications"),
        ("bias-match", cmd_bias_match, "analytic penalties against Monte Carlo optimism"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config")
        p.add_argument("-o", "--output", help="output directory (overrides config)")
        if name != "select":
            p.add_argument("-M", type=int, help="replications (overrides config)")
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except (NonConvergenceError, RankDeficiencyError, SingularMatrixError) as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except ExperimentError as exc:
        print(f"experiment error: {exc}", file=sys.stderr)
        return EXIT_EXPERIMENT
    except MsmicError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
