"""Config-driven experiments: train, build groups, compare effects, summarize."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
from jsonschema import Draft202012Validator

from .bounds import (UndefinedStatistic, compute_constants, newton_error_bound, pearson,
                     selfloss_cone, spearman, underestimation_stats, upper_cone_slope)
from .counterexamples import OrthoConfig, gen_mog, gen_ortho, line_fit
from .data_io import (Dataset, TestPoint, load_dense_csv, load_sparse, synth_gaussian_binary,
                      synth_test_points, write_dense_csv)
from .groups import ALL_METHODS, GroupPlan, build_groups, write_groups_jsonl
from .influence import CSV_COLUMNS, EffectRecord, EvalFunction, EvalKind, engine_for
from .model import LossKind, TrainedModel, train
from .newton import error_matrix_spectrum, newton_effect
from .retrain import effect_records, retrain_many

log = logging.getLogger(__name__)

CHECK_ATOL = 1e-8

_GRID = {
    "oneOf": [
        {"type": "array", "items": {"type": "number"}, "minItems": 1},
        {"type": "object", "required": ["start", "stop", "num"], "additionalProperties": False,
         "properties": {"start": {"type": "number"}, "stop": {"type": "number"},
                        "num": {"type": "integer", "minimum": 1}, "log": {"type": "boolean"}}},
    ]
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset"],
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "format": {"enum": ["csv", "sparse"]},
                "test_path": {"type": "string"},
                "synth": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["n_per_class", "d", "mean_offset", "seed"],
                    "properties": {"n_per_class": {"type": "integer", "minimum": 1},
                                   "d": {"type": "integer", "minimum": 1},
                                   "mean_offset": {"type": "number"},
                                   "seed": {"type": "integer"},
                                   "n_test": {"type": "integer", "minimum": 1}},
                },
            },
            "oneOf": [{"required": ["path"]}, {"required": ["synth"]}],
        },
        "loss_kind": {"enum": [k.value for k in LossKind]},
        "lambda": {"type": "number", "exclusiveMinimum": 0},
        "lambda_over_n": {"type": "number", "exclusiveMinimum": 0},
        "intercept": {"type": "boolean"},
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kinds": {"type": "array", "items": {"enum": [k.value for k in EvalKind]},
                          "minItems": 1, "uniqueItems": True},
                "test_point_selection": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"random_k": {"type": "integer", "minimum": 0},
                                   "highest_loss_k": {"type": "integer", "minimum": 0},
                                   "seed": {"type": "integer"}},
                },
            },
        },
        "groups": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "methods": {"type": "array", "items": {"enum": [m.value for m in ALL_METHODS]},
                            "uniqueItems": True},
                "size_grid": _GRID,
                "seed": {"type": "integer"},
            },
        },
        "actual": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"enabled": {"type": "boolean"},
                           "parallelism": {"type": "integer", "minimum": 1}},
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"lambda_over_n_grid": _GRID},
        },
        "diagnostics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"spectra": {"type": "boolean"}},
        },
    },
    "not": {"required": ["lambda", "lambda_over_n"]},
}


class ConfigError(ValueError):
    pass


def validate_config(cfg: dict) -> dict:
    """Schema check plus defaults; returns a filled-in copy."""
    errors = sorted(Draft202012Validator(CONFIG_SCHEMA).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = "/".join(map(str, e.path)) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}")
    cfg = copy.deepcopy(cfg)
    cfg.setdefault("loss_kind", LossKind.LOGISTIC.value)
    cfg.setdefault("intercept", False)
    if "lambda" not in cfg and "lambda_over_n" not in cfg:
        raise ConfigError("config needs lambda or lambda_over_n")
    ev = cfg.setdefault("eval", {})
    ev.setdefault("kinds", [k.value for k in EvalKind])
    sel = ev.setdefault("test_point_selection", {})
    sel.setdefault("random_k", 3)
    sel.setdefault("highest_loss_k", 3)
    sel.setdefault("seed", 0)
    g = cfg.setdefault("groups", {})
    g.setdefault("methods", [m.value for m in ALL_METHODS])
    g.setdefault("seed", 0)
    act = cfg.setdefault("actual", {})
    act.setdefault("enabled", True)
    act.setdefault("parallelism", 1)
    cfg.setdefault("diagnostics", {}).setdefault("spectra", False)
    return cfg


def load_config(path) -> dict:
    try:
        with Path(path).open(encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    cfg = validate_config(cfg)
    # relative data paths are read relative to the config file
    d = cfg["dataset"]
    for key in ("path", "test_path"):
        if key in d and not Path(d[key]).is_absolute():
            d[key] = str(Path(path).parent / d[key])
    return cfg


def expand_grid(grid) -> list[float]:
    if isinstance(grid, list):
        return [float(v) for v in grid]
    if grid.get("log"):
        return np.logspace(np.log10(grid["start"]), np.log10(grid["stop"]), grid["num"]).tolist()
    return np.linspace(grid["start"], grid["stop"], grid["num"]).tolist()


# -- inputs ---------------------------------------------------------------------

def load_data(cfg: dict) -> tuple[Dataset, list[TestPoint]]:
    """Training set and the candidate test points."""
    d = cfg["dataset"]
    if "synth" in d:
        s = d["synth"]
        ds = synth_gaussian_binary(s["n_per_class"], s["d"], s["mean_offset"], s["seed"])
        tests = synth_test_points(s.get("n_test", 500), s["d"], s["mean_offset"], s["seed"] + 1)
        return ds, tests
    fmt = d.get("format", "sparse" if d["path"].endswith((".svm", ".libsvm", ".txt")) else "csv")
    loader = load_sparse if fmt == "sparse" else load_dense_csv
    ds = loader(d["path"])
    src = loader(d["test_path"]) if "test_path" in d else ds
    if src.d != ds.d:
        # sparse test files may stop short of the last feature index
        X = np.zeros((src.n, ds.d))
        X[:, :min(src.d, ds.d)] = src.features[:, :ds.d]
    else:
        X = src.features
    tests = [TestPoint(X[i], int(src.labels[i]), name=f"t{i}") for i in range(src.n)]
    return ds, tests


def resolve_lambda(cfg: dict, dataset: Dataset) -> float:
    return float(cfg["lambda"]) if "lambda" in cfg else float(cfg["lambda_over_n"]) * dataset.n


def select_test_points(model: TrainedModel, candidates: list[TestPoint], random_k: int,
                       highest_loss_k: int, seed: int) -> tuple[list[TestPoint], list[TestPoint]]:
    """``random_k`` uniform draws, then the ``highest_loss_k`` highest-loss points among the rest.

    Returns ``(random, highest)``; ``highest`` is sorted by decreasing loss.
    """
    rng = np.random.default_rng(seed)
    k = min(random_k, len(candidates))
    picked = rng.choice(len(candidates), k, replace=False).tolist() if k else []
    rest = [i for i in range(len(candidates)) if i not in set(picked)]
    X = np.array([candidates[i].x for i in rest]).reshape(len(rest), -1)
    y = np.array([candidates[i].y for i in rest], dtype=np.int64)
    losses = model.losses(X, y) if rest else np.array([])
    top = [rest[j] for j in np.argsort(-losses, kind="stable")[:highest_loss_k]]
    return [candidates[i] for i in picked], [candidates[i] for i in top]


def eval_functions(kinds, points: list[TestPoint], binary: bool) -> list[EvalFunction]:
    fs = []
    for p in points:
        if EvalKind.TEST_PREDICTION.value in kinds:
            if binary:
                fs.append(EvalFunction.test_prediction(p))
            else:
                log.info("test prediction skipped for multiclass model")
        if EvalKind.TEST_LOSS.value in kinds:
            fs.append(EvalFunction.test_loss(p))
    if EvalKind.SELF_LOSS.value in kinds:
        fs.append(EvalFunction.self_loss())
    return fs


def group_plan(cfg: dict, tests: list[TestPoint]) -> GroupPlan:
    g = cfg["groups"]
    kw = {"methods": tuple(g["methods"]), "seed": g["seed"], "test_points": tuple(tests)}
    if "size_grid" in g:
        kw["sizes"] = tuple(expand_grid(g["size_grid"]))
    return GroupPlan(**kw)


# -- computation ----------------------------------------------------------------

def compute_records(model, dataset, groups, fs, actual: bool, jobs: int):
    thetas = retrain_many(model, dataset, groups, jobs) if actual else None
    failed = [] if thetas is None else [g.id for g, t in zip(groups, thetas) if isinstance(t, Exception)]
    return effect_records(model, dataset, groups, fs, thetas), failed


def _safe(stat, xs, ys):
    try:
        return stat(xs, ys)
    except UndefinedStatistic:
        return None


def summarize(model: TrainedModel, dataset: Dataset, groups, fs, records) -> tuple[list, dict]:
    """Per-evaluation-function summary entries and the bound constants used."""
    by_id = {g.id: g for g in groups}
    constants = {}
    entries = []
    for f in fs:
        rs = [r for r in records if r.eval_kind == f.label]
        have = [r for r in rs if r.actual is not None]
        infl = [r.influence for r in have]
        act = [r.actual for r in have]
        violations, local_violations, contained = [], [], 0
        c = None if f.kind is EvalKind.SELF_LOSS else compute_constants(model, dataset, f)
        if c is not None:
            constants[f.label] = asdict(c)
        up = upper_cone_slope(engine_for(model, dataset).h1_eigenvalues()[-1].clip(0), model.lam)
        for r in rs:
            g = by_id[r.subset_id]
            if f.kind is EvalKind.SELF_LOSS:
                cs = compute_constants(model, dataset, f, g)
                _, slope, slack = selfloss_cone(cs)
                if not (r.influence - CHECK_ATOL <= r.newton <= slope * r.influence + slack(g) + CHECK_ATOL):
                    violations.append(r.subset_id)
                if r.err_nt_act is not None and abs(r.err_nt_act) > newton_error_bound(cs, g) + CHECK_ATOL:
                    local_violations.append(r.subset_id)
            elif r.err_nt_act is not None and c.certified:
                if abs(r.err_nt_act) > newton_error_bound(c, g) + CHECK_ATOL:
                    violations.append(r.subset_id)
            if r.actual is not None:
                lo, hi = sorted((r.influence, up * r.influence))
                contained += lo - CHECK_ATOL <= r.actual <= hi + CHECK_ATOL
        u = underestimation_stats(have, f.label)
        e = {
            "eval_kind": f.label,
            "n_subsets": len(rs),
            "spearman": _safe(spearman, infl, act),
            "pearson": _safe(pearson, infl, act),
            "spearman_influence_newton": _safe(spearman, [r.influence for r in rs],
                                               [r.newton for r in rs]),
            "sign_agree_frac": u["sign_agree_frac"],
            "underest_frac": u["underest_frac"],
            "underest_frac_pos": u["underest_frac_pos"],
            "underest_frac_neg": u["underest_frac_neg"],
            "cone_contained_frac": contained / len(have) if have else None,
            "bound_violations": violations,
        }
        if f.kind is EvalKind.SELF_LOSS:
            e["local_bound_violations"] = local_violations
        else:
            e["bound_certified"] = bool(c.certified)
        entries.append(e)
    return entries, constants


def diagnostics(model, dataset, groups, spectra: bool) -> list[dict]:
    out = []
    for g in groups:
        ev = error_matrix_spectrum(model, dataset, g)
        row = {"id": g.id, "d_min": float(ev[0]), "d_max": float(ev[-1])}
        if spectra:
            row["d_spectrum"] = ev.tolist()
        out.append(row)
    return out


# -- writers --------------------------------------------------------------------

def dump_json(obj, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, allow_nan=False)
        fh.write("\n")


def write_effects_csv(records, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for r in records:
            wr.writerow(r.to_row())


def read_effects_csv(path) -> list[EffectRecord]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [EffectRecord.from_row(row) for row in csv.DictReader(fh)]


def _point_info(p: TestPoint, role: str) -> dict:
    return {"name": p.name, "role": role, "y": p.y, "x": p.x.tolist()}


# -- recipes --------------------------------------------------------------------

def prepare(cfg: dict, lam: Optional[float] = None):
    """Data, trained model, selected test points (with roles), and evaluation functions."""
    ds, cands = load_data(cfg)
    lam = resolve_lambda(cfg, ds) if lam is None else lam
    model = train(ds, lam, cfg["loss_kind"], fit_intercept=cfg["intercept"])
    sel = cfg["eval"]["test_point_selection"]
    rand, high = select_test_points(model, cands, sel["random_k"], sel["highest_loss_k"], sel["seed"])
    return ds, model, rand, high


def run_experiment(cfg: dict, out_dir, jobs: Optional[int] = None) -> dict:
    """Full comparison run; returns the summary that is also written to ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, model, rand, high = prepare(cfg)
    points = rand + high
    fs = eval_functions(cfg["eval"]["kinds"], points, model.binary)
    groups = build_groups(ds, group_plan(cfg, points), model)
    jobs = cfg["actual"]["parallelism"] if jobs is None else jobs
    records, failed = compute_records(model, ds, groups, fs, cfg["actual"]["enabled"], jobs)
    entries, constants = summarize(model, ds, groups, fs, records)

    model.save(out / "model.json")
    write_groups_jsonl(groups, out / "groups.jsonl")
    write_effects_csv(records, out / "effects.csv")
    dump_json({"constants": constants,
               "test_points": [_point_info(p, "random") for p in rand]
               + [_point_info(p, "highest_loss") for p in high],
               "subsets": diagnostics(model, ds, groups, cfg["diagnostics"]["spectra"])},
              out / "diagnostics.json")
    summary = {"n": ds.n, "d": ds.d, "lambda": model.lam, "loss_kind": model.loss_kind.value,
               "fingerprint": ds.fingerprint, "n_subsets": len(groups), "failed_subsets": failed,
               "highest_loss_test_point": high[0].name if high else None, "eval": entries}
    dump_json(summary, out / "summary.json")
    return summary


def run_sweep(cfg: dict, out_dir, jobs: Optional[int] = None) -> dict:
    """Correlation against regularization strength.

    Test points are chosen once at the configured lambda and held fixed;
    groups are rebuilt for every lambda since gradient clusters and
    influence tails depend on the model.
    """
    if "sweep" not in cfg or "lambda_over_n_grid" not in cfg["sweep"]:
        raise ConfigError("sweep needs sweep.lambda_over_n_grid")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, base, rand, high = prepare(cfg)
    points = rand + high
    jobs = cfg["actual"]["parallelism"] if jobs is None else jobs
    rows = []
    for lon in expand_grid(cfg["sweep"]["lambda_over_n_grid"]):
        lam = lon * ds.n
        model = train(ds, lam, cfg["loss_kind"], fit_intercept=cfg["intercept"])
        fs = eval_functions(cfg["eval"]["kinds"], points, model.binary)
        groups = build_groups(ds, group_plan(cfg, points), model)
        records, failed = compute_records(model, ds, groups, fs, True, jobs)
        row = {"lambda_over_n": lon, "lambda": lam, "n_subsets": len(groups), "failed_subsets": failed}
        for f in fs:
            rs = [r for r in records if r.eval_kind == f.label and r.actual is not None]
            row[f"spearman_{f.label}"] = _safe(spearman, [r.influence for r in rs],
                                               [r.actual for r in rs])
        # headline number: test prediction at the highest-loss test point
        if high and f"spearman_test_prediction@{high[0].name}" in row:
            row["spearman"] = row[f"spearman_test_prediction@{high[0].name}"]
        rows.append(row)
        log.info("sweep lambda/n=%g done", lon)
    summary = {"n": ds.n, "fingerprint": ds.fingerprint,
               "highest_loss_test_point": high[0].name if high else None, "rows": rows}
    dump_json(summary, out / "sweep.json")
    return summary


def run_counterexample(kind: str, seed: int, out_dir) -> dict:
    """Generate one construction, write its data and (influence, newton) pairs, and check it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "mog":
        ce = gen_mog(seed)
    elif kind == "ortho":
        ce = gen_ortho(OrthoConfig())
    else:
        raise ConfigError(f"unknown counterexample kind {kind!r}")
    eng = engine_for(ce.model, ce.dataset)
    f = EvalFunction.test_prediction(TestPoint(ce.x_test, name="x_test"))
    infl = np.array([eng.group_influence(g.w, f) for g in ce.subsets])
    nt = np.array([newton_effect(ce.model, ce.dataset, g, f) for g in ce.subsets])
    checks = {}
    if kind == "mog":
        checks["sign_disagreement"] = bool(np.any(np.sign(infl) != np.sign(nt)))
        checks["abs_pearson_le_0.2"] = bool(abs(pearson(infl, nt)) <= 0.2)
        extra = {"pearson": pearson(infl, nt), "seed_used": ce.info["seed"]}
    else:
        axis = np.array(ce.info["axis"])
        scales = np.array(ce.info["scales"])
        lines = []
        for a in np.unique(axis):
            sel = axis == a
            slope, resid = line_fit(infl[sel], nt[sel])
            lines.append({"axis": int(a), "slope": slope, "residual": resid,
                          "scale": float(scales[sel][0])})
        checks["two_lines"] = len(lines) == 2 and abs(lines[0]["slope"] - lines[1]["slope"]) > 1e-6
        checks["residual_le_1e-6"] = all(l["residual"] <= 1e-6 for l in lines)
        checks["slopes_match_scale"] = all(
            abs(l["slope"] - l["scale"]) <= 1e-6 * abs(l["scale"]) for l in lines)
        extra = {"lines": lines}
    write_dense_csv(ce.dataset, out / "dataset.csv")
    write_groups_jsonl(ce.subsets, out / "groups.jsonl")
    with (out / "pairs.csv").open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["subset_id", "influence", "newton"])
        for g, i, n in zip(ce.subsets, infl, nt):
            wr.writerow([g.id, format(i, ".17g"), format(n, ".17g")])
    result = {"kind": kind, "x_test": ce.x_test.tolist(), "checks": checks, **extra}
    dump_json(result, out / "assertions.json")
    return result


def report(out_dir) -> dict:
    """Recompute correlation and underestimation statistics from an ``effects.csv``."""
    records = read_effects_csv(Path(out_dir) / "effects.csv")
    labels = list(dict.fromkeys(r.eval_kind for r in records))
    rows = []
    for lab in labels:
        rs = [r for r in records if r.eval_kind == lab and r.actual is not None]
        u = underestimation_stats(rs, lab)
        rows.append({"eval_kind": lab, "n_subsets": u["n"],
                     "spearman": _safe(spearman, [r.influence for r in rs], [r.actual for r in rs]),
                     **{k: v for k, v in u.items() if k != "n"}})
    return {"eval": rows}
