"""Command line: ``mcforest {train,effects,diagnose,simulate}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import estimator as est
from .criterion import VARIANTS, CriterionConfig
from .data import DataError, Schema, load_csv
from .diagnostics import SupportError, SupportRule, balance_table, forest_propensity, trim_support, write_balance_csv
from .forest import Forest, ForestConfig, tune_oob

log = logging.getLogger("mcforest")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def header_lines(seed, config) -> list:
    return [f"mcforest {__version__}", f"seed={seed}", f"config={config_hash(config)}"]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_rows(path, rows: list, header=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _parse_variant(text: str):
    pen = False
    if text.endswith("_pen"):
        text, pen = text[:-4], True
    if text not in VARIANTS:
        raise UsageError(f"unknown variant {text!r}")
    return text, pen


def _int_list(text):
    if text is None or text == "":
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"expected a comma separated list of integers, got {text!r}") from None


# ---- train -----------------------------------------------------------------

def cmd_train(args) -> int:
    schema = Schema.from_file(args.schema)
    sample = load_csv(args.data, schema)
    variant, pen = _parse_variant(args.variant)
    crit = CriterionConfig(variant, pen or args.penalty, args.lam)
    cfg = ForestConfig(n_trees=args.trees, min_leaf_total=args.min_leaf, min_leaf_per_arm=args.min_leaf_arm,
                       alpha=args.alpha, feature_draw_mean=args.feature_draw_mean, criterion=crit, seed=args.seed,
                       n_threads=args.threads)
    oob = None
    if args.tune:
        p = sample.p
        cands = [replace(cfg, feature_draw_mean=m) for m in (max(1.0, p / 10.0), max(1.0, 2.0 * p / 3.0))]
        cfg, oob = tune_oob(sample, cands, n_trees=min(args.tune_trees, cfg.n_trees))
    fitted = est.fit(sample, cfg, args.center_folds)
    trim = None
    if args.trim_retrain:
        rule = SupportRule(args.support_low, args.support_high)
        kept, _, trim = trim_support(np.arange(sample.n), forest_propensity(fitted.forest, sample.x), rule)
        sample = sample.take(kept)
        fitted = est.fit(sample, cfg, args.center_folds)
        print(f"support trimming before retraining: {trim.summary()}")
    forest = fitted.forest
    B = forest.honest_ids
    forest.meta["schema"] = {"outcome": schema.outcome, "treatment": schema.treatment, "groups": list(schema.groups)}
    forest.meta["honest_groups"] = {g: [str(v) for v in sample.z[g][B]] for g in schema.groups}
    if fitted.centering is not None:
        forest.meta["centering"]["predictions_B"] = fitted.centering.predictions[B].tolist()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    forest.save(out / "model.json")
    train_log = {"version": __version__, "seed": args.seed, "config": cfg.to_dict(), "lambda_eff": forest.lam_eff,
                 "oob_values": None if oob is None else [float(v) for v in oob], "n": sample.n,
                 "n_honest": forest.n_honest, "centering": forest.meta.get("centering", {}).get("K"),
                 "trimmed": None if trim is None else {"n_dropped": trim.n_dropped, "drop_share": trim.drop_share}}
    (out / "train_log.json").write_text(json.dumps(train_log, indent=2))
    print(f"trained {cfg.criterion.label()} with {cfg.n_trees} trees on {sample.n} rows -> {out / 'model.json'}")
    return EXIT_OK


# ---- effects ---------------------------------------------------------------

def _prediction_points(forest: Forest, args):
    """Feature matrix, treatments and group columns of the prediction points."""
    if args.data:
        meta = forest.meta.get("schema", {})
        schema = Schema(meta.get("outcome", "y"), meta.get("treatment", "d"), forest.features,
                        forest.n_treatments, list(meta.get("groups", [])))
        if args.schema:
            user = Schema.from_file(args.schema)
            schema = Schema(user.outcome, user.treatment, forest.features, forest.n_treatments, user.groups)
        sample = load_csv(args.data, schema, prediction=True)
        if getattr(args, "delta_set", "") and np.any(sample.d < 0):
            raise UsageError("--delta-set needs a treatment column in the prediction data")
        groups = {g: sample.z[g] for g in schema.groups}
        return sample.x, sample.d, groups
    groups = {g: np.array(v) for g, v in forest.meta.get("honest_groups", {}).items()}
    return forest.x_B, forest.d_B, groups


def _group_column(forest: Forest, name: str, X, groups: dict):
    names = [f.name for f in forest.features]
    if name in names:
        u = names.index(name)
        f = forest.features[u]
        col = X[:, u]
        if f.is_unordered:
            return np.array([f.categories[int(v)] for v in col])
        return col
    if name in groups:
        return groups[name]
    raise DataError(f"group column {name!r} is neither a feature nor a schema group")


def _est_row(e, kind, **extra):
    row = {"estimand": e.estimand, "kind": kind, "point": e.point, "std_error": e.std_error, "p_value": e.p_value}
    row.update(extra)
    return row


def cmd_effects(args) -> int:
    forest = Forest.load(args.model)
    X, d, groups = _prediction_points(forest, args)
    delta = _int_list(args.delta_set)
    M = forest.n_treatments
    mode = args.variance_mode
    routing = forest.route(X)
    rows = []
    y_levels = forest.y_B
    cen = forest.meta.get("centering")
    for m, l in [(m, l) for m in range(M) for l in range(m)]:
        e = est.ate(forest, X, m, l, d, delta, mode, routing)
        rows.append(_est_row(e, "ATE", group="", size=int(np.sum(est._member_weights(d, delta)))))
    pw = est._member_weights(d, delta)
    W = forest.aggregated_weights(X, pw, routing)
    if cen and "predictions_B" in cen:
        y_levels = forest.y_B + np.asarray(cen["predictions_B"])
    from .inference import make_estimate
    for a in range(M):
        e = make_estimate(f"E(Y^{a})", W[a], y_levels, forest.d_B, (a,), mode)
        rows.append(_est_row(e, "PO", group="", size=int(pw.sum())))
    wald_rows = []
    for gname in [g for g in (args.groups or "").split(",") if g]:
        z = _group_column(forest, gname, X, groups)
        for m, l in [(m, l) for m in range(M) for l in range(m)]:
            tab = est.gates(forest, X, z, m, l, d, delta, mode, gname, routing)
            for v, size, e in zip(tab.values, tab.sizes, tab.estimates):
                rows.append(_est_row(e, "GATE", group=f"{gname}={v}", size=size))
            for diff in tab.differences:
                rows.append(_est_row(diff, "GATE-diff", group=gname, size=""))
            wald_rows.append({"group": gname, "contrast": f"{m}-{l}", "statistic": tab.wald["statistic"],
                              "dof": tab.wald["dof"], "p_value": tab.wald["p_value"],
                              "singular": tab.wald.get("singular", False)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_for_hash = {"model": forest.config.to_dict(), "groups": args.groups, "delta": delta, "mode": mode}
    hdr = header_lines(forest.config.seed, cfg_for_hash)
    write_rows(out / "effects.csv", rows, hdr)
    if wald_rows:
        write_rows(out / "wald.csv", wald_rows, hdr)
    summary = {}
    iate_rows = []
    for m, l in [(m, l) for m in range(M) for l in range(m)]:
        pts, ses = est.iates(forest, X, m, l, mode, with_se=not args.no_iate_se)
        summary[f"{m}-{l}"] = est.iate_summary(pts, ses)
        for i in range(pts.size):
            iate_rows.append({"row": i, "contrast": f"{m}-{l}", "iate": pts[i], "std_error": ses[i]})
    write_rows(out / "iate.csv", iate_rows, hdr)
    (out / "iate_summary.json").write_text(json.dumps(summary, indent=2))
    for r in rows:
        if r["kind"] in ("ATE", "PO"):
            print(f"{r['estimand']:<16} {r['point']:>10.4f}  se {r['std_error']:.4f}  p {r['p_value']:.4f}")
    if any(not math.isfinite(r["point"]) for r in rows):
        raise FloatingPointError("non-finite effect estimate")
    return EXIT_OK


# ---- diagnose --------------------------------------------------------------

def cmd_diagnose(args) -> int:
    forest = Forest.load(args.model)
    X, d, _ = _prediction_points(forest, args)
    rule = SupportRule(args.support_low, args.support_high)
    P = forest_propensity(forest, X)
    kept, dropped, report = trim_support(np.arange(X.shape[0]), P, rule)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hdr = header_lines(forest.config.seed, {"model": forest.config.to_dict(), "rule": [rule.q_low, rule.q_high]})
    prop_rows = [{"row": i, **{f"p{m}": P[i, m] for m in range(forest.n_treatments)}, "kept": int(i in set(kept))}
                 for i in range(X.shape[0])]
    write_rows(out / "propensity.csv", prop_rows, hdr)
    if forest.n_treatments >= 2:
        write_balance_csv(balance_table(forest, X, 1, 0), out / "balance.csv", hdr)
    (out / "support.json").write_text(json.dumps({"n_rows": report.n_rows, "n_dropped": report.n_dropped,
                                                   "drop_share": report.drop_share,
                                                   "dropped_per_arm": report.dropped_per_arm.tolist()}, indent=2))
    print(report.summary())
    return EXIT_OK


# ---- simulate --------------------------------------------------------------

def load_study(path):
    """Read a TOML study file with ``[study]``, ``[population]`` and ``[effect]`` tables."""
    from .data import tomllib
    from .emcs import EffectSpec, PopulationConfig, StudyConfig

    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise DataError(f"study file {path}: {exc}") from None
    try:
        study = StudyConfig(**raw.get("study", {}))
        pop = PopulationConfig(**raw.get("population", {}))
        spec = EffectSpec(**raw.get("effect", {}))
    except TypeError as exc:
        raise DataError(f"study file {path}: {exc}") from None
    return study, pop, spec, raw


def cmd_simulate(args) -> int:
    from .emcs import run_study

    study, pop, spec, raw = load_study(args.config)
    if args.seed is not None:
        study = replace(study, seed=args.seed)
    if args.threads:
        study = replace(study, n_threads=args.threads)
    if args.trees:
        study = replace(study, n_trees=args.trees)
    res = run_study(study, pop, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raw_cfg = dict(raw)
    raw_cfg["study"] = {**raw.get("study", {}), "seed": study.seed, "n_trees": study.n_trees}
    res.write_csv(out / "metrics.csv", header_lines(study.seed, raw_cfg))
    for r in res.rows:
        print(f"{r['estimator']:<22} {r['parameter']:<12} bias {r['bias']:+.3f}  mse {r['mse']:.3f}  "
              f"covp90 {r['covp90']:.3f}")
    return EXIT_OK


# ---- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcforest", description="Modified causal forests with weights-based inference.")
    p.add_argument("--version", action="version", version=f"mcforest {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="grow an honest forest and save the model")
    t.add_argument("--data", required=True)
    t.add_argument("--schema", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--variant", default="one_f_mce",
                   help="basic, one_f, one_f_mce or one_f_vart; a _pen suffix switches the penalty on")
    t.add_argument("--penalty", action="store_true")
    t.add_argument("--lambda", dest="lam", type=float, default=None)
    t.add_argument("--center-folds", type=int, default=None)
    t.add_argument("--trees", type=int, default=1000)
    t.add_argument("--min-leaf", type=int, default=5)
    t.add_argument("--min-leaf-arm", type=int, default=2)
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--feature-draw-mean", type=float, default=None)
    t.add_argument("--tune", action="store_true", help="choose the feature draw mean by out-of-bag objective")
    t.add_argument("--tune-trees", type=int, default=50)
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--trim-retrain", action="store_true",
                   help="drop rows outside the propensity support and train again on the rest")
    t.add_argument("--support-low", type=float, default=0.05)
    t.add_argument("--support-high", type=float, default=0.95)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("effects", cmd_effects, "ATE, GATE and IATE tables from a model"),
                                 ("diagnose", cmd_diagnose, "propensities, support trimming and balance")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--model", required=True)
        e.add_argument("--data", default=None, help="prediction points (default: the honest sample)")
        e.add_argument("--schema", default=None)
        e.add_argument("--out", required=True)
        e.add_argument("--threads", type=int, default=1)
        if name == "effects":
            e.add_argument("--groups", default="")
            e.add_argument("--delta-set", default="")
            e.add_argument("--variance-mode", choices=("arm", "display"), default="arm")
            e.add_argument("--no-iate-se", action="store_true")
        else:
            e.add_argument("--support-low", type=float, default=0.05)
            e.add_argument("--support-high", type=float, default=0.95)
        e.set_defaults(func=func)

    s = sub.add_parser("simulate", help="run a Monte Carlo study from a TOML config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--trees", type=int, default=None)
    s.add_argument("--threads", type=int, default=None)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mcforest: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SupportError, FileNotFoundError) as exc:
        print(f"mcforest: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError, ZeroDivisionError) as exc:
        print(f"mcforest: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"mcforest: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
