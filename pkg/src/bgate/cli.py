"""Command-line front end.

Subcommands: ``estimate`` effects on a CSV, ``simulate`` replication
studies on the built-in design, ``tune`` nuisance forests, ``decompose`` a
group-effect difference. Flags can be pre-set in a JSON config file
(``--config``); explicit flags override file values. Exit codes: 0 ok,
2 validation error, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .data import ColumnRoles, DataError, EffectKind, EffectTarget, EstimationError, load_csv, save_csv
from .dml import DmlConfig, decompose_delta_gate, estimate_bgate, estimate_delta_bgate, \
    estimate_delta_cbgate, estimate_delta_gate, estimate_gate, tune_nuisance
from .learners import TuningGrid
from .reweight import estimate_delta_bgate_reweighted
from .riesz import TrainingDivergence, estimate_auto_dml_delta_bgate, stage1_config, stage2_config
from .simlab import PAPER_DGP, EstimatorSpec, run_study, sim_target, tuned_dml_config

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ESTIMATION = 3


def _apply_config_file(argv: list[str], args: argparse.Namespace) -> argparse.Namespace:
    """Fill in values from --config JSON for flags not given explicitly."""
    if not getattr(args, "config", None):
        return args
    with open(args.config, encoding="utf-8") as fh:
        payload = json.load(fh)
    given = {a.lstrip("-").split("=")[0].replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in payload.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise DataError(f"unknown config key {key!r}")
        if attr not in given:
            setattr(args, attr, value)
    return args


def _data_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--data", required=True, help="input CSV path")
    sub.add_argument("--outcome", required=True, help="outcome column name")
    sub.add_argument("--treatment", required=True, help="treatment column name")
    sub.add_argument("--moderator", required=True, help="moderator column name")
    sub.add_argument("--balance", default="", help="comma-separated balancing columns")
    sub.add_argument("--covariates", default=None,
                     help="comma-separated covariate columns (default: all others)")


def _common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--k", type=int, default=2, help="outer cross-fitting folds")
    sub.add_argument("--j", type=int, default=2, help="inner cross-fitting folds")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--trees", type=int, default=1000, help="trees per forest")
    sub.add_argument("--threads", type=int, default=0,
                     help="tree-fitting threads (0 = all cores); results are identical for any value")
    sub.add_argument("--out", default=None, help="output path (JSON report)")
    sub.add_argument("--config", default=None, help="JSON config file with flag defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bgate",
                                     description="Balanced group treatment-effect estimation")
    cmds = parser.add_subparsers(dest="command", required=True)

    est = cmds.add_parser("estimate", help="estimate an effect on a CSV dataset")
    _data_flags(est)
    est.add_argument("--effect", required=True,
                     choices=["gate", "bgate", "delta-gate", "delta-bgate", "delta-cbgate"])
    est.add_argument("--estimator", default="dml", choices=["dml", "autodml", "reweight"])
    est.add_argument("--group", type=int, default=None,
                     help="moderator level for gate/bgate (coded)")
    est.add_argument("--groups", default="1,0",
                     help="moderator contrast u,v for delta effects (coded)")
    est.add_argument("--treatments", default="1,0", help="treatment contrast l,m (coded)")
    est.add_argument("--cbgate-version", default="joint", choices=["joint", "product"])
    _common_flags(est)

    sim = cmds.add_parser("simulate", help="run a replication study on the built-in design")
    sim.add_argument("--n", type=int, required=True, help="sample size per replication")
    sim.add_argument("--reps", type=int, required=True, help="number of replications")
    sim.add_argument("--effect", required=True,
                     choices=["delta-bgate-x0", "delta-bgate-x2", "delta-gate"])
    sim.add_argument("--estimator", default="dml", choices=["dml", "autodml", "reweight"])
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--trees", type=int, default=500,
                     help="trees per forest (simulation default favors runtime)")
    sim.add_argument("--n-truth", type=int, default=1_000_000)
    sim.add_argument("--threads", type=int, default=0,
                     help="worker processes for replications (0 = all cores)")
    sim.add_argument("--out", default=None, help="output directory")
    sim.add_argument("--emit-data", action="store_true",
                     help="also write the first replication's sample as CSV")
    sim.add_argument("--config", default=None)

    tune = cmds.add_parser("tune", help="grid-tune nuisance forests on a CSV dataset")
    _data_flags(tune)
    tune.add_argument("--grid-depths", default="2,3,5,10,20")
    tune.add_argument("--grid-leaves", default="5,10,15,20,30,50")
    tune.add_argument("--draws", type=int, default=20)
    tune.add_argument("--cv-folds", type=int, default=2)
    tune.add_argument("--treatments", default="1,0")
    _common_flags(tune)

    dec = cmds.add_parser("decompose", help="split a group-effect difference")
    _data_flags(dec)
    dec.add_argument("--groups", default="1,0")
    dec.add_argument("--treatments", default="1,0")
    _common_flags(dec)
    return parser


def _parse_pair(text: str, what: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise DataError(f"{what} must be two comma-separated levels, got {text!r}")
    return int(parts[0]), int(parts[1])


def _load_dataset(args):
    balance = [c for c in args.balance.split(",") if c] if args.balance else []
    covariates = [c for c in args.covariates.split(",") if c] if args.covariates else None
    roles = ColumnRoles(outcome=args.outcome, treatment=args.treatment,
                        moderator=args.moderator, covariates=covariates,
                        balance=balance)
    return load_csv(args.data, roles)


def _dml_config(args) -> DmlConfig:
    threads = args.threads if args.threads > 0 else (os.cpu_count() or 1)
    return DmlConfig(k=args.k, j=args.j, seed=args.seed,
                     threads=threads).with_trees(args.trees)


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_estimate(args) -> int:
    data = _load_dataset(args)
    l, m = _parse_pair(args.treatments, "--treatments")
    kind = EffectKind(args.effect)
    if kind in (EffectKind.GATE, EffectKind.BGATE):
        if args.group is None:
            raise DataError("--group is required for gate/bgate")
        target = EffectTarget(kind=kind, treat_contrast=(l, m), group=args.group)
    else:
        u, v = _parse_pair(args.groups, "--groups")
        target = EffectTarget(kind=kind, treat_contrast=(l, m), group_contrast=(u, v))
    if kind in (EffectKind.BGATE, EffectKind.DELTA_BGATE) and not data.w_cols:
        raise DataError(f"--balance is required for effect {args.effect}")

    cfg = _dml_config(args)
    estimator = args.estimator
    if estimator == "autodml":
        if kind is not EffectKind.DELTA_BGATE:
            raise DataError(f"unsupported combination: estimator autodml with effect {args.effect}")
        est = estimate_auto_dml_delta_bgate(
            data, target, stage1_config(seed=args.seed), stage2_config(seed=args.seed),
            k=args.k, j=args.j, seed=args.seed)
    elif estimator == "reweight":
        if kind is not EffectKind.DELTA_BGATE:
            raise DataError(f"unsupported combination: estimator reweight with effect {args.effect}")
        est = estimate_delta_bgate_reweighted(data, target, cfg)
    else:
        runner = {
            EffectKind.GATE: estimate_gate,
            EffectKind.BGATE: estimate_bgate,
            EffectKind.DELTA_GATE: estimate_delta_gate,
            EffectKind.DELTA_BGATE: estimate_delta_bgate,
        }
        if kind is EffectKind.DELTA_CBGATE:
            est = estimate_delta_cbgate(data, target, cfg, version=args.cbgate_version)
        else:
            est = runner[kind](data, target, cfg)

    lo, hi = est.confidence_interval()
    print(f"{target.label()}  coef={est.coef:.6f}  se={est.se:.6f}  "
          f"p={est.p_value:.4g}  ci95=[{lo:.6f}, {hi:.6f}]  n={est.n}")
    if args.out:
        payload = est.to_dict()
        payload["estimator"] = estimator
        payload["treat_level_codes"] = {str(code): lev for code, lev in enumerate(data.treat_levels)}
        payload["moderator_level_codes"] = {str(code): lev for code, lev in enumerate(data.mod_levels)}
        _write_json(args.out, payload)
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.reps < 2:
        raise DataError("--reps must be at least 2")
    target, balance_cols = sim_target(args.effect)
    cfg = tuned_dml_config(args.effect, args.n, n_trees=args.trees, seed=args.seed)
    spec = EstimatorSpec(kind=args.estimator, dml=cfg,
                         stage1=stage1_config(seed=args.seed),
                         stage2=stage2_config(seed=args.seed))
    workers = args.threads if args.threads > 0 else (os.cpu_count() or 1)
    result = run_study(spec, target, n=args.n, reps=args.reps, base_seed=args.seed,
                       balance_cols=balance_cols, n_truth=args.n_truth,
                       n_workers=workers)
    rep = result.report
    print(f"effect={args.effect} estimator={args.estimator} n={args.n} reps={args.reps}")
    print(f"truth={result.truth.value:.6f} (mc se {result.truth.mc_se:.6f})")
    print(f"bias={rep.bias:.4f} |bias|={rep.abs_bias:.4f} std={rep.std:.4f} "
          f"rmse={rep.rmse:.4f} skew={rep.skew:.3f} ex_kurt={rep.ex_kurt:.3f} "
          f"bias_se={rep.bias_se:.4f} coverage={rep.coverage_95:.3f} "
          f"failures={rep.n_failures}")

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        stem = f"{args.effect}_{args.estimator}_n{args.n}_r{args.reps}_s{args.seed}"
        raw_path = os.path.join(args.out, f"{stem}_raw.csv")
        with open(raw_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rep", "seed", "estimator", "target", "n", "coef", "se", "truth"])
            for row in result.raw:
                writer.writerow([row.rep, row.seed, args.estimator, args.effect,
                                 args.n, repr(row.coef), repr(row.se),
                                 repr(result.truth.value)])
        payload = rep.to_dict()
        payload.update({"effect": args.effect, "estimator": args.estimator,
                        "n": args.n, "reps": args.reps, "seed": args.seed,
                        "trees": args.trees, "truth_mc_se": result.truth.mc_se,
                        "failed_reps": [list(f) for f in result.failures]})
        _write_json(os.path.join(args.out, f"{stem}_report.json"), payload)
        if args.emit_data:
            sample = PAPER_DGP.generate(args.n, args.seed, balance_cols=balance_cols)
            save_csv(sample.data, os.path.join(args.out, f"{stem}_data.csv"))
    return EXIT_OK


def cmd_tune(args) -> int:
    data = _load_dataset(args)
    depths = tuple(int(v) for v in args.grid_depths.split(",") if v)
    leaves = tuple(int(v) for v in args.grid_leaves.split(",") if v)
    grid = TuningGrid(depths=depths, leaves=leaves, folds=args.cv_folds, draws=args.draws)
    l, m = _parse_pair(args.treatments, "--treatments")
    roles = [f"mu:{l}", f"mu:{m}", "pi"]
    if data.w_cols:
        roles += ["g", "lambda"]
    chosen = {}
    for role in roles:
        cfg = tune_nuisance(data, role, grid, seed=args.seed, n_trees=args.trees,
                            treat_contrast=(l, m))
        chosen[role] = {"max_depth": cfg.max_depth, "min_leaf": cfg.min_leaf}
        print(f"{role:8s} max_depth={cfg.max_depth:3d} min_leaf={cfg.min_leaf:3d}")
    if args.out:
        _write_json(args.out, {"grid": {"depths": list(depths), "leaves": list(leaves),
                                        "draws": args.draws, "cv_folds": args.cv_folds},
                               "chosen": chosen})
    return EXIT_OK


def cmd_decompose(args) -> int:
    data = _load_dataset(args)
    if not data.w_cols:
        raise DataError("--balance is required for decompose")
    l, m = _parse_pair(args.treatments, "--treatments")
    u, v = _parse_pair(args.groups, "--groups")
    target = EffectTarget(kind=EffectKind.DELTA_BGATE, treat_contrast=(l, m),
                          group_contrast=(u, v))
    cfg = _dml_config(args)
    dec = decompose_delta_gate(data, target, cfg)
    print(f"{'delta_gate':>18s} {dec.delta_gate:12.6f}")
    print(f"{'delta_bgate':>18s} {dec.delta_bgate:12.6f}   (direct)")
    print(f"{'compositional(1)':>18s} {dec.comp1:12.6f}")
    print(f"{'compositional(2)':>18s} {dec.comp2:12.6f}")
    print(f"{'identity residual':>18s} {dec.residual:12.3e}")
    if args.out:
        _write_json(args.out, {"delta_gate": dec.delta_gate, "delta_bgate": dec.delta_bgate,
                               "comp1": dec.comp1, "comp2": dec.comp2,
                               "residual": dec.residual})
    return EXIT_OK


_COMMANDS = {
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "tune": cmd_tune,
    "decompose": cmd_decompose,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(argv, args)
        return _COMMANDS[args.command](args)
    except (DataError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EstimationError, TrainingDivergence, np.linalg.LinAlgError) as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
