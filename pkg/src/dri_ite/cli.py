"""Command-line entry point: ``dri-ite <command> --config PATH [flags]``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .autodiff import NonFiniteError
from .data import DataError, export_dataset
from .evaluation import write_tidy
from .networks import weight_contribution
from .trainer import TrainingDiverged, load_checkpoint

log = logging.getLogger("dri_ite")

COMMANDS = ("gen-data", "augment", "train", "eval", "importance", "weights-report", "ablation")


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _rep_dir(out: Path, r: int) -> Path:
    return out / f"rep_{r:03d}"


def _echo(cfg: ex.ExperimentConfig) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "config.json").write_text(cfg.echo())


def cmd_gen_data(cfg: ex.ExperimentConfig, args) -> None:
    if not cfg.is_synthetic:
        raise ex.ConfigError("gen-data needs a synthetic dataset section")
    _echo(cfg)
    for r, seed in enumerate(cfg.seeds()):
        data = ex.resolve_dataset(cfg, seed, replication=r)
        path = _rep_dir(cfg.output_dir, r) / "data.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        export_dataset(data, path, ex.manifest_for(cfg, seed, data))
        log.info("wrote %s (%d x %d)", path, data.n, data.n_features)


def cmd_augment(cfg: ex.ExperimentConfig, args) -> None:
    if cfg.is_synthetic:
        raise ex.ConfigError("augment reads a csv dataset section; use gen-data for synthetic data")
    _echo(cfg)
    for r, seed in enumerate(cfg.seeds()):
        data = ex.resolve_dataset(cfg, seed, replication=r)
        path = _rep_dir(cfg.output_dir, r) / "augmented.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        export_dataset(data, path, ex.manifest_for(cfg, seed, data))
        log.info("wrote %s (%d covariates)", path, data.n_features)


def cmd_train(cfg: ex.ExperimentConfig, args) -> None:
    _echo(cfg)
    scores = []
    for r in range(len(cfg.seeds())):
        try:
            model, _ = ex.run_train(cfg, r)
        except TrainingDiverged as exc:
            raise TrainingDiverged(exc.epoch, f"replication {r}") from exc
        ex.write_checkpoint(model, _rep_dir(cfg.output_dir, r), cfg)
        scores.append(model.selection_score)
        log.info("replication %d: pehe_nn %.4f at epoch %d", r, model.selection_score,
                 model.best_epoch)
    _write_json(cfg.output_dir / "train_summary.json",
                {"selection_score": ex.summarize(scores), "per_replication": scores,
                 "config_hash": cfg.hash()})


def _checkpoint_dir(cfg, args, r: int) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    return _rep_dir(cfg.output_dir, r)


def _load(cfg, args, r):
    d = _checkpoint_dir(cfg, args, r)
    if not (d / "networks.json").exists():
        raise DataError(f"no checkpoint in {d}")
    return load_checkpoint(d)


def _replications(cfg, args) -> range:
    return range(1) if args.checkpoint else range(len(cfg.seeds()))


def cmd_eval(cfg: ex.ExperimentConfig, args) -> None:
    pehes, risks = [], []
    for r in _replications(cfg, args):
        report = ex.evaluate_replication(cfg, _load(cfg, args, r), r)
        report.write(_checkpoint_dir(cfg, args, r) / "eval")
        pehes.append(report.pehe)
        risks.append(report.policy_risk)
    _write_json(cfg.output_dir / "eval_summary.json",
                {"pehe": ex.summarize(pehes), "policy_risk": ex.summarize(risks),
                 "per_replication": {"pehe": pehes, "policy_risk": risks},
                 "config_hash": cfg.hash()})


def cmd_importance(cfg: ex.ExperimentConfig, args) -> None:
    for r in _replications(cfg, args):
        report = ex.evaluate_replication(cfg, _load(cfg, args, r), r)
        write_tidy(_checkpoint_dir(cfg, args, r) / "importance.csv", report.importance,
                   report.roles, "metric")


def cmd_weights_report(cfg: ex.ExperimentConfig, args) -> None:
    from .evaluation import identification_report

    for r, seed in zip(_replications(cfg, args), cfg.seeds()):
        model = _load(cfg, args, r)
        d = _checkpoint_dir(cfg, args, r)
        data = ex.resolve_dataset(cfg, seed, replication=r)
        contrib = {f: v.tolist() for f, v in weight_contribution(model.nets).items()}
        write_tidy(d / "weights.csv", contrib, data.roles, "encoder")
        known = all(role != "unknown" for role in data.roles)
        _write_json(d / "identification.json",
                    identification_report(model.nets, data.roles) if known else {})


def cmd_ablation(cfg: ex.ExperimentConfig, args) -> None:
    _echo(cfg)
    cells = ex.ablation(cfg, ex.workers_from_env(args.workers))
    ab = cfg.raw["ablation"]
    _write_csv(cfg.output_dir / "ablation.csv", ex.ablation_table(cells, ab["losses"], ab["omegas"]))
    rows = [["variant", "omega", "replication", "seed", "pehe", "selection_score", "best_epoch",
             "error"]]
    for c in cells:
        rows.append([c["variant"], c["omega"], c["replication"], c.get("seed", ""),
                     "" if c.get("pehe") is None else repr(c["pehe"]),
                     "" if c.get("selection_score") is None else repr(c["selection_score"]),
                     c.get("best_epoch", ""), c.get("error", "")])
    _write_csv(cfg.output_dir / "ablation_cells.csv", rows)
    for c in cells:
        if "error" in c:
            log.warning("cell %s/%s/%s failed: %s", c["variant"], c["omega"], c["replication"],
                        c["error"])


HANDLERS = {
    "gen-data": cmd_gen_data,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "importance": cmd_importance,
    "weights-report": cmd_weights_report,
    "ablation": cmd_ablation,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dri-ite", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--seed", type=int, default=None, help="base seed override")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--workers", type=int, default=None,
                       help="parallel workers (fallback: DRI_ITE_WORKERS)")
        p.add_argument("--profile", choices=("paper", "desk"), default=None)
        p.add_argument("--checkpoint", default=None,
                       help="checkpoint directory (eval, importance, weights-report)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ex.ExperimentConfig.load(args.config, seed=args.seed, out=args.out,
                                       profile=args.profile)
        HANDLERS[args.command](cfg, args)
    except ex.ConfigError as exc:
        log.error("config error: %s", exc)
        return 1
    except DataError as exc:
        log.error("data error: %s", exc)
        return 2
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
