"""Replayable experiments: config resolution, replications and the loss ablation.

Config precedence, lowest to highest: built-in defaults, the selected
profile (``paper`` or ``desk``), the JSON config file, command-line flags.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (CsvSchema, DataError, Dataset, IHDP_SCHEMA, JOBS_SCHEMA, SyntheticSpec,
                   add_artificial_contrasts, generate_synthetic, load_csv, split,
                   synthetic_coefficients)
from .evaluation import PolicyConfig, config_hash, evaluate, pehe
from .losses import LossWeights, SinkhornConfig
from .trainer import TrainConfig, TrainedModel, predict_ite, save_checkpoint, train

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("base", "orth", "full")
ABLATION_OMEGAS = (5, 10, 15, 20, 25)
KNOWN_SCHEMAS = {"ihdp": IHDP_SCHEMA, "jobs": JOBS_SCHEMA}


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "profile": "desk",
    "dataset": {"contrasts": 0, "test_fraction": 0.1},
    "model": {"latent_dim": 15, "encoder_layers": 3, "head_hidden": 100, "head_layers": 3},
    "training": {},
    "evaluation": {"policy_threshold": None, "importance_repeats": 5},
    "replication": {"count": 1, "base_seed": 0},
    "ablation": {"omegas": list(ABLATION_OMEGAS), "losses": list(LOSS_VARIANTS)},
    "output_dir": "runs/experiment",
}


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=dict)

    @classmethod
    def build(cls, file_doc: dict | None = None, **flags) -> "ExperimentConfig":
        doc = _merge(DEFAULTS, file_doc or {})
        if flags.get("profile"):
            doc["profile"] = flags["profile"]
        if flags.get("seed") is not None:
            doc["replication"]["base_seed"] = int(flags["seed"])
        if flags.get("out"):
            doc["output_dir"] = str(flags["out"])
        cfg = cls(doc)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, **flags) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.build(doc, **flags)

    def validate(self):
        ds = self.raw["dataset"]
        sources = [k for k in ("synthetic", "csv") if ds.get(k) is not None]
        if len(sources) != 1:
            raise ConfigError("dataset needs exactly one of 'synthetic' or 'csv'")
        if self.raw["replication"]["count"] < 1:
            raise ConfigError("replication count must be >= 1")
        if self.raw["profile"] not in ("paper", "desk"):
            raise ConfigError(f"unknown profile {self.raw['profile']!r}")
        try:
            self.train_config(0)
            if self.is_synthetic:
                self.synthetic_spec(0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @property
    def is_synthetic(self) -> bool:
        return self.raw["dataset"].get("synthetic") is not None

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def seeds(self) -> list[int]:
        rep = self.raw["replication"]
        return [rep["base_seed"] + i for i in range(rep["count"])]

    def synthetic_spec(self, seed: int, omega: int | None = None) -> SyntheticSpec:
        kw = dict(self.raw["dataset"]["synthetic"])
        kw["seed"] = seed
        if omega is not None:
            dims = list(kw.get("dims", (8, 8, 8, 0)))
            dims[3] = omega
            kw["dims"] = dims
        return SyntheticSpec(**kw)

    def train_config(self, seed: int, variant: str = "full") -> TrainConfig:
        tr = dict(self.raw["training"])
        weights = LossWeights(**tr.pop("weights", {}))
        if variant == "base":
            weights = LossWeights(weights.alpha, weights.beta, 0.0, 0.0, weights.mu)
        elif variant == "orth":
            weights = LossWeights(weights.alpha, weights.beta, 0.0, weights.lam, weights.mu)
        elif variant != "full":
            raise ConfigError(f"unknown loss variant {variant!r}")
        sink = SinkhornConfig(**tr.pop("sinkhorn", {}))
        if "adam_betas" in tr:
            tr["adam_betas"] = tuple(tr["adam_betas"])
        return TrainConfig.profile(self.raw["profile"], weights=weights, sinkhorn=sink, seed=seed,
                                   **{**self.raw["model"], **tr})

    def policy(self) -> PolicyConfig | None:
        th = self.raw["evaluation"].get("policy_threshold")
        return None if th is None else PolicyConfig(float(th))

    def echo(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        """Identifies the experiment; the output location is not part of it."""
        return config_hash({k: v for k, v in self.raw.items() if k != "output_dir"})


def _schema(doc) -> CsvSchema:
    if isinstance(doc, str):
        if doc not in KNOWN_SCHEMAS:
            raise ConfigError(f"unknown schema name {doc!r}")
        return KNOWN_SCHEMAS[doc]
    return CsvSchema.from_dict(doc)


def resolve_dataset(cfg: ExperimentConfig, seed: int, omega: int | None = None,
                    replication: int = 0) -> Dataset:
    """The full dataset for one replication, including artificial contrasts.

    Synthetic data is drawn with ``seed``. A CSV path may contain
    ``{rep}``, which is replaced by the 1-based replication number so each
    replication reads its own realization file.
    """
    ds = cfg.raw["dataset"]
    if cfg.is_synthetic:
        return generate_synthetic(cfg.synthetic_spec(seed, omega))
    src = ds["csv"]
    path = str(src["path"]).replace("{rep}", str(replication + 1))
    if not Path(path).exists():
        raise DataError(f"data file not found: {path}")
    data = load_csv(path, _schema(src.get("schema", "ihdp")))
    count = ds.get("contrasts", 0) if omega is None else omega
    return add_artificial_contrasts(data, count, seed=seed)


def train_test(cfg: ExperimentConfig, data: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    frac = cfg.raw["dataset"]["test_fraction"]
    return split(data, (1.0 - frac, frac), seed=seed, stratify=True)


# ---------------------------------------------------------------------------
# single runs


def run_train(cfg: ExperimentConfig, replication: int, variant: str = "full",
              omega: int | None = None) -> tuple[TrainedModel, Dataset]:
    seed = cfg.seeds()[replication]
    data = resolve_dataset(cfg, seed, omega, replication)
    fit, test = train_test(cfg, data, seed)
    return train(fit, cfg.train_config(seed, variant)), test


def run_cell(cfg: ExperimentConfig, replication: int, variant: str,
             omega: int | None = None) -> dict:
    """Train and score one replication; returns plain data for aggregation."""
    model, test = run_train(cfg, replication, variant, omega)
    _, _, e_hat = predict_ite(model, test.x)
    out = {"replication": replication, "seed": cfg.seeds()[replication], "variant": variant,
           "omega": omega, "selection_score": model.selection_score,
           "best_epoch": model.best_epoch}
    truth = test.true_effect
    out["pehe"] = None if truth is None else pehe(e_hat, truth)
    return out


def _cell_job(args):
    raw, replication, variant, omega = args
    return run_cell(ExperimentConfig(raw), replication, variant, omega)


def workers_from_env(explicit: int | None) -> int:
    if explicit is not None:
        return max(1, int(explicit))
    return max(1, int(os.environ.get("DRI_ITE_WORKERS", "1")))


def run_jobs(jobs: list[tuple], workers: int) -> list:
    """Run ``_cell_job`` over ``jobs``; results keep the job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [_safe(_cell_job, j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_safe_cell, jobs))


def _safe(fn, job):
    try:
        return fn(job)
    except (ValueError, FloatingPointError) as exc:
        _, replication, variant, omega = job
        return {"replication": replication, "variant": variant, "omega": omega,
                "error": f"{type(exc).__name__}: {exc}"}


def _safe_cell(job):
    return _safe(_cell_job, job)


def ablation(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    if not cfg.is_synthetic:
        raise ConfigError("the ablation sweep needs a synthetic dataset source")
    ab = cfg.raw["ablation"]
    jobs = [(cfg.raw, r, variant, int(om))
            for variant in ab["losses"] for om in ab["omegas"]
            for r in range(len(cfg.seeds()))]
    return run_jobs(jobs, workers)


def summarize(values) -> dict:
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}


def format_cell(values) -> str:
    s = summarize(values)
    if s["n"] == 0:
        return "NA"
    return f"{s['mean']:.4f}({s['std']:.4f})"


def ablation_table(cells: list[dict], losses, omegas) -> list[list[str]]:
    header = ["loss"] + [f"omega_{om}" for om in omegas]
    rows = [header]
    for variant in losses:
        row = [variant]
        for om in omegas:
            vals = [c.get("pehe") for c in cells
                    if c["variant"] == variant and c["omega"] == om and "error" not in c]
            row.append(format_cell(vals))
        rows.append(row)
    return rows


def manifest_for(cfg: ExperimentConfig, seed: int, data: Dataset) -> dict:
    doc = {"seed": seed, "config_hash": cfg.hash(), "roles": data.roles}
    if cfg.is_synthetic:
        spec = cfg.synthetic_spec(seed)
        doc["synthetic_spec"] = spec.to_dict()
        doc["coefficients"] = {k: v.tolist() for k, v in synthetic_coefficients(spec).items()}
    else:
        doc["source"] = cfg.raw["dataset"]["csv"]
        doc["contrasts"] = cfg.raw["dataset"].get("contrasts", 0)
    return doc


def write_checkpoint(model: TrainedModel, directory, cfg: ExperimentConfig) -> None:
    save_checkpoint(model, directory)
    (Path(directory) / "config.json").write_text(cfg.echo())


def evaluate_replication(cfg: ExperimentConfig, model: TrainedModel, replication: int):
    seed = cfg.seeds()[replication]
    data = resolve_dataset(cfg, seed, None, replication)
    _, test = train_test(cfg, data, seed)
    if test.n_features != model.nets.n_features:
        raise DataError(f"checkpoint expects {model.nets.n_features} covariates, "
                        f"dataset has {test.n_features}")
    return evaluate(model, test, cfg.policy(), cfg.raw["evaluation"]["importance_repeats"],
                    seed=seed, metadata={"seed": seed, "replication": replication,
                                         "config_hash": cfg.hash()})
