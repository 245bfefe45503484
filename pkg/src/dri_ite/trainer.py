"""Minibatch training with Adam and nearest-neighbour PEHE model selection."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset, split
from .losses import PART_NAMES, BatchObjective, LossWeights, SinkhornConfig
from .networks import Architecture, FactorNetworks, NetworkGraph, forward_all, init_networks

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = LossWeights()
    batch_size: int = 256
    max_epochs: int = 5000
    learning_rate: float = 1e-5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    eval_every: int = 10
    seed: int = 0
    sinkhorn: SinkhornConfig = SinkhornConfig()
    latent_dim: int = 15
    encoder_layers: int = 3
    head_hidden: int = 100
    head_layers: int = 3
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    @classmethod
    def profile(cls, name: str, **overrides) -> "TrainConfig":
        """``paper``: lr 1e-5, 5000 epochs. ``desk``: lr 1e-4, 1000 epochs."""
        base = {"paper": dict(learning_rate=1e-5, max_epochs=5000),
                "desk": dict(learning_rate=1e-4, max_epochs=1000)}
        if name not in base:
            raise ValueError(f"unknown profile {name!r}")
        return cls(**{**base[name], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "sinkhorn" in d:
            d["sinkhorn"] = SinkhornConfig(**d["sinkhorn"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)

    def architecture(self, n_features: int) -> Architecture:
        return Architecture(n_features, self.latent_dim, self.encoder_layers,
                            self.head_hidden, self.head_layers)


@dataclass
class Scaler:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    @classmethod
    def fit(cls, data: Dataset) -> "Scaler":
        sx = data.x.std(axis=0)
        sy = float(data.y.std())
        return cls(data.x.mean(axis=0), np.where(sx > 0, sx, 1.0),
                   float(data.y.mean()), sy if sy > 0 else 1.0)

    def x(self, x):
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std

    def y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def y_inverse(self, z):
        return np.asarray(z) * self.y_std + self.y_mean

    def to_dict(self):
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["x_mean"]), np.array(d["x_std"]), d["y_mean"], d["y_std"])


@dataclass
class TrainedModel:
    nets: FactorNetworks
    scaler: Scaler
    history: list[dict] = field(default_factory=list)
    selection_score: float = math.inf
    best_epoch: int = 0
    config: TrainConfig | None = None


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, betas=(0.9, 0.999), eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, tuple(betas), eps)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# nearest-neighbour PEHE


def nearest_opposite(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Index of each unit's nearest neighbour (Euclidean) in the other
    treatment group; ties go to the lowest index."""
    t = np.asarray(t).reshape(-1)
    out = np.empty(t.size, dtype=int)
    for g in (0, 1):
        rows, others = np.flatnonzero(t == g), np.flatnonzero(t != g)
        if rows.size == 0:
            continue
        if others.size == 0:
            raise ValueError("nearest-neighbour matching needs both treatment groups")
        d = (np.square(x[rows]).sum(1)[:, None] + np.square(x[others]).sum(1)[None, :]
             - 2.0 * x[rows] @ x[others].T)
        out[rows] = others[np.argmin(d, axis=1)]
    return out


def nn_effects(x_std: np.ndarray, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Surrogate effects using the matched opposite-group factual outcome."""
    nn = nearest_opposite(x_std, t)
    return np.where(t == 1, y - y[nn], y[nn] - y)


def pehe_nn(model: TrainedModel, val: Dataset) -> float:
    if val.n_treated == 0 or val.n_control == 0:
        raise ValueError("pehe_nn needs both treatment groups in the validation split")
    surrogate = nn_effects(model.scaler.x(val.x), val.t, val.y)
    _, _, e_hat = predict_ite(model, val.x)
    return float(np.sqrt(np.mean((e_hat - surrogate) ** 2)))


# ---------------------------------------------------------------------------
# prediction


def predict_ite(model: TrainedModel, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Potential outcomes and effect per unit on the original outcome scale.

    ``x`` is in raw covariate units; the model's training scaler is applied.
    Returns ``(y1_hat, y0_hat, e_hat)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.nets.n_features:
        raise ad.ShapeError(f"expected {model.nets.n_features} covariate columns, "
                            f"got shape {x.shape}")
    outs = forward_all(model.nets, model.scaler.x(x))
    y1 = model.scaler.y_inverse(outs["y1_hat"][:, 0])
    y0 = model.scaler.y_inverse(outs["y0_hat"][:, 0])
    e = (outs["y1_hat"][:, 0] - outs["y0_hat"][:, 0]) * model.scaler.y_std
    return y1, y0, e


def predict_treatment(model: TrainedModel, x) -> np.ndarray:
    return forward_all(model.nets, model.scaler.x(x))["t_hat"][:, 0]


# ---------------------------------------------------------------------------
# training


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled minibatch indices for one epoch, a pure function of
    ``(seed, epoch)``."""
    perm = np.random.default_rng([seed, 4, epoch]).permutation(n)
    n_batches = max(1, math.ceil(n / batch_size))
    if n // n_batches < 2:
        n_batches = max(1, n // 2)
    return np.array_split(perm, n_batches)


def train(data: Dataset, cfg: TrainConfig, val: Dataset | None = None) -> TrainedModel:
    """Fit the networks on ``data`` and return the best checkpoint by PEHE_nn.

    Unless ``val`` is supplied, a stratified ``val_fraction`` of ``data`` is
    held out for model selection.
    """
    if data.n_treated == 0 or data.n_control == 0:
        raise ValueError("training data must contain both treatment groups")
    if val is None:
        fit_part, val = split(data, (1.0 - cfg.val_fraction, cfg.val_fraction),
                              seed=cfg.seed, stratify=True)
    else:
        fit_part = data
    scaler = Scaler.fit(fit_part)
    x, t, y = scaler.x(fit_part.x), fit_part.t, scaler.y(fit_part.y)

    nets = init_networks(cfg.architecture(data.n_features), seed=cfg.seed)
    graph = NetworkGraph(nets)
    params = graph.all_params()
    arrays = [p.value for p in params]
    state = AdamState.zeros_like(arrays, cfg.adam_betas, cfg.adam_eps)

    batch_objective = BatchObjective(graph, cfg.weights, cfg.sinkhorn)
    model = TrainedModel(nets.copy(), scaler, config=cfg)
    val_x = scaler.x(val.x)
    val_surrogate = nn_effects(val_x, val.t, val.y)

    for epoch in range(1, cfg.max_epochs + 1):
        sums = dict.fromkeys(PART_NAMES + ("total",), 0.0)
        batches = epoch_batches(fit_part.n, cfg.batch_size, cfg.seed, epoch)
        for idx in batches:
            total, parts = batch_objective(x[idx], t[idx], y[idx])
            try:
                ad.forward(total)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            grads = ad.backward(total, params)
            adam_step(arrays, [grads[p] for p in params], state, cfg.learning_rate)
            w = idx.size / fit_part.n
            for k, node in parts.items():
                sums[k] += w * float(node.value)
            sums["total"] += w * float(total.value)
        if not math.isfinite(sums["total"]):
            raise TrainingDiverged(epoch)
        row = {"epoch": epoch, **sums, "pehe_nn": math.nan}
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            outs = forward_all(nets, val_x)
            e_hat = (outs["y1_hat"][:, 0] - outs["y0_hat"][:, 0]) * scaler.y_std
            score = float(np.sqrt(np.mean((e_hat - val_surrogate) ** 2)))
            row["pehe_nn"] = score
            if score < model.selection_score:
                model.nets = nets.copy()
                model.selection_score = score
                model.best_epoch = epoch
            log.debug("epoch %d total %.4f pehe_nn %.4f", epoch, sums["total"], score)
        model.history.append(row)
    return model


# ---------------------------------------------------------------------------
# checkpoints

HISTORY_COLUMNS = ("epoch",) + PART_NAMES + ("total", "pehe_nn")


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [
                "" if math.isnan(row[c]) else repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"epoch": int(r["epoch"]),
             **{c: (math.nan if r[c] == "" else float(r[c])) for c in HISTORY_COLUMNS[1:]}}
            for r in rows]


def save_checkpoint(model: TrainedModel, directory) -> None:
    """Writes ``networks.json``, ``model.json`` (scaler, selection, config
    echo) and ``history.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "networks.json").write_text(model.nets.to_json() + "\n")
    meta = {"scaler": model.scaler.to_dict(), "selection_score": model.selection_score,
            "best_epoch": model.best_epoch,
            "config": model.config.to_dict() if model.config else None}
    (d / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_history(model.history, d / "history.csv")


def load_checkpoint(directory) -> TrainedModel:
    d = Path(directory)
    nets = FactorNetworks.from_json((d / "networks.json").read_text())
    meta = json.loads((d / "model.json").read_text())
    history = read_history(d / "history.csv") if (d / "history.csv").exists() else []
    cfg = TrainConfig.from_dict(meta["config"]) if meta.get("config") else None
    return TrainedModel(nets, Scaler.from_dict(meta["scaler"]), history,
                        meta["selection_score"], meta["best_epoch"], cfg)


__all__ = [
    "TrainConfig", "TrainedModel", "Scaler", "AdamState", "TrainingDiverged",
    "adam_step", "train", "predict_ite", "predict_treatment", "pehe_nn", "nearest_opposite",
    "nn_effects", "epoch_batches", "save_checkpoint", "load_checkpoint",
]
