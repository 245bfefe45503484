"""Effect metrics and identification analyses for a trained model."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset
from .losses import BCE_CLAMP
from .networks import FACTORS, FactorNetworks, forward_all, weight_contribution
from .trainer import TrainedModel

METRICS = ("BCE", "MSE", "PEHE")


def pehe(e_hat, e_true) -> float:
    """Root mean squared error between predicted and true effects."""
    e_hat = np.asarray(e_hat, dtype=np.float64).reshape(-1)
    e_true = np.asarray(e_true, dtype=np.float64).reshape(-1)
    if e_hat.size == 0:
        raise ValueError("pehe of an empty set")
    if e_hat.shape != e_true.shape:
        raise ValueError(f"length mismatch: {e_hat.size} vs {e_true.size}")
    return float(np.sqrt(np.mean((e_hat - e_true) ** 2)))


@dataclass(frozen=True)
class PolicyConfig:
    threshold: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")


@dataclass(frozen=True)
class PolicyRisk:
    risk: float
    treat_fraction: float
    value_treated: float | None
    value_control: float | None

    @property
    def flags(self) -> list[str]:
        out = []
        if self.value_treated is None and self.treat_fraction > 0:
            out.append("no treated units among policy-treated")
        if self.value_control is None and self.treat_fraction < 1:
            out.append("no control units among policy-untreated")
        return out


def policy_risk_breakdown(y, t, e_hat, cfg: PolicyConfig = PolicyConfig()) -> PolicyRisk:
    """Factual-agreement estimate of the value lost by the policy
    ``treat iff e_hat > threshold``.

    The value of each policy arm is the mean factual outcome of units whose
    received treatment agrees with the policy; an arm with no agreeing units
    contributes zero and is reported in :attr:`PolicyRisk.flags`.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    e_hat = np.asarray(e_hat, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("policy risk of an empty evaluation set")
    if not (y.shape == t.shape == e_hat.shape):
        raise ValueError("y, t and e_hat must have equal lengths")
    treat = e_hat > cfg.threshold
    p_treat = float(treat.mean())
    agree1 = treat & (t == 1)
    agree0 = ~treat & (t == 0)
    v1 = float(y[agree1].mean()) if agree1.any() else None
    v0 = float(y[agree0].mean()) if agree0.any() else None
    value = (v1 or 0.0) * p_treat + (v0 or 0.0) * (1.0 - p_treat)
    return PolicyRisk(1.0 - value, p_treat, v1, v0)


def policy_risk(y, t, e_hat, cfg: PolicyConfig = PolicyConfig()) -> float:
    return policy_risk_breakdown(y, t, e_hat, cfg).risk


# ---------------------------------------------------------------------------
# permutation importance


def _metrics(model: TrainedModel, data: Dataset, x: np.ndarray) -> dict[str, float]:
    outs = forward_all(model.nets, model.scaler.x(x))
    p = np.clip(outs["t_hat"][:, 0], BCE_CLAMP, 1.0 - BCE_CLAMP)
    bce = -np.mean(data.t * np.log(p) + (1.0 - data.t) * np.log(1.0 - p))
    y1 = model.scaler.y_inverse(outs["y1_hat"][:, 0])
    y0 = model.scaler.y_inverse(outs["y0_hat"][:, 0])
    mse = np.mean((np.where(data.t == 1, y1, y0) - data.y) ** 2)
    out = {"BCE": float(bce), "MSE": float(mse)}
    truth = data.true_effect
    if truth is not None:
        e_hat = (outs["y1_hat"][:, 0] - outs["y0_hat"][:, 0]) * model.scaler.y_std
        out["PEHE"] = pehe(e_hat, truth)
    return out


def permutation_importances(model: TrainedModel, data: Dataset, repeats: int = 5, seed: int = 0,
                            permute: Callable[[np.random.Generator, int], np.ndarray] | None = None
                            ) -> dict[str, np.ndarray]:
    """Increase of every metric when one column is shuffled, for all columns.

    Each column gets its own RNG stream derived from ``(seed, column)``.
    ``permute(rng, n)`` returns the row permutation and defaults to a
    uniform random permutation. PEHE is included when ``data`` carries true
    effects.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    permute = permute or (lambda rng, n: rng.permutation(n))
    baseline = _metrics(model, data, data.x)
    out = {m: np.zeros(data.n_features) for m in baseline}
    x = data.x.copy()
    for j in range(data.n_features):
        rng = np.random.default_rng([seed, 5, j])
        acc = dict.fromkeys(baseline, 0.0)
        original = data.x[:, j]
        for _ in range(repeats):
            x[:, j] = original[permute(rng, data.n)]
            for m, v in _metrics(model, data, x).items():
                acc[m] += v - baseline[m]
        x[:, j] = original
        for m in baseline:
            out[m][j] = acc[m] / repeats
    return out


def permutation_importance(model: TrainedModel, data: Dataset, metric: str, repeats: int = 5,
                           seed: int = 0, permute=None) -> np.ndarray:
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    if metric == "PEHE" and data.true_effect is None:
        raise ValueError("PEHE importance needs true effects")
    return permutation_importances(model, data, repeats, seed, permute)[metric]


# ---------------------------------------------------------------------------
# weight-based identification


def identification_report(nets: FactorNetworks, roles) -> dict[str, dict[str, float]]:
    """Mean contribution of matching-role features versus all others, per encoder."""
    roles = list(roles)
    if len(roles) != nets.n_features:
        raise ValueError(f"{len(roles)} roles for {nets.n_features} features")
    if any(r not in FACTORS for r in roles):
        raise ValueError("identification needs a known factor role for every feature")
    roles = np.asarray(roles)
    out = {}
    for factor, wbar in weight_contribution(nets).items():
        inside = roles == factor
        out[factor] = {
            "in_group": float(wbar[inside].mean()) if inside.any() else math.nan,
            "out_group": float(wbar[~inside].mean()) if (~inside).any() else math.nan,
        }
    return out


# ---------------------------------------------------------------------------
# report


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EvaluationReport:
    pehe: float | None
    policy_risk: float | None
    importance: dict[str, list[float]]
    contribution: dict[str, list[float]]
    identification: dict[str, dict[str, float]] | None
    roles: list[str]
    metadata: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"pehe": self.pehe, "policy_risk": self.policy_risk,
                "importance": self.importance, "contribution": self.contribution,
                "identification": self.identification, "roles": self.roles,
                "metadata": self.metadata, "flags": self.flags}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(**d)

    def write(self, directory) -> None:
        """``report.json``, ``importance.csv`` and ``weights.csv`` (tidy)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(self.to_json())
        write_tidy(d / "importance.csv", self.importance, self.roles, "metric")
        write_tidy(d / "weights.csv", self.contribution, self.roles, "encoder")


def write_tidy(path, vectors: dict[str, list[float]], roles, key: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_index", "role", key, "value"])
        for name in vectors:
            for j, v in enumerate(vectors[name]):
                w.writerow([j, roles[j], name, repr(float(v))])


def evaluate(model: TrainedModel, data: Dataset, policy: PolicyConfig | None = None,
             repeats: int = 5, seed: int = 0, metadata: dict | None = None) -> EvaluationReport:
    """Full report on ``data``: PEHE when true effects exist, policy risk
    when ``policy`` is given, permutation importances and W-bar analyses."""
    from .trainer import predict_ite

    _, _, e_hat = predict_ite(model, data.x)
    truth = data.true_effect
    flags = []
    risk = None
    if policy is not None:
        pr = policy_risk_breakdown(data.y, data.t, e_hat, policy)
        risk, flags = pr.risk, pr.flags
    imp = permutation_importances(model, data, repeats, seed)
    contrib = weight_contribution(model.nets)
    known = all(r in FACTORS for r in data.roles)
    return EvaluationReport(
        pehe=None if truth is None else pehe(e_hat, truth),
        policy_risk=risk,
        importance={m: v.tolist() for m, v in imp.items()},
        contribution={f: v.tolist() for f, v in contrib.items()},
        identification=identification_report(model.nets, data.roles) if known else None,
        roles=list(data.roles),
        metadata=dict(metadata or {}),
        flags=flags,
    )
