"""Training objective terms, each built as a differentiable graph node."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .networks import FACTORS, NetworkGraph

BCE_CLAMP = 1e-7

ORTHOGONAL_PAIRS = (
    ("gamma", "delta"),
    ("delta", "upsilon"),
    ("upsilon", "gamma"),
    ("omega", "gamma"),
    ("omega", "delta"),
    ("omega", "upsilon"),
)

REGULARIZED_HEADS = ("y1", "y0", "treat", "recon")


@dataclass(frozen=True)
class LossWeights:
    """Multipliers of the classification, discrepancy, reconstruction,
    orthogonality and parameter-regularization terms."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    lam: float = 1.0
    mu: float = 1e-4

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
                "lam": self.lam, "mu": self.mu}


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 1.0
    iterations: int = 10
    standardize: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def _col(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape(-1, 1)


def _regression(y: ad.Node, t: ad.Node, not_t: ad.Node, y0_hat, y1_hat) -> ad.Node:
    pred = ad.mul(t, y1_hat) + ad.mul(not_t, y0_hat)
    return ad.mean(ad.square(pred - y))


def _bce(t: ad.Node, not_t: ad.Node, ones: ad.Node, t_hat) -> ad.Node:
    p = ad.clip(t_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = ad.mul(t, ad.log(p)) + ad.mul(not_t, ad.log(ones - p))
    return -ad.mean(ll)


def _disc(upsilon, sel0: ad.Node, sel1: ad.Node, cfg: SinkhornConfig) -> ad.Node:
    emb = ad.standardize(upsilon) if cfg.standardize else upsilon
    a = ad.matmul(sel0, emb)
    b = ad.matmul(sel1, emb)
    fwd = ad.sinkhorn_cost(a, b, cfg.epsilon, cfg.iterations)
    rev = ad.sinkhorn_cost(b, a, cfg.epsilon, cfg.iterations)
    return ad.scale(fwd + rev, 0.5)


def _selectors(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = []
    for g in (0, 1):
        idx = np.flatnonzero(t == g)
        sel = np.zeros((idx.size, t.size))
        sel[np.arange(idx.size), idx] = 1.0
        out.append(sel)
    return out[0], out[1]


def regression_loss(y, t, y0_hat: ad.Node, y1_hat: ad.Node) -> ad.Node:
    """Mean squared error of the head matching each unit's observed treatment."""
    y, t = _col(y), _col(t)
    if y.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape != t.shape:
        raise ValueError("y and t lengths differ")
    return _regression(ad.constant(y), ad.constant(t), ad.constant(1.0 - t), y0_hat, y1_hat)


def classification_loss(t, t_hat: ad.Node) -> ad.Node:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1 - 1e-7]."""
    t = _col(t)
    if t.shape[0] == 0:
        raise ValueError("empty batch")
    return _bce(ad.constant(t), ad.constant(1.0 - t), ad.constant(np.ones_like(t)), t_hat)


def discrepancy_loss(upsilon: ad.Node, t, cfg: SinkhornConfig = SinkhornConfig()) -> ad.Node:
    """Entropic Wasserstein cost between control and treated embedding rows.

    The Sinkhorn cost is averaged over both transport directions so the
    value is exactly symmetric in the group labels. Raises if either group
    is empty; :func:`disc_or_zero` substitutes zero instead.
    """
    t = np.asarray(t).reshape(-1)
    if not (np.any(t == 0) and np.any(t == 1)):
        raise ValueError("discrepancy needs units from both treatment groups")
    sel0, sel1 = _selectors(t)
    return _disc(upsilon, ad.constant(sel0), ad.constant(sel1), cfg)


def disc_or_zero(upsilon: ad.Node, t, cfg: SinkhornConfig) -> ad.Node:
    t = np.asarray(t).reshape(-1)
    if np.all(t == t[0]):
        return ad.constant(0.0)
    return discrepancy_loss(upsilon, t, cfg)


def reconstruction_loss(x, x_recon: ad.Node) -> ad.Node:
    return ad.mean(ad.square(x_recon - ad.constant(x)))


def orthogonality_from_vectors(contrib: dict[str, ad.Node]) -> ad.Node:
    missing = set(FACTORS) - set(contrib)
    if missing:
        raise ValueError(f"missing contribution vectors: {sorted(missing)}")
    total = None
    for a, b in ORTHOGONAL_PAIRS:
        term = ad.dot(contrib[a], contrib[b])
        total = term if total is None else total + term
    return total


def orthogonality_loss(contrib) -> ad.Node:
    """Sum of the six pairwise dot products between contribution vectors.

    ``contrib`` is either a :class:`NetworkGraph` (differentiable through
    every encoder weight) or a mapping of factor name to vector.
    """
    if isinstance(contrib, NetworkGraph):
        vectors = {f: contrib.contribution(f) for f in FACTORS}
    else:
        lengths = {np.asarray(getattr(v, "value", v)).shape for v in contrib.values()}
        if len(lengths) != 1:
            raise ValueError(f"contribution vectors differ in length: {lengths}")
        vectors = {f: v if isinstance(v, ad.Node) else ad.constant(v) for f, v in contrib.items()}
    return orthogonality_from_vectors(vectors)


def parameter_regularization(graph: NetworkGraph) -> ad.Node:
    """Sum of squared weights (biases excluded) of the four heads."""
    total = None
    for name in REGULARIZED_HEADS:
        for w in graph.param_nodes[name][0::2]:
            term = ad.sum_(ad.square(w))
            total = term if total is None else total + term
    return total


PART_NAMES = ("L_reg", "L_class", "L_disc", "L_recons", "L_orth", "Reg")


def total_loss(parts: dict[str, ad.Node], weights: LossWeights) -> ad.Node:
    terms = [
        parts["L_reg"],
        ad.scale(parts["L_class"], weights.alpha),
        ad.scale(parts["L_disc"], weights.beta),
        ad.scale(parts["L_recons"], weights.gamma),
        ad.scale(parts["L_orth"], weights.lam),
        ad.scale(parts["Reg"], weights.mu),
    ]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def objective(graph: NetworkGraph, x, t, y, weights: LossWeights,
              sinkhorn: SinkhornConfig) -> tuple[ad.Node, dict[str, ad.Node]]:
    """Build every term on one batch; returns ``(total, parts)``."""
    outs = graph.outputs(ad.input_node(x, name="x"))
    parts = {
        "L_reg": regression_loss(y, t, outs["y0_hat"], outs["y1_hat"]),
        "L_class": classification_loss(t, outs["t_hat"]),
        "L_disc": disc_or_zero(outs["upsilon"], t, sinkhorn),
        "L_recons": reconstruction_loss(x, outs["x_recon"]),
        "L_orth": orthogonality_loss(graph),
        "Reg": parameter_regularization(graph),
    }
    return total_loss(parts, weights), parts


class BatchObjective:
    """The full objective as one reusable graph.

    Calling it with a new batch swaps the input values in place, so the
    graph structure (and its cached evaluation order) is built only once.
    Batches containing a single treatment group fall back to
    :func:`objective`, where the discrepancy term is a constant zero.
    """

    def __init__(self, graph: NetworkGraph, weights: LossWeights, sinkhorn: SinkhornConfig):
        self.graph, self.weights, self.sinkhorn = graph, weights, sinkhorn
        names = ("x", "t", "not_t", "y", "ones", "sel0", "sel1")
        self.inputs = {k: ad.input_node(np.zeros((1, 1)), name=k) for k in names}
        i = self.inputs
        outs = graph.outputs(i["x"])
        self.parts = {
            "L_reg": _regression(i["y"], i["t"], i["not_t"], outs["y0_hat"], outs["y1_hat"]),
            "L_class": _bce(i["t"], i["not_t"], i["ones"], outs["t_hat"]),
            "L_disc": _disc(outs["upsilon"], i["sel0"], i["sel1"], sinkhorn),
            "L_recons": ad.mean(ad.square(outs["x_recon"] - i["x"])),
            "L_orth": orthogonality_loss(graph),
            "Reg": parameter_regularization(graph),
        }
        self.total = total_loss(self.parts, weights)

    def __call__(self, x, t, y) -> tuple[ad.Node, dict[str, ad.Node]]:
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if np.all(t == t[0]):
            return objective(self.graph, x, t, y, self.weights, self.sinkhorn)
        sel0, sel1 = _selectors(t)
        values = {"x": np.asarray(x, dtype=np.float64), "t": t[:, None], "not_t": 1.0 - t[:, None],
                  "y": _col(y), "ones": np.ones((t.size, 1)), "sel0": sel0, "sel1": sel1}
        for k, v in values.items():
            self.inputs[k].value = v
        return self.total, self.parts
