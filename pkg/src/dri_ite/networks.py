"""Encoders, heads and decoder of the four-factor model, plus the
weight-contribution vectors used for identification and orthogonality."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

FACTORS = ("gamma", "delta", "upsilon", "omega")
HEADS = ("y0", "y1", "treat", "recon")
NETWORK_NAMES = FACTORS + HEADS

# which encoder outputs feed each head, in concatenation order
HEAD_SOURCES = {
    "y0": ("delta", "upsilon"),
    "y1": ("delta", "upsilon"),
    "treat": ("gamma", "delta"),
    "recon": FACTORS,
}

_ACTIVATIONS = ("elu", "identity", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    widths: tuple[int, ...]
    final_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.widths:
            raise ValueError("an MLP needs at least one layer")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"layer widths must be positive, got {self.widths}")
        if self.final_activation not in _ACTIVATIONS:
            raise ValueError(f"final_activation must be one of {_ACTIVATIONS}")

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        dims = (self.input_dim,) + self.widths
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


@dataclass
class Mlp:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def graph(self, x: ad.Node, nodes: list[ad.Node]) -> ad.Node:
        """Apply the MLP to ``x`` using parameter nodes ``[W0, b0, W1, b1, ...]``."""
        h = x
        last = len(self.weights) - 1
        for i in range(len(self.weights)):
            h = ad.affine(h, nodes[2 * i], nodes[2 * i + 1])
            act = "elu" if i < last else self.spec.final_activation
            if act == "elu":
                h = ad.elu(h)
            elif act == "sigmoid":
                h = ad.sigmoid(h)
        return h


def _init_mlp(spec: MlpSpec, rng: np.random.Generator) -> Mlp:
    dims = (spec.input_dim,) + spec.widths
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(spec, weights, biases)


@dataclass(frozen=True)
class Architecture:
    """Shape description for :func:`init_networks`.

    Each encoder has ``encoder_layers`` layers of ``latent_dim`` units (hidden
    and output). Heads and decoder use ``head_hidden`` units for every layer
    but the last.
    """

    n_features: int
    latent_dim: int = 15
    encoder_layers: int = 3
    head_hidden: int = 100
    head_layers: int = 3

    def specs(self) -> dict[str, MlpSpec]:
        k, d = self.n_features, self.latent_dim
        enc = (d,) * self.encoder_layers
        hidden = (self.head_hidden,) * (self.head_layers - 1)
        out = {name: MlpSpec(k, enc, "elu") for name in FACTORS}
        out["y0"] = MlpSpec(2 * d, hidden + (1,), "identity")
        out["y1"] = MlpSpec(2 * d, hidden + (1,), "identity")
        out["treat"] = MlpSpec(2 * d, hidden + (1,), "sigmoid")
        out["recon"] = MlpSpec(4 * d, hidden + (k,), "identity")
        return out


@dataclass
class FactorNetworks:
    nets: dict[str, Mlp] = field(default_factory=dict)

    def __post_init__(self):
        _validate(self.nets)

    def __getitem__(self, name: str) -> Mlp:
        return self.nets[name]

    @property
    def n_features(self) -> int:
        return self.nets["gamma"].spec.input_dim

    def parameters(self) -> list[np.ndarray]:
        return [p for name in NETWORK_NAMES for p in self.nets[name].parameters()]

    def copy(self) -> "FactorNetworks":
        return FactorNetworks({
            name: Mlp(m.spec, [w.copy() for w in m.weights], [b.copy() for b in m.biases])
            for name, m in self.nets.items()
        })

    def to_dict(self) -> dict:
        out = {}
        for name in NETWORK_NAMES:
            m = self.nets[name]
            out[name] = {
                "input_dim": m.spec.input_dim,
                "widths": list(m.spec.widths),
                "final_activation": m.spec.final_activation,
                "layers": {
                    str(i): {"weight": w.tolist(), "bias": b.tolist()}
                    for i, (w, b) in enumerate(zip(m.weights, m.biases))
                },
            }
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "FactorNetworks":
        nets = {}
        for name in NETWORK_NAMES:
            entry = doc[name]
            spec = MlpSpec(entry["input_dim"], tuple(entry["widths"]), entry["final_activation"])
            layers = [entry["layers"][str(i)] for i in range(len(spec.widths))]
            weights = [np.array(l["weight"], dtype=np.float64).reshape(-1, w)
                       for l, w in zip(layers, spec.widths)]
            biases = [np.array(l["bias"], dtype=np.float64) for l in layers]
            nets[name] = Mlp(spec, weights, biases)
        return cls(nets)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FactorNetworks":
        return cls.from_dict(json.loads(text))


def _validate(nets: dict[str, Mlp]):
    missing = set(NETWORK_NAMES) - set(nets)
    if missing:
        raise ValueError(f"missing networks: {sorted(missing)}")
    k = nets["gamma"].spec.input_dim
    for name in FACTORS:
        if nets[name].spec.input_dim != k:
            raise ValueError(f"encoder {name} reads {nets[name].spec.input_dim} features, expected {k}")
    for head, sources in HEAD_SOURCES.items():
        want = sum(nets[s].spec.output_dim for s in sources)
        if nets[head].spec.input_dim != want:
            raise ValueError(f"{head} input dim {nets[head].spec.input_dim} != {want} "
                             f"(sum of {'+'.join(sources)} outputs)")
    if nets["recon"].spec.output_dim != k:
        raise ValueError("decoder output dim must equal the number of covariates")
    for name, m in nets.items():
        dims = (m.spec.input_dim,) + m.spec.widths
        for i, (w, b) in enumerate(zip(m.weights, m.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ValueError(f"{name} layer {i}: parameter shapes {w.shape}, {b.shape} "
                                 f"do not match spec")


def init_networks(arch: Architecture | dict[str, MlpSpec], seed: int) -> FactorNetworks:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``."""
    specs = arch.specs() if isinstance(arch, Architecture) else arch
    rng = np.random.default_rng(seed)
    return FactorNetworks({name: _init_mlp(specs[name], rng) for name in NETWORK_NAMES})


class NetworkGraph:
    """Parameter nodes for one set of networks plus the graph built on a batch."""

    def __init__(self, nets: FactorNetworks):
        self.nets = nets
        self.param_nodes = {
            name: [ad.parameter(p, name=f"{name}.{i}") for i, p in enumerate(nets[name].parameters())]
            for name in NETWORK_NAMES
        }

    def all_params(self) -> list[ad.Node]:
        return [p for name in NETWORK_NAMES for p in self.param_nodes[name]]

    def outputs(self, x: ad.Node) -> dict[str, ad.Node]:
        out = {name: self.nets[name].graph(x, self.param_nodes[name]) for name in FACTORS}
        for head, sources in HEAD_SOURCES.items():
            inp = ad.concat([out[s] for s in sources], axis=1)
            out[head] = self.nets[head].graph(inp, self.param_nodes[head])
        return {
            "gamma": out["gamma"], "delta": out["delta"],
            "upsilon": out["upsilon"], "omega": out["omega"],
            "y0_hat": out["y0"], "y1_hat": out["y1"],
            "t_hat": out["treat"], "x_recon": out["recon"],
        }

    def contribution(self, factor: str) -> ad.Node:
        """Row-wise mean of |W_1 W_2 ... W_L| for one encoder, as a graph node."""
        nodes = self.param_nodes[factor]
        prod = nodes[0]
        for w in nodes[2::2]:
            prod = ad.matmul(prod, w)
        return ad.mean(ad.abs_(prod), axis=1)


def forward_all(nets: FactorNetworks, x: np.ndarray) -> dict[str, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != nets.n_features:
        raise ad.ShapeError(f"expected a batch with {nets.n_features} columns, got shape {x.shape}")
    g = NetworkGraph(nets)
    outs = g.outputs(ad.input_node(x, name="x"))
    # one combined root so every output is evaluated on a single shared graph
    root = ad.concat([outs[k] for k in outs], axis=1)
    ad.forward(root)
    return {k: v.value for k, v in outs.items()}


def weight_contribution(nets: FactorNetworks) -> dict[str, np.ndarray]:
    """Per-encoder vector of length K: mean over output units of |W_1 ... W_L|."""
    out = {}
    for name in FACTORS:
        ws = nets[name].weights
        prod = ws[0]
        for w in ws[1:]:
            prod = prod @ w
        out[name] = np.abs(prod).mean(axis=1)
    return out
