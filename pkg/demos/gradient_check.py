"""Check the autodiff engine against finite differences on the full objective.

Builds a tiny model, wires every weight in as a graph parameter, and compares
the analytic gradient of each loss term with a five-point central difference.

    python demos/gradient_check.py
"""

import numpy as np

from dri_ite import autodiff as ad
from dri_ite.losses import (LossWeights, SinkhornConfig, classification_loss, discrepancy_loss,
                            objective, orthogonality_loss, parameter_regularization,
                            reconstruction_loss, regression_loss)
from dri_ite.networks import Architecture, NetworkGraph, init_networks


def main():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 6))
    t = np.array([0, 1] * 4, dtype=float)
    y = rng.normal(size=8)
    graph = NetworkGraph(init_networks(Architecture(6, latent_dim=3, head_hidden=5), seed=0))
    arrays = [p.value for p in graph.all_params()]
    sizes = [len(ps) for ps in graph.param_nodes.values()]

    def rewire(nodes):
        # hand the probe's parameter nodes to the graph, network by network
        out, i = {}, 0
        for name, k in zip(graph.param_nodes, sizes):
            out[name], i = nodes[i:i + k], i + k
        graph.param_nodes = out
        return graph.outputs(ad.constant(x))

    terms = {
        "regression": lambda o: regression_loss(y, t, o["y0_hat"], o["y1_hat"]),
        "classification": lambda o: classification_loss(t, o["t_hat"]),
        "discrepancy": lambda o: discrepancy_loss(o["upsilon"], t, SinkhornConfig()),
        "reconstruction": lambda o: reconstruction_loss(x, o["x_recon"]),
        "orthogonality": lambda o: orthogonality_loss(graph),
        "regularization": lambda o: parameter_regularization(graph),
        "objective": lambda o: objective(graph, x, t, y, LossWeights(1, 1, 1, 1, 0.01),
                                         SinkhornConfig())[0],
    }
    print(f"{sum(a.size for a in arrays)} scalar parameters")
    for name, term in terms.items():
        res = ad.grad_check(lambda nodes: term(rewire(nodes)), arrays)
        print(f"{name:>15}: max relative error {res.max_rel_error:.2e}")


if __name__ == "__main__":
    main()
