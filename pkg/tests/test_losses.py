import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dri_ite import autodiff as ad
from dri_ite.losses import (PART_NAMES, BatchObjective, LossWeights, SinkhornConfig,
                            classification_loss, disc_or_zero, discrepancy_loss, objective,
                            orthogonality_loss, parameter_regularization, reconstruction_loss,
                            regression_loss, total_loss)
from dri_ite.networks import FACTORS, Architecture, NetworkGraph, init_networks


def val(node):
    return float(ad.forward(node))


def col(values):
    return ad.constant(np.asarray(values, dtype=np.float64).reshape(-1, 1))


def exact_ot(a, b):
    """Brute-force optimal transport between equal-size uniform point sets."""
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    n = len(a)
    return min(cost[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))


RAW = dict(standardize=False)


# ------------------------------------------------------------ regression


def test_regression_perfect_fit_is_zero():
    y, t = [1.0, 2.0, 3.0], [1, 0, 1]
    assert val(regression_loss(y, t, col([9, 2, 9]), col([1, 9, 3]))) == 0.0


def test_regression_ignores_counterfactual_head():
    assert val(regression_loss([1, 0], [1, 0], col([9, 1]), col([0, 9]))) == 1.0


@given(c=st.floats(-50, 50, allow_nan=False))
def test_regression_constant_offset(c):
    y, t = np.array([0.5, -1.0, 2.0]), np.array([0, 1, 1])
    got = val(regression_loss(y, t, col(y + c), col(y + c)))
    assert got == pytest.approx(c * c, rel=1e-12, abs=1e-12)


def test_regression_rejects_empty_batch():
    with pytest.raises(ValueError, match="empty"):
        regression_loss([], [], col([]), col([]))


# -------------------------------------------------------- classification


def test_bce_at_half_is_ln2():
    assert val(classification_loss([0, 1, 1], col([0.5] * 3))) == pytest.approx(math.log(2))


def test_bce_at_truth_hits_clamp():
    got = val(classification_loss([0, 1], col([0.0, 1.0])))
    assert got == pytest.approx(-math.log(1 - 1e-7), rel=1e-9)
    assert got == pytest.approx(1e-7, rel=1e-6)


def test_bce_one_over_e_is_one():
    assert val(classification_loss([1], col([math.exp(-1)]))) == pytest.approx(1.0)


def test_bce_rejects_empty_batch():
    with pytest.raises(ValueError):
        classification_loss([], col([]))


# ----------------------------------------------------------- discrepancy


def test_disc_identical_groups_is_zero():
    pts = np.random.default_rng(0).normal(size=(3, 2))
    ups = ad.constant(np.vstack([pts, pts]))
    t = [0, 0, 0, 1, 1, 1]
    assert val(discrepancy_loss(ups, t, SinkhornConfig(0.01, 50, **RAW))) < 1e-6


def test_disc_single_pair_is_ground_cost():
    a, b = np.array([0.3, -1.0]), np.array([1.5, 0.4])
    c = float(((a - b) ** 2).sum())
    cfg = SinkhornConfig(0.01 * c, 10, **RAW)
    got = val(discrepancy_loss(ad.constant(np.vstack([a, b])), [0, 1], cfg))
    assert got == pytest.approx(c, rel=0.02)


@pytest.mark.parametrize("seed", range(5))
def test_disc_two_points_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)) + 1.0
    cost = ((a[:, None] - b[None]) ** 2).sum(-1)
    cfg = SinkhornConfig(0.01 * cost.mean(), 100, **RAW)
    got = val(discrepancy_loss(ad.constant(np.vstack([a, b])), [0, 0, 1, 1], cfg))
    assert got == pytest.approx(exact_ot(a, b), rel=0.05)


def test_disc_needs_both_groups_and_zero_fallback():
    ups = ad.constant(np.ones((3, 2)))
    with pytest.raises(ValueError, match="both"):
        discrepancy_loss(ups, [1, 1, 1])
    assert val(disc_or_zero(ups, [1, 1, 1], SinkhornConfig())) == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n0=st.integers(1, 6), n1=st.integers(1, 6),
       standardize=st.booleans())
def test_disc_symmetric_in_labels_and_nonnegative(seed, n0, n1, standardize):
    rng = np.random.default_rng(seed)
    ups = rng.normal(size=(n0 + n1, 3))
    t = np.r_[np.zeros(n0), np.ones(n1)]
    rng.shuffle(t)
    cfg = SinkhornConfig(1.0, 10, standardize)
    a = val(discrepancy_loss(ad.constant(ups), t, cfg))
    b = val(discrepancy_loss(ad.constant(ups), 1 - t, cfg))
    assert a == pytest.approx(b, abs=1e-9)
    assert a >= 0


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_disc_decreases_as_groups_approach(seed):
    rng = np.random.default_rng(seed)
    g0 = rng.normal(size=(4, 2))
    g1 = rng.normal(size=(5, 2)) + rng.normal(size=2) * 3.0
    gap = g1.mean(0) - g0.mean(0)
    t = np.r_[np.zeros(4), np.ones(5)]
    cfg = SinkhornConfig(1.0, 10, **RAW)
    # translate group 1 along the line joining the means until they coincide
    values = [val(discrepancy_loss(ad.constant(np.vstack([g0, g1 - s * gap])), t, cfg))
              for s in np.linspace(0.0, 1.0, 9)]
    assert all(b <= a + 1e-6 for a, b in zip(values, values[1:]))


# --------------------------------------------------------- reconstruction


def test_reconstruction_examples():
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert val(reconstruction_loss(x, ad.constant(x))) == 0.0
    assert val(reconstruction_loss(x, ad.constant(x + 1))) == pytest.approx(1.0)
    assert val(reconstruction_loss(np.zeros((2, 2)), ad.constant(np.zeros((2, 2))))) == 0.0


# ----------------------------------------------------------- orthogonality


def test_orth_disjoint_supports_is_zero():
    e = np.eye(4)
    assert val(orthogonality_loss(dict(zip(FACTORS, e)))) == 0.0


def test_orth_all_ones_is_twelve():
    assert val(orthogonality_loss({f: np.ones(2) for f in FACTORS})) == 12.0


def test_orth_single_overlap_counts_once():
    vecs = dict(zip(FACTORS, np.eye(4)))
    vecs["omega"] = np.array([1.0, 0.0, 0.0, 1.0])
    assert val(orthogonality_loss(vecs)) == 1.0


def test_orth_length_mismatch():
    vecs = {f: np.ones(3) for f in FACTORS}
    vecs["delta"] = np.ones(4)
    with pytest.raises(ValueError, match="length"):
        orthogonality_loss(vecs)


@settings(max_examples=40, deadline=None)
@given(masks=st.lists(st.lists(st.booleans(), min_size=5, max_size=5), min_size=4, max_size=4),
       seed=st.integers(0, 999))
def test_orth_zero_iff_supports_disjoint(masks, seed):
    rng = np.random.default_rng(seed)
    vecs = {f: np.where(m, rng.uniform(0.1, 2.0, 5), 0.0) for f, m in zip(FACTORS, masks)}
    m = {f: np.array(mask) for f, mask in zip(FACTORS, masks)}
    pairs = [("gamma", "delta"), ("delta", "upsilon"), ("upsilon", "gamma"),
             ("omega", "gamma"), ("omega", "delta"), ("omega", "upsilon")]
    disjoint = all(not (m[a] & m[b]).any() for a, b in pairs)
    got = val(orthogonality_loss(vecs))
    assert got >= 0
    assert (got == 0) == disjoint


# ----------------------------------------------------------- regularization


def _graph(seed=0, k=6, d=3):
    return NetworkGraph(init_networks(Architecture(k, latent_dim=d, head_hidden=4), seed))


def test_reg_counts_only_head_weights():
    g = _graph()
    for p in g.nets.parameters():
        p[...] = 0.0
    assert val(parameter_regularization(g)) == 0.0
    g.nets["treat"].weights[1][0, 0] = 2.0
    g.nets["gamma"].weights[0][...] = 5.0
    g.nets["y0"].biases[0][...] = 7.0
    assert val(parameter_regularization(g)) == 4.0


# ------------------------------------------------------------------ total


def test_total_loss_weighting():
    parts = {k: ad.constant(1.0) for k in PART_NAMES}
    assert val(total_loss(parts, LossWeights(1, 1, 1, 1, 1))) == 6.0
    parts = {k: ad.constant(float(i + 2)) for i, k in enumerate(PART_NAMES)}
    assert val(total_loss(parts, LossWeights(0, 0, 0, 0, 0))) == 2.0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)
    with pytest.raises(ValueError):
        LossWeights(mu=math.inf)
    with pytest.raises(ValueError):
        SinkhornConfig(epsilon=0)


def _batch(seed, n=4, k=6):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, k))
    t = np.r_[0, 1, rng.integers(0, 2, n - 2)].astype(float)
    y = rng.normal(size=n)
    return x, t, y


@pytest.mark.parametrize("standardize", [True, False])
def test_all_terms_nonnegative_and_batch_objective_agrees(standardize):
    g = _graph(1)
    x, t, y = _batch(1, n=8)
    cfg = SinkhornConfig(1.0, 10, standardize)
    total, parts = objective(g, x, t, y, LossWeights(), cfg)
    ref = val(total)
    for p in parts.values():
        assert val(p) >= 0
    reuse = BatchObjective(g, LossWeights(), cfg)
    for _ in range(2):
        node, _ = reuse(x, t, y)
        assert val(node) == pytest.approx(ref, rel=1e-12)


def test_batch_objective_single_group_has_no_disc():
    g = _graph(2)
    x, _, y = _batch(2)
    node, parts = BatchObjective(g, LossWeights(), SinkhornConfig())(x, np.ones(4), y)
    ad.forward(node)
    assert float(parts["L_disc"].value) == 0.0


def test_ablation_base_equals_objective_without_recon_and_orth():
    g = _graph(3)
    x, t, y = _batch(3)
    w = LossWeights(alpha=0.7, beta=1.3, gamma=0.0, lam=0.0, mu=1e-3)
    total, parts = objective(g, x, t, y, w, SinkhornConfig())
    v = {k: val(p) for k, p in parts.items()}
    expect = v["L_reg"] + 0.7 * v["L_class"] + 1.3 * v["L_disc"] + 1e-3 * v["Reg"]
    assert val(total) == pytest.approx(expect, rel=1e-12)


# --------------------------------------------------------- gradient checks


def _check(build_from_graph, seed=0):
    g = _graph(seed, k=6, d=3)
    arrays = [p.value for p in g.all_params()]

    def builder(nodes):
        g.param_nodes = _regroup(g, nodes)
        return build_from_graph(g)

    res = ad.grad_check(builder, arrays)
    return res


def _regroup(g, nodes):
    out, i = {}, 0
    for name, ps in g.param_nodes.items():
        out[name] = nodes[i:i + len(ps)]
        i += len(ps)
    return out


TERMS = {
    "L_reg": lambda g, x, t, y: regression_loss(y, t, *_heads(g, x)),
    "L_class": lambda g, x, t, y: classification_loss(t, g.outputs(ad.constant(x))["t_hat"]),
    "L_disc": lambda g, x, t, y: discrepancy_loss(g.outputs(ad.constant(x))["upsilon"], t),
    "L_recons": lambda g, x, t, y: reconstruction_loss(x, g.outputs(ad.constant(x))["x_recon"]),
    "L_orth": lambda g, x, t, y: orthogonality_loss(g),
    "Reg": lambda g, x, t, y: parameter_regularization(g),
    "total": lambda g, x, t, y: objective(g, x, t, y, LossWeights(1, 1, 1, 1, 1e-2),
                                          SinkhornConfig())[0],
}


def _heads(g, x):
    out = g.outputs(ad.constant(x))
    return out["y0_hat"], out["y1_hat"]


@pytest.mark.parametrize("term", sorted(TERMS))
@pytest.mark.parametrize("seed", [0, 1])
def test_loss_gradients_match_finite_differences(term, seed):
    x, t, y = _batch(seed)
    res = _check(lambda g: TERMS[term](g, x, t, y), seed)
    assert res.ok
    assert res.max_rel_error < 1e-4
