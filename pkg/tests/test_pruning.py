import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from connectprune import network as nw
from connectprune.autodiff import Tape
from connectprune.connectivity import CollapseWarning, Mode, node_connectivity, normalize, theta_gradient
from connectprune.harness.properties import random_network
from connectprune.network import LayeredNetwork, PruneMask
from connectprune.pruning import (
    PruneError,
    PruneSpec,
    build_mask,
    group_by_node,
    objective_saliency,
    score,
    score_channels,
    score_loss_aware,
    score_magnitude,
    score_synflow,
)


def _linear(sizes, weights, scaling=None, biases=None):
    return LayeredNetwork(sizes, [np.array(w, float) for w in weights],
                          biases or [np.zeros(s) for s in sizes[1:]],
                          ["relu"] * (len(sizes) - 2) + ["sigmoid"], scaling or {})


def test_magnitude_examples():
    table = score_magnitude(_linear((3, 1), [[[0.5, -0.1, 0.3]]]))
    assert table.scores.tolist() == [0.5, 0.1, 0.3]
    assert table.keys == [(0, 0, 0), (0, 0, 1), (0, 0, 2)]

    ties = score_magnitude(_linear((2, 2), [np.full((2, 2), -0.7)]))
    assert set(ties.scores.tolist()) == {0.7}


def test_masked_entries_absent():
    net = random_network(np.random.default_rng(0), (3, 4, 2))
    mask = PruneMask.ones_like(net)
    mask.weights[0][1, 2] = False
    table = score_magnitude(nw.apply_mask(net, mask))
    assert (0, 1, 2) not in table.keys
    assert len(table) == 12 + 8 - 1


def test_synflow_examples():
    chain = score_synflow(_linear((1, 1, 1), [[[0.3]], [[2.0]]]))
    assert chain.scores.tolist() == [1.0, 1.0]
    uniform = score_synflow(_linear((2, 2, 2), [np.ones((2, 2)), np.ones((2, 2))]))
    first = uniform.layer_scores(0)
    np.testing.assert_allclose(first, 1 / 8, atol=1e-15)
    assert first.sum() == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(1, 6), min_size=2, max_size=5))
def test_synflow_identity_and_conservation(seed, sizes):
    net = random_network(np.random.default_rng(seed), sizes)
    table = score_synflow(net)
    view = normalize(net)
    phi = node_connectivity(view).phi_total
    grads = theta_gradient(view)
    for k, (e, g) in enumerate(zip(view.edges, grads)):
        np.testing.assert_allclose(table.layer_scores(k), (g * e.theta).ravel(), rtol=0, atol=1e-8)
        assert abs(table.layer_scores(k).sum() - phi) < 1e-8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_synflow_scale_invariance(seed, c):
    net = random_network(np.random.default_rng(seed), (4, 5, 3, 1))
    other = net.copy()
    other.weights[1] *= c
    np.testing.assert_allclose(score_synflow(net).scores, score_synflow(other).scores, rtol=0, atol=1e-12)


def test_synflow_on_collapsed_net_warns():
    net = _linear((2, 2, 1), [np.ones((2, 2)), np.zeros((1, 2))])
    with pytest.warns(CollapseWarning):
        table = score_synflow(net)
    assert (table.scores == 0).all()


def test_channel_examples():
    sym = _linear((2, 2, 1), [np.ones((2, 2)), np.ones((1, 2))], scaling={0: np.ones(2)})
    t = score_channels(sym)
    assert t.scores[0] == t.scores[1]
    assert t.scores.sum() == pytest.approx(node_connectivity(normalize(sym)).phi_total, abs=1e-15)

    half = _linear((2, 2, 1), [np.ones((2, 2)), np.ones((1, 2))], scaling={0: np.array([1.0, 0.0])})
    assert score_channels(half).scores[1] == 0.0

    with pytest.raises(PruneError):
        score_channels(_linear((2, 1), [np.ones((1, 2))]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(1, 6), min_size=3, max_size=5))
def test_channel_conservation(seed, sizes):
    net = random_network(np.random.default_rng(seed), sizes, scaling=True)
    table = score_channels(net)
    phi = node_connectivity(normalize(net)).phi_total
    for layer in net.scaling:
        assert abs(table.layer_scores(layer).sum() - phi) < 1e-8


def test_objective_saliency_square():
    tape = Tape()
    w = tape.leaf("w", 2.0)
    tape.set_exit(tape.mul(w, w))
    assert objective_saliency(tape)["w"][0, 0] == 8.0


def test_loss_aware_lambda_changes_ranking():
    # x1 decides the label, x2 is identically zero: with lam = 0 only w1 has
    # loss saliency; a large lam ranks by the connectivity term, i.e. by |w|.
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.normal(size=64), np.zeros(64)])
    y = (x[:, 0] > 0).astype(float)
    net = _linear((2, 1), [[[0.5, 1.0]]])

    plain = score_loss_aware(net, x, y, lam=0.0)
    p = 1 / (1 + np.exp(-(x @ net.weights[0].T).ravel()))
    expect = np.abs(((p - y)[:, None] * x).mean(axis=0) * net.weights[0].ravel())
    np.testing.assert_allclose(plain.scores, expect, rtol=1e-12, atol=1e-15)
    assert np.argsort(plain.scores).tolist() == [1, 0]

    heavy = score_loss_aware(net, x, y, lam=1e3)
    assert np.argsort(heavy.scores).tolist() == [0, 1]


def test_loss_aware_node_groups_sum_members():
    rng = np.random.default_rng(2)
    net = random_network(rng, (4, 3, 3, 1))
    x, y = rng.normal(size=(16, 4)), (rng.random(16) > 0.5).astype(float)
    weights = score_loss_aware(net, x, y, lam=0.1)
    nodes = score_loss_aware(net, x, y, lam=0.1, granularity="node")
    per_layer = [np.zeros(w.shape) for w in net.weights]
    for (k, r, c), v in weights.as_dict().items():
        per_layer[k][r, c] = v
    for (layer, j), s in nodes.as_dict().items():
        assert s == per_layer[layer - 1][j, :].sum() + per_layer[layer][:, j].sum()
    grouped = group_by_node(net, weights)
    assert np.array_equal(grouped.scores, nodes.scores)


def test_loss_aware_modes_and_samples():
    rng = np.random.default_rng(4)
    net = random_network(rng, (4, 3, 1))
    x, y = rng.normal(size=(8, 4)), (rng.random(8) > 0.5).astype(float)
    a = score_loss_aware(net, x, y, lam=1.0, mode=Mode.SIGNAL_FLOW)
    b = score_loss_aware(net, x, y, lam=1.0, mode=Mode.NORMALIZED)
    assert not np.allclose(a.scores, b.scores)
    c = score_loss_aware(net, x, y, lam=1.0, conn_samples=4, seed=1)
    d = score_loss_aware(net, x, y, lam=1.0, conn_samples=4, seed=1)
    assert np.array_equal(c.scores, d.scores)
    with pytest.raises(ValueError):
        score_loss_aware(net, x[:0], y[:0], lam=1.0)


def test_build_mask_examples():
    table = score_magnitude(_linear((3, 1), [[[0.5, -0.1, 0.3]]]))
    mask = build_mask(table, PruneSpec(1 / 3))
    assert mask.weights[0].tolist() == [[True, False, True]]
    assert build_mask(table, PruneSpec(0.0)).kept() == 3


def test_ties_drop_lower_key_first():
    table = score_magnitude(_linear((2, 2), [np.ones((2, 2))]))
    mask = build_mask(table, PruneSpec(0.5))
    assert mask.weights[0].tolist() == [[False, False], [True, True]]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 0.95), st.sampled_from(["local", "global"]))
def test_exact_counts_and_determinism(seed, fraction, scope):
    net = random_network(np.random.default_rng(seed), (6, 5, 5, 5, 1))
    table = score_magnitude(net)
    a = build_mask(table, PruneSpec(fraction, scope))
    b = build_mask(table, PruneSpec(fraction, scope))
    assert a == b
    if scope == "global":
        assert a.kept() == len(table) - int(np.floor(fraction * len(table) + 1e-9))
    else:
        for m in a.weights:
            assert m.sum() == m.size - int(np.floor(fraction * m.size + 1e-9))


def test_local_keeps_at_least_one_entry():
    net = nw.init_random((6, 5, 5, 5, 1), 0)
    mask = build_mask(score_magnitude(net), PruneSpec(0.99))
    assert [int(m.sum()) for m in mask.weights] == [1, 1, 1, 1]


def test_local_refuses_an_already_empty_layer():
    net = nw.init_random((6, 5, 5, 5, 1), 0)
    mask = PruneMask.ones_like(net)
    mask.weights[3][:] = False
    with pytest.raises(PruneError, match="layer 3"):
        build_mask(score_magnitude(nw.apply_mask(net, mask)), PruneSpec(0.5))


def test_prune_spec_validation():
    with pytest.raises(ValueError):
        PruneSpec(1.0)
    with pytest.raises(ValueError):
        PruneSpec(0.5, "sideways")


def test_rounds_compose():
    net = random_network(np.random.default_rng(1), (4, 4, 2))
    first = nw.apply_mask(net, build_mask(score_magnitude(net), PruneSpec(0.5)))
    table = score_magnitude(first)
    assert len(table) == first.mask.kept()
    second = nw.apply_mask(first, build_mask(table, PruneSpec(0.5)))
    assert second.mask.kept() == 4 + 2


def test_score_dispatch():
    net = random_network(np.random.default_rng(1), (3, 2, 1), scaling=True)
    x, y = np.ones((2, 3)), np.array([0.0, 1.0])
    for method in ("magnitude", "synflow", "channel", "loss-aware"):
        assert len(score(net, method, x=x, y=y, lam=0.1)) > 0
    with pytest.raises(ValueError):
        score(net, "random")
