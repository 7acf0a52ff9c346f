import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from connectprune import network as nw
from connectprune.connectivity import total_connectivity
from connectprune.harness.properties import random_network
from connectprune.network import FormatError, LayeredNetwork, PruneMask


def _net(sizes, weights, biases=None, activations=None, scaling=None):
    biases = biases or [np.zeros(s) for s in sizes[1:]]
    activations = activations or ["relu"] * (len(sizes) - 2) + ["sigmoid"]
    return LayeredNetwork(sizes, [np.array(w, float) for w in weights],
                          [np.array(b, float) for b in biases], activations, scaling or {})


def test_identity_net():
    net = _net((1, 1), [[[1.0]]], activations=["linear"])
    assert nw.predict(net, [[0.7]])[0, 0] == 0.7


def test_sigmoid_at_zero():
    net = _net((2, 1), [[[1.0, 1.0]]])
    assert nw.predict(net, [[0.0, 0.0]])[0, 0] == 0.5


def test_zero_scaling_blocks_signal():
    net = _net((2, 2, 1), [[[1.0, -2.0], [0.5, 3.0]], [[1.0, 1.0]]],
               biases=[np.zeros(2), np.array([0.3])], scaling={0: np.zeros(2)})
    out = nw.predict(net, np.random.default_rng(0).normal(size=(5, 2)))
    np.testing.assert_allclose(out, 1.0 / (1.0 + np.exp(-0.3)), rtol=0, atol=1e-15)


def test_width_mismatch_names_widths():
    net = nw.init_random((3, 2, 1), 0)
    with pytest.raises(ValueError, match="expected 3 features, got 2"):
        nw.predict(net, np.zeros((4, 2)))


def test_invalid_construction():
    with pytest.raises(ValueError):
        _net((2, 1), [[[1.0, 1.0, 1.0]]])
    with pytest.raises(ValueError):
        nw.init_random((3,), 0)
    with pytest.raises(ValueError, match="non-finite"):
        _net((1, 1), [[[np.nan]]])


def test_init_determinism_and_scheme():
    a, b = nw.init_random((6, 5, 5, 5, 1), 4), nw.init_random((6, 5, 5, 5, 1), 4)
    assert a == b
    c = nw.init_random((6, 5, 5, 5, 1), 5)
    assert not np.array_equal(a.weights[0], c.weights[0])
    for w in a.weights:
        fan_out, fan_in = w.shape
        assert np.abs(w).max() <= np.sqrt(6.0 / (fan_in + fan_out))
    assert all((b == 0).all() for b in a.biases)


def test_all_ones_scaling_invisible_for_predict():
    plain = nw.init_random((4, 3, 3, 1), 2)
    scaled = nw.init_random((4, 3, 3, 1), 2, scaling="hidden")
    assert all((d == 1).all() for d in scaled.scaling.values())
    x = np.random.default_rng(1).normal(size=(20, 4))
    np.testing.assert_allclose(nw.predict(scaled, x), nw.predict(plain, x), rtol=0, atol=1e-12)


def test_all_ones_scaling_divides_connectivity_by_width():
    # An all-ones scaling vector is itself normalized (to 1/n per entry), so it
    # is not invisible to total connectivity; it rescales it by 1/width.
    plain = nw.init_random((4, 3, 3, 1), 2)
    scaled = nw.init_random((4, 3, 3, 1), 2, scaling=[1])
    assert total_connectivity(scaled) == pytest.approx(total_connectivity(plain) / 3, abs=1e-12)


def test_mask_identity_and_idempotence():
    net = random_network(np.random.default_rng(0), (4, 3, 2))
    assert nw.apply_mask(net, PruneMask.ones_like(net)).weights[0].tolist() == net.weights[0].tolist()
    rng = np.random.default_rng(1)
    mask = PruneMask([rng.random(w.shape) > 0.5 for w in net.weights])
    once = nw.apply_mask(net, mask)
    assert nw.apply_mask(once, mask) == once


def test_mask_all_zero_collapses():
    net = random_network(np.random.default_rng(0), (4, 3, 2))
    empty = PruneMask([np.zeros(w.shape, bool) for w in net.weights])
    assert total_connectivity(nw.apply_mask(net, empty)) == 0.0


def test_single_path_mask_gives_unit_connectivity():
    net = random_network(np.random.default_rng(5), (3, 4, 4, 2))
    keep = [np.zeros(w.shape, bool) for w in net.weights]
    keep[0][1, 2] = keep[1][3, 1] = keep[2][0, 3] = True
    assert total_connectivity(nw.apply_mask(net, PruneMask(keep))) == pytest.approx(1.0, abs=1e-15)


def test_apply_mask_shape_mismatch():
    net = nw.init_random((3, 2, 1), 0)
    with pytest.raises(ValueError):
        nw.apply_mask(net, PruneMask([np.ones((3, 3), bool), np.ones((1, 2), bool)]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(1, 6), min_size=2, max_size=5), st.booleans(), st.booleans())
def test_round_trip(seed, sizes, scaled, masked):
    rng = np.random.default_rng(seed)
    net = random_network(rng, sizes, scaling=scaled and len(sizes) > 2)
    if masked:
        net = nw.apply_mask(net, PruneMask([rng.random(w.shape) > 0.3 for w in net.weights]))
    payload = nw.serialize(net)
    back = nw.deserialize(payload)
    assert back == net
    assert nw.serialize(back) == payload


def test_truncated_payload_reports_offset():
    payload = nw.serialize(nw.init_random((3, 2, 1), 0))
    with pytest.raises(FormatError) as exc:
        nw.deserialize(payload[:-5])
    assert exc.value.offset == len(payload) - 5
    with pytest.raises(FormatError, match="trailing"):
        nw.deserialize(payload + b"\0" * 8)
    with pytest.raises(FormatError, match="magic"):
        nw.deserialize(b"XXXX" + payload[4:])


def test_save_load(tmp_path):
    net = nw.init_random((6, 5, 1), 9, scaling="hidden")
    nw.save(net, tmp_path / "m.bin")
    assert nw.load(tmp_path / "m.bin") == net
