import numpy as np
import pytest

from inferkit.errors import ConfigurationError, PlanningError
from inferkit.partition import CostModel, estimate, parse_grid, plan, simulate_forward, split_ranges
from conftest import make_model

HYBRID_2X2_TABLE = """\
Device    Assignments
Device-0  Layers: [1, 20], Heads: [1, 16]
Device-1  Layers: [1, 20], Heads: [17, 32]
Device-2  Layers: [21, 40], Heads: [1, 16]
Device-3  Layers: [21, 40], Heads: [17, 32]
"""


def test_hybrid_table():
    p = plan("hybrid", 40, 32, 4, (2, 2))
    assert p.to_text() == HYBRID_2X2_TABLE
    assert [(a.layers, a.heads) for a in p.assignments] == [
        ((1, 20), (1, 16)), ((1, 20), (17, 32)), ((21, 40), (1, 16)), ((21, 40), (17, 32))]


def test_layer_wise_split():
    p = plan("layer_wise", 40, 32, 4)
    assert [a.layers for a in p.assignments] == [(1, 10), (11, 20), (21, 30), (31, 40)]
    assert all(a.heads == (1, 32) for a in p.assignments)


def test_tensor_wise_split():
    p = plan("tensor_wise", 40, 32, 4)
    assert [a.heads for a in p.assignments] == [(1, 8), (9, 16), (17, 24), (25, 32)]
    assert all(a.layers == (1, 40) for a in p.assignments)


def test_remainder_goes_to_early_stages():
    assert split_ranges(10, 3) == [(1, 4), (5, 7), (8, 10)]


@pytest.mark.parametrize("strategy,layers,heads,devices,grid", [
    ("layer_wise", 7, 8, 3, None), ("tensor_wise", 5, 12, 4, None), ("hybrid", 9, 16, 6, (3, 2)), ("hybrid", 4, 8, 8, (2, 4)),
])
def test_plan_completeness(strategy, layers, heads, devices, grid):
    p = plan(strategy, layers, heads, devices, grid)
    assert p.pipeline_stages * p.tensor_groups == p.devices == devices
    cells = [(l, h) for a in p.assignments for l in range(a.layers[0], a.layers[1] + 1)
             for h in range(a.heads[0], a.heads[1] + 1)]
    assert sorted(cells) == [(l, h) for l in range(1, layers + 1) for h in range(1, heads + 1)]


@pytest.mark.parametrize("args", [
    ("tensor_wise", 4, 6, 4, None), ("hybrid", 4, 8, 4, (2, 3)), ("hybrid", 4, 8, 4, None),
    ("layer_wise", 2, 8, 4, None), ("diagonal", 4, 8, 2, None), ("layer_wise", 4, 8, 2, (1, 2)),
])
def test_plan_errors(args):
    with pytest.raises(PlanningError):
        plan(*args)


def test_parse_grid():
    assert parse_grid("2x2") == (2, 2)
    assert parse_grid("3X1") == (3, 1)
    with pytest.raises(PlanningError):
        parse_grid("2by2")


@pytest.fixture(scope="module")
def model4():
    return make_model(seed=21, layers=4, decoder_heads=8, decoder_kv_heads=8, hidden_dim=32, ffn_dim=64)


TOKENS = [3, 14, 15, 9, 2, 6, 5]


def test_single_device_bit_identical(model4):
    full = model4.forward_full(TOKENS)
    for strategy in ("layer_wise", "tensor_wise"):
        assert np.array_equal(simulate_forward(plan(strategy, 4, 8, 1), model4, TOKENS), full)


def test_layer_wise_bit_identical(model4):
    assert np.array_equal(simulate_forward(plan("layer_wise", 4, 8, 4), model4, TOKENS), model4.forward_full(TOKENS))


@pytest.mark.parametrize("strategy,devices,grid", [("tensor_wise", 2, None), ("tensor_wise", 4, None), ("hybrid", 4, (2, 2))])
def test_sharded_close_to_single_device(model4, strategy, devices, grid):
    got = simulate_forward(plan(strategy, 4, 8, devices, grid), model4, TOKENS)
    ref = model4.forward_full(TOKENS)
    # Row-split reductions reassociate float32 sums; agreement is to a few ulps of the logits.
    assert np.max(np.abs(got - ref)) <= 8 * np.finfo(np.float32).eps * np.abs(ref).max()


def test_sharded_with_grouped_kv():
    model = make_model(seed=3, layers=2, decoder_heads=8, decoder_kv_heads=2)
    got = simulate_forward(plan("tensor_wise", 2, 8, 2), model, TOKENS)
    np.testing.assert_allclose(got, model.forward_full(TOKENS), atol=1e-5)


def test_simulate_rejects_mismatch(model4):
    with pytest.raises(PlanningError):
        simulate_forward(plan("layer_wise", 8, 8, 2), model4, TOKENS)
    enc = make_model(network_type="encoder_only", normalization_function="std", position_embedding="empty")
    with pytest.raises(ConfigurationError):
        simulate_forward(plan("layer_wise", 2, 8, 1), enc, TOKENS)


# -- cost model -----------------------------------------------------------------------------


def estimates(cost=CostModel()):
    return {
        "layer_wise": estimate(plan("layer_wise", 40, 32, 4), cost),
        "tensor_wise": estimate(plan("tensor_wise", 40, 32, 4), cost),
        "hybrid": estimate(plan("hybrid", 40, 32, 4, (2, 2)), cost),
    }


def test_default_cost_ordering():
    e = estimates()
    assert e["layer_wise"].throughput > e["hybrid"].throughput > e["tensor_wise"].throughput
    assert e["tensor_wise"].decode_speed == e["hybrid"].decode_speed > e["layer_wise"].decode_speed


def test_default_cost_values():
    e = estimates()
    assert (e["layer_wise"].throughput, e["layer_wise"].decode_speed) == (32, 8)
    assert (e["tensor_wise"].throughput, e["tensor_wise"].decode_speed) == (12, 12)
    assert (e["hybrid"].throughput, e["hybrid"].decode_speed) == (24, 12)


def test_single_device_throughput_equals_decode():
    e = estimate(plan("layer_wise", 10, 8, 1))
    assert e.throughput == e.decode_speed


@pytest.mark.parametrize("per_device", [0.5, 1.5, 3.0, 6.0])
def test_merge_cost_monotonic(per_device):
    base = estimates(CostModel(merge_per_device=per_device))
    more = estimates(CostModel(merge_per_device=per_device + 1.0))
    assert more["tensor_wise"].decode_speed < base["tensor_wise"].decode_speed
    assert more["layer_wise"].decode_speed == base["layer_wise"].decode_speed


def test_negative_cost_rejected():
    with pytest.raises(ValueError):
        CostModel(t_hop=-1)
