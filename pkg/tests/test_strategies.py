import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flft.arch import ArchitectureDescriptor, DeviceConstraint
from flft.costmodel import TrainingShape, lora_cost
from flft.data import sample_batch
from flft.errors import ConfigError, InfeasibleError
from flft.nn.optim import OptimizerSpec
from flft.nn.store import ParameterStore, init_params
from flft.nn.variants import SubsetSpec, reconstruct_store
from flft.strategies import (
    FULL_RANK,
    ClientUpdate,
    DepthFL,
    FedHM,
    HeteroLoRA,
    LayerFinetuning,
    SubsetTraining,
    aggregate_hetlora,
    aggregate_layerft,
    aggregate_subset,
    fedrolex_index_set,
    fjord_sample_levels,
    heterofl_index_set,
    make_strategy,
    serialize_payload,
)
from oracles import convex_rule_loop, rolling_window_formula
from properties import BUILDERS, STRATEGY_NAMES, check_invariants

ARCH = ArchitectureDescriptor(layers=2, embed_dim=8, heads=2, vocab=16, context=8)
SHAPE = TrainingShape(2, 8, 2)


def _scalar(value):
    return ParameterStore(ARCH, {"x": np.array([value], dtype=np.float64)})


def _sampler():
    tokens = np.random.default_rng(0).integers(0, 16, 400)
    return lambda rng: sample_batch(tokens, SHAPE.batch, SHAPE.context, rng)


def _global():
    return init_params(ARCH, np.random.default_rng(0))


# --- index sets -------------------------------------------------------------------------------


def test_prefix_half_of_four():
    assert heterofl_index_set(0.5, 4).tolist() == [0, 1]


def test_prefix_full_and_nested():
    assert heterofl_index_set(1.0, 16).tolist() == list(range(16))
    a, b, c = (set(heterofl_index_set(s, 16).tolist()) for s in (0.25, 0.5, 1.0))
    assert a < b < c


def test_rolling_windows():
    assert set(fedrolex_index_set(1, 0.5, 4).tolist()) == {1, 2}
    assert set(fedrolex_index_set(3, 0.5, 4).tolist()) == {3, 0}
    assert set().union(*(fedrolex_index_set(r, 0.5, 4).tolist() for r in range(4))) == {0, 1, 2, 3}


@given(st.integers(0, 200), st.sampled_from([0.25, 0.5, 0.75, 1.0]), st.sampled_from([4, 8, 16, 12]))
def test_rolling_window_formula(r, s, q):
    assert set(fedrolex_index_set(r, s, q).tolist()) == rolling_window_formula(r, s, q)


def test_fjord_levels_respect_device_max():
    rng = np.random.default_rng(0)
    draws = {fjord_sample_levels((0.25, 0.5, 1.0), 0.5, rng) for _ in range(200)}
    assert draws == {0.25, 0.5}
    with pytest.raises(ConfigError):
        fjord_sample_levels((0.5,), 0.25, rng)


def test_scale_keeping_nothing():
    with pytest.raises(ConfigError):
        heterofl_index_set(0.1, 4)


# --- merge rule examples ----------------------------------------------------------------------


def test_partial_participation_scalar():
    ups = [ClientUpdate(1, 0, {"x": np.array([1.0])}), ClientUpdate(2, 0, {"x": np.array([3.0])})]
    assert aggregate_layerft(_scalar(0.0), ups, 10)["x"][0] == pytest.approx(0.4)


def test_full_participation_is_mean():
    ups = [ClientUpdate(1, 0, {"x": np.array([1.0])}), ClientUpdate(2, 0, {"x": np.array([3.0])})]
    assert aggregate_layerft(_scalar(-7.5), ups, 2)["x"][0] == 2.0


def test_adapter_half_coverage():
    g = ParameterStore(ARCH, {"a.lora_a": np.zeros((3, 2))})
    up = ClientUpdate(0, 0, {"a.lora_a": np.full((3, 1), 4.0)}, 1)
    out = aggregate_hetlora(g, [up], 2)["a.lora_a"]
    assert np.all(out[:, 0] == 2.0) and np.all(out[:, 1] == 0.0)


def test_subset_quarter_coverage():
    g = init_params(ARCH, np.random.default_rng(0), dtype=np.float64)
    g["head.out.b"] = np.ones(16)
    spec = SubsetSpec(0.5, heterofl_index_set(0.5, 8), heterofl_index_set(0.5, 32))
    up = ClientUpdate(0, 0, {"head.out.b": np.full(16, 5.0)}, 0.5, subset=spec)
    assert np.all(aggregate_subset(g, [up], 4)["head.out.b"] == 2.0)


def test_disjoint_windows_update_independently():
    g = init_params(ARCH, np.random.default_rng(0), dtype=np.float64)
    specs = [SubsetSpec(0.5, fedrolex_index_set(r, 0.5, 8), fedrolex_index_set(r, 0.5, 32)) for r in (0, 4)]
    ups = [
        ClientUpdate(c, 0, {"layers.0.ln1.g": np.full(4, 3.0 + c)}, 0.5, subset=s)
        for c, s in enumerate(specs)
    ]
    out = aggregate_subset(g, ups, 2)["layers.0.ln1.g"]
    np.testing.assert_array_equal(out[:4], (3.0 + 1.0) / 2)
    np.testing.assert_array_equal(out[4:], (4.0 + 1.0) / 2)


def test_duplicate_clients_rejected():
    u = ClientUpdate(1, 0, {"x": np.array([1.0])})
    with pytest.raises(ConfigError):
        aggregate_layerft(_scalar(0.0), [u, u], 5)
    with pytest.raises(ConfigError):
        aggregate_layerft(_scalar(0.0), [u], 0)


@settings(max_examples=25)
@given(st.sampled_from(["layerft", "hetlora", "subset", "depthfl"]), st.integers(0, 10_000))
def test_merge_equals_coordinate_oracle(name, seed):
    g, ups, n, merge, views = BUILDERS[name](seed)
    g64 = g.astype(np.float64)
    out = merge(g64, [ClientUpdate(u.client, 0, {k: v.astype(np.float64) for k, v in u.tensors.items()},
                                   u.knob, subset=u.subset) for u in ups], n)
    for tensor in {t for v in views for t in v}:
        contribs = [v[tensor] for v in views if tensor in v]
        want = convex_rule_loop(g64[tensor], contribs, n)
        np.testing.assert_allclose(out[tensor], want, rtol=1e-13, atol=1e-15)


@settings(max_examples=50)
@given(st.sampled_from(STRATEGY_NAMES), st.integers(0, 2**31), st.integers(0, 2**31))
def test_merge_invariants(name, seed, perm):
    check_invariants(name, seed, perm)


# --- local training contracts -----------------------------------------------------------------


def _train(strategy, store, knob, lr=1e-2):
    from flft.strategies.schemes import ClientPlan

    plan = ClientPlan(0, knob, strategy.knob_cost(knob))
    spec = OptimizerSpec(lr_start=lr, lr_end=lr, weight_decay=0.0)
    return strategy.local_train(store, plan, 0, _sampler(), np.random.default_rng(3), spec, lr)


def test_layerft_payloads():
    s = LayerFinetuning(ARCH, SHAPE)
    g = _global()
    full = _train(s, g, 2)
    assert {n.split(".")[1] for n in full.tensors if n.startswith("layers.")} == {"0", "1"}
    one = _train(s, g, 1)
    assert all(n.startswith(("layers.1.", "head.")) for n in one.tensors)
    assert one.upload_bytes == len(serialize_payload(one.tensors)) == s.knob_cost(1).upload_bytes
    assert one.flops == s.knob_cost(1).flops


def test_zero_lr_returns_received_weights():
    s = LayerFinetuning(ARCH, SHAPE)
    g = _global()
    up = _train(s, g, 2, lr=0.0)
    assert all(np.array_equal(up.tensors[n], g[n]) for n in up.tensors)
    assert aggregate_layerft(g, [up], 1).bitwise_equal(g)


def test_lora_keeps_main_weights_and_omits_them():
    s = HeteroLoRA(ARCH, SHAPE)
    s.plans = [type("P", (), {"knob": 4})()]
    g = s.prepare_global(_global(), np.random.default_rng(0))
    before = {n: g[n].copy() for n in g}
    up = _train(s, g, 2)
    assert not any(n.endswith(".w") and n.startswith("layers.") for n in up.tensors)
    assert all(np.array_equal(g[n], before[n]) for n in g)
    assert up.tensors["layers.0.qkv.lora_a"].shape == (8, 2)


def test_lora_rank_boundary_inclusive():
    arch = ArchitectureDescriptor(layers=2, embed_dim=16, heads=2)
    shape = TrainingShape(2, 8)
    budget = lora_cost(arch, 12, shape).memory_bytes
    assert HeteroLoRA(arch, shape).choose_knob(DeviceConstraint(memory_bytes=budget)) == 12


def test_subset_payload_and_cost():
    s = SubsetTraining(ARCH, SHAPE, "heterofl")
    s.plan([DeviceConstraint()])
    up = _train(s, _global(), 0.5)
    assert up.tensors["layers.0.qkv.w"].shape == (4, 12)
    assert up.upload_bytes == s.knob_cost(0.5).upload_bytes
    assert up.flops == s.knob_cost(0.5).flops


def test_fjord_charges_drawn_levels():
    from flft.strategies import predicted_flops

    s = SubsetTraining(ARCH, SHAPE, "fjord", levels=(0.5, 1.0))
    s.plan([DeviceConstraint()])
    up = _train(s, _global(), 1.0)
    assert len(up.trace) == SHAPE.steps_per_round
    assert up.flops == predicted_flops(s, up)


def test_subset_infeasible_device():
    s = SubsetTraining(ARCH, SHAPE, "heterofl", levels=(1.0,))
    with pytest.raises(InfeasibleError):
        s.plan([DeviceConstraint(memory_bytes=10)])


def test_fedhm_lossless_full_rank():
    s = FedHM(ARCH, SHAPE)
    s.plans = [type("P", (), {"knob": 8})()]
    g = _global().astype(np.float64)
    s.begin_round(0, g, [0])
    up = _train(s, g, 8, lr=0.0)
    rec = reconstruct_store(ParameterStore(ARCH, dict(up.tensors)))
    for n in rec:
        if n.endswith(".w") and n.startswith("layers."):
            assert np.linalg.norm(rec[n] - g[n]) / np.linalg.norm(g[n]) < 1e-5
    assert s.aggregate(g, [up], 1, 0).bitwise_equal(g)


def test_fedhm_two_dense_clients_zero_lr_fixed_point():
    s = FedHM(ARCH, SHAPE)
    s.plans = [type("P", (), {"knob": FULL_RANK})()] * 2
    g = _global()
    s.begin_round(0, g, [0, 1])
    ups = [_train(s, g, FULL_RANK, lr=0.0), _train(s, g, FULL_RANK, lr=0.0)]
    ups[1].client = 1
    assert s.aggregate(g, ups, 2, 0).bitwise_equal(g)


def test_depthfl_weak_payload_excludes_upper_layers():
    s = DepthFL(ArchitectureDescriptor(layers=4, embed_dim=8, heads=2, vocab=16, context=8), SHAPE)
    g = s.prepare_global(init_params(s.arch, np.random.default_rng(0)), np.random.default_rng(0))
    up = _train(s, g, (2,))
    assert not any(n.startswith(("layers.2.", "layers.3.", "head.")) for n in up.tensors)
    assert "exits.2.out.w" in up.tensors
    assert up.flops == s.knob_cost((2,)).flops
    strong = _train(s, g, (2, 4))
    assert strong.flops == s.knob_cost((2, 4)).flops


def test_unknown_strategy():
    with pytest.raises(ConfigError):
        make_strategy("fedavg", ARCH, SHAPE)
