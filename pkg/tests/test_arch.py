import numpy as np
import pytest
from hypothesis import given, strategies as st

from flft.arch import (
    ArchitectureDescriptor,
    ConstraintScenario,
    DeviceConstraint,
    TrainingConfiguration,
    assign_devices,
    enumerate_configurations,
    sibling_family,
)
from flft.errors import ConfigError


def test_enumerate_three_layers():
    cfgs = enumerate_configurations(ArchitectureDescriptor(layers=3))
    assert [c.trained_layers for c in cfgs] == [1, 2, 3]


def test_enumerate_single_layer():
    assert [c.trained_layers for c in enumerate_configurations(ArchitectureDescriptor(layers=1))] == [1]


def test_enumerate_twelve_last_has_no_frozen_layers():
    cfgs = enumerate_configurations(ArchitectureDescriptor(layers=12))
    assert len(cfgs) == 12
    assert list(cfgs[-1].frozen_indices) == []
    assert list(cfgs[0].trained_indices) == [11]


@pytest.mark.parametrize("t", [0, 4])
def test_configuration_out_of_range(t):
    with pytest.raises(ConfigError):
        TrainingConfiguration(ArchitectureDescriptor(layers=3), t)


def test_descriptor_validation():
    with pytest.raises(ConfigError):
        ArchitectureDescriptor(layers=2, embed_dim=10, heads=4)
    with pytest.raises(ConfigError):
        ArchitectureDescriptor(layers=0)
    with pytest.raises(ConfigError):
        ArchitectureDescriptor(layers=2, num_outputs=0)


def test_out_dim_defaults_to_vocab():
    a = ArchitectureDescriptor(layers=2, vocab=50)
    assert a.out_dim == 50
    assert ArchitectureDescriptor(layers=2, vocab=50, num_outputs=8).out_dim == 8


def test_siblings_differ_only_in_depth():
    fam = sibling_family(ArchitectureDescriptor(layers=2, embed_dim=16, heads=2), [2, 3, 4])
    assert [a.layers for a in fam] == [2, 3, 4]
    assert all(fam[0].is_sibling(a) for a in fam)


def test_single_group_everyone_gets_it():
    c = DeviceConstraint(memory_bytes=1e6)
    prof = assign_devices(ConstraintScenario(((1.0, c),), 100), seed=3)
    assert len(prof) == 100 and all(p.constraint == c for p in prof)


def test_even_split():
    a, b = DeviceConstraint(flops=1.0), DeviceConstraint(flops=2.0)
    prof = assign_devices(ConstraintScenario(((0.5, a), (0.5, b)), 100), seed=0)
    assert sum(p.group == 0 for p in prof) == 50


def test_largest_remainder_sizes():
    groups = ((0.33, DeviceConstraint()), (0.33, DeviceConstraint()), (0.34, DeviceConstraint()))
    assert ConstraintScenario(groups, 10).group_sizes() == [3, 3, 4]


def test_fractions_must_sum_to_one():
    with pytest.raises(ConfigError):
        ConstraintScenario(((0.5, DeviceConstraint()), (0.4, DeviceConstraint())), 10)


def test_negative_budget_rejected():
    with pytest.raises(ConfigError):
        DeviceConstraint(memory_bytes=-1)


@given(
    st.lists(st.floats(0.01, 1.0), min_size=1, max_size=5),
    st.integers(1, 60),
    st.integers(0, 2**31),
)
def test_assignment_sizes_and_determinism(weights, n, seed):
    w = np.array(weights) / sum(weights)
    w[-1] = 1.0 - w[:-1].sum()
    if w[-1] < 0:
        return
    scen = ConstraintScenario(tuple((float(f), DeviceConstraint(flops=float(i))) for i, f in enumerate(w)), n)
    sizes = scen.group_sizes()
    assert sum(sizes) == n
    assert all(abs(s - f * n) < 1 for s, f in zip(sizes, w))
    a, b = assign_devices(scen, seed), assign_devices(scen, seed)
    assert a == b
    assert [sum(p.group == g for p in a) for g in range(len(w))] == sizes


def test_admits_is_inclusive():
    class Cost:
        memory_bytes, upload_bytes, flops = 10, 5, 7

    assert DeviceConstraint(10, 5, 7).admits(Cost)
    assert not DeviceConstraint(9, 5, 7).admits(Cost)
    assert DeviceConstraint().admits(Cost)
