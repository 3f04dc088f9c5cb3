import numpy as np
import pytest
from hypothesis import given, strategies as st

from flft import data as D
from flft.errors import ConfigError


def test_tokenize_empty():
    assert len(D.tokenize_char("")) == 0


def test_tokenize_repeated_char():
    ids = D.tokenize_char("aa")
    assert len(ids) == 2 and ids[0] == ids[1]


def test_table_round_trip():
    table = "".join(chr(i) for i in range(1, 128))
    assert D.detokenize(D.tokenize_char(table)) == table


@given(st.text(alphabet=st.characters(min_codepoint=1, max_codepoint=127)))
def test_ascii_round_trip(text):
    assert D.detokenize(D.tokenize_char(text)) == text


def test_unknown_maps_to_unk():
    assert list(D.tokenize_char("é")) == [D.UNK]


def test_bundled_corpora_are_ascii():
    for name in D.BUNDLED:
        tokens = D.load_corpus(name)
        assert len(tokens) > 100_000
        assert np.all(tokens != D.UNK)


def test_split_holds_out_tail():
    tokens = np.arange(100)
    train, held = D.split_tokens(tokens, 0.1)
    assert len(held) == 10 and held[0] == 90 and len(train) == 90


def test_equal_partition_divisible():
    assert [len(s) for s in D.partition_equal(np.arange(100), 4)] == [25, 25, 25, 25]


def test_equal_partition_remainder_first():
    assert [len(s) for s in D.partition_equal(np.arange(101), 4)] == [26, 25, 25, 25]


@given(st.integers(1, 500), st.integers(1, 20))
def test_equal_partition_is_partition(n, k):
    if n < k:
        with pytest.raises(ConfigError):
            D.partition_equal(np.arange(n), k)
        return
    shards = D.partition_equal(np.arange(n), k)
    np.testing.assert_array_equal(np.concatenate([s.tokens for s in shards]), np.arange(n))
    sizes = [len(s) for s in shards]
    assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)


def _labeled(per_class, k=10, seed=0):
    return D.gen_synth_classification(k, per_class, 8, seed)


def test_dirichlet_near_uniform_for_large_alpha():
    data = _labeled(1000)
    shards = D.partition_dirichlet(data, 5, 1e6, seed=0)
    for s in shards:
        props = np.bincount(data.labels[s.indices], minlength=10) / len(s)
        assert np.all(np.abs(props - 0.1) <= 0.1 * 0.1 + 1e-12)


def test_dirichlet_concentrated_for_small_alpha():
    data = _labeled(100)
    for seed in range(20):
        shards = D.partition_dirichlet(data, 10, 0.1, seed)
        share = np.array([np.bincount(data.labels[s.indices], minlength=10) for s in shards]) / 100
        assert share.max() > 0.5


@given(st.integers(0, 1000), st.floats(0.01, 10))
def test_dirichlet_conserves_examples(seed, alpha):
    data = _labeled(20, k=4)
    shards = D.partition_dirichlet(data, 6, alpha, seed)
    assert sorted(np.concatenate([s.indices for s in shards]).tolist()) == list(range(len(data)))


def test_constraint_correlated_group_affinity():
    data = _labeled(200, k=4)
    groups = [0, 0, 0, 1, 1, 1]
    shards, p_weak = D.partition_constraint_correlated(data, groups, 0.5, seed=0)
    weak = np.concatenate([shards[c].indices for c in range(3)])
    counts = np.bincount(data.labels[weak], minlength=4)
    assert counts[0] > 0.9 * 200 and counts[1] > 0.9 * 200
    assert counts[2] < 0.1 * 200 and counts[3] < 0.1 * 200
    assert p_weak.sum() == pytest.approx(1.0)


def test_constraint_correlated_uniform_within_group():
    data = _labeled(300, k=4)
    groups = [0, 0, 1, 1, 1]
    shards, _ = D.partition_constraint_correlated(data, groups, float("inf"), seed=0, leak=0.0)
    for c in (2, 3, 4):
        counts = np.bincount(data.labels[shards[c].indices], minlength=4)
        assert counts[0] == counts[1] == 0
        assert abs(counts[2] - 100) <= 1 and abs(counts[3] - 100) <= 1


def test_constraint_correlated_needs_devices_per_group():
    with pytest.raises(ConfigError):
        D.partition_constraint_correlated(_labeled(10, k=4), [0, 0, 2], 0.1, 0)


def test_single_window():
    x, y = D.sample_window(np.arange(9), 8, np.random.default_rng(0))
    np.testing.assert_array_equal(x, np.arange(8))
    np.testing.assert_array_equal(y, np.arange(1, 9))


@given(st.integers(0, 2**31))
def test_window_shift_and_determinism(seed):
    tokens = np.arange(50) * 3
    x, y = D.sample_window(tokens, 10, np.random.default_rng(seed))
    np.testing.assert_array_equal(x[1:], y[:-1])
    x2, _ = D.sample_window(tokens, 10, np.random.default_rng(seed))
    np.testing.assert_array_equal(x, x2)


def test_short_shard_rejected():
    with pytest.raises(ConfigError):
        D.sample_batch(np.arange(5), 2, 5, np.random.default_rng(0))


def test_labeled_batch_repeats_label():
    data = _labeled(5, k=3)
    x, y = D.sample_labeled(data, np.arange(len(data)), 4, np.random.default_rng(0))
    assert x.shape == y.shape == (4, 8)
    assert np.all(y == y[:, :1])


def test_eval_windows_cover_in_order():
    x, y = D.eval_windows(np.arange(25), 8)
    assert x.shape == (3, 8)
    np.testing.assert_array_equal(x.ravel(), np.arange(24))
    np.testing.assert_array_equal(y.ravel(), np.arange(1, 25))


def test_synth_uniform_labels_and_deterministic():
    a, b = _labeled(30, k=5, seed=7), _labeled(30, k=5, seed=7)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    assert np.all(np.bincount(a.labels) == 30)


def test_synth_text_round_trip():
    data = _labeled(3, k=2)
    back = D.import_labeled(D.export_labeled(data), 2)
    assert np.array_equal(back.inputs, data.inputs) and np.array_equal(back.labels, data.labels)


def test_stratified_split():
    train, held = D.stratified_split(_labeled(20, k=3), 5)
    assert np.all(np.bincount(held.labels) == 5) and np.all(np.bincount(train.labels) == 15)


@pytest.mark.slow
def test_separable_classes_learned_centrally():
    from flft.arch import ArchitectureDescriptor
    from flft.fedsim import evaluate_classification
    from flft.nn.engine import loss_and_grads
    from flft.nn.optim import AdamWState, OptimizerSpec, adamw_step
    from flft.nn.store import init_params

    data = D.gen_synth_classification(2, 150, 16, seed=0, signal=1.0)
    train, held = D.stratified_split(data, 50)
    arch = ArchitectureDescriptor(layers=1, embed_dim=16, heads=2, context=16, num_outputs=2)
    store = init_params(arch, np.random.default_rng(0))
    names = [n for n in store if not n.startswith("emb.")]
    state, spec = AdamWState.fresh(store, names), OptimizerSpec(weight_decay=0.0)
    rng = np.random.default_rng(1)
    for _ in range(150):
        x, y = D.sample_labeled(train, np.arange(len(train)), 16, rng)
        _, grads = loss_and_grads(store, x, y, names)
        adamw_step(store, grads, state, spec, 3e-3)
    assert evaluate_classification(store, held)[1] > 0.95
