import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from flft.arch import ArchitectureDescriptor
from flft.errors import ConfigError
from flft.nn.optim import AdamWState, OptimizerSpec, adamw_step, decays
from flft.nn.store import (
    ParameterStore,
    decode_checkpoint,
    encode_checkpoint,
    init_params,
    load_checkpoint,
    replace_head,
    save_checkpoint,
)
from flft.nn.svd import jacobi_svd, svd_factorize
from flft.nn.variants import (
    SubsetSpec,
    add_exit_heads,
    add_lora,
    factorize_store,
    lora_trainable,
    reconstruct_store,
    slice_lora,
    subset_embed,
    subset_extract,
    truncate_to_depth,
)
from flft.nn.engine import logits

# --- optimizer --------------------------------------------------------------------------------


def _scalar_store(value=0.5):
    return ParameterStore(ArchitectureDescriptor(layers=1), {"layers.0.qkv.w": np.array([value])})


def test_zero_grad_no_decay_is_fixed_point():
    s = _scalar_store()
    spec = OptimizerSpec(weight_decay=0.0)
    state = AdamWState.fresh(s, s.names())
    adamw_step(s, {"layers.0.qkv.w": np.zeros(1)}, state, spec, lr=0.1)
    assert s["layers.0.qkv.w"][0] == 0.5


def test_single_step_without_momentum():
    s = _scalar_store()
    spec = OptimizerSpec(beta1=0.0, beta2=0.0, weight_decay=0.0, eps=1e-8)
    state = AdamWState.fresh(s, s.names())
    adamw_step(s, {"layers.0.qkv.w": np.ones(1)}, state, spec, lr=0.01)
    assert s["layers.0.qkv.w"][0] == pytest.approx(0.5 - 0.01 * 1.0 / (1.0 + 1e-8), abs=1e-15)


def test_schedule_endpoints():
    spec = OptimizerSpec(lr_start=1e-3, lr_end=1e-5, horizon=30)
    assert spec.lr(0) == pytest.approx(1e-3)
    assert spec.lr(30) == pytest.approx(1e-5)
    assert spec.lr(15) == pytest.approx((1e-3 + 1e-5) / 2)


def test_decay_applies_to_weights_only():
    assert decays("layers.0.qkv.w") and decays("layers.1.ffn_in.lora_a")
    assert not decays("layers.0.ln1.g") and not decays("head.out.b") and not decays("emb.tok")


def test_decoupled_decay_with_zero_grad():
    s = _scalar_store(2.0)
    spec = OptimizerSpec(weight_decay=0.1)
    adamw_step(s, {"layers.0.qkv.w": np.zeros(1)}, AdamWState.fresh(s, s.names()), spec, lr=0.5)
    assert s["layers.0.qkv.w"][0] == pytest.approx(2.0 * (1 - 0.05))


def test_gradient_state_mismatch():
    s = _scalar_store()
    with pytest.raises(ConfigError):
        adamw_step(s, {"other": np.zeros(1)}, AdamWState.fresh(s, s.names()), OptimizerSpec(), 0.1)


# --- SVD --------------------------------------------------------------------------------------


def test_diag_rank_one():
    f = svd_factorize(np.diag([3.0, 1.0]), 1)
    np.testing.assert_allclose(f.reconstruct(), [[3.0, 0.0], [0.0, 0.0]], atol=1e-12)


def test_full_rank_roundtrip():
    w = np.random.default_rng(0).normal(size=(6, 9))
    rec = svd_factorize(w, 6).reconstruct()
    assert np.linalg.norm(rec - w) / np.linalg.norm(w) < 1e-6


def test_rank_one_recovery():
    rng = np.random.default_rng(1)
    w = np.outer(rng.normal(size=5), rng.normal(size=7))
    assert np.linalg.norm(svd_factorize(w, 1).reconstruct() - w) / np.linalg.norm(w) < 1e-6


@settings(max_examples=40)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(-10, 10)))
def test_singular_values_match_lapack(a):
    u, s, vt = jacobi_svd(a)
    ref = np.linalg.svd(a, compute_uv=False)
    scale = max(1.0, ref.max())
    np.testing.assert_allclose(s, ref, atol=1e-9 * scale)
    np.testing.assert_allclose(u * s @ vt, a, atol=1e-9 * scale)
    assert np.all(np.diff(s) <= 1e-12 * scale)


def test_reconstruction_error_non_increasing_in_rank():
    w = np.random.default_rng(2).normal(size=(8, 12))
    errs = [np.linalg.norm(svd_factorize(w, z).reconstruct() - w) for z in range(1, 9)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    # Eckart-Young: the error equals the tail of the singular values
    s = np.linalg.svd(w, compute_uv=False)
    np.testing.assert_allclose(errs, [np.sqrt((s[z:] ** 2).sum()) for z in range(1, 9)], atol=1e-9)


def test_invalid_rank():
    with pytest.raises(ConfigError):
        svd_factorize(np.eye(3), 4)


# --- variants ---------------------------------------------------------------------------------


def test_lora_adapters_start_neutral(tiny_store, tokens):
    s = add_lora(tiny_store, 3, np.random.default_rng(0))
    np.testing.assert_array_equal(logits(s, tokens[0]), logits(tiny_store, tokens[0]))
    sliced = slice_lora(s, 2)
    assert sliced["layers.0.qkv.lora_a"].shape == (8, 2)
    assert sliced["layers.0.qkv.lora_b"].shape == (2, 24)
    names = lora_trainable(s)
    assert not any(n.endswith(".w") and not n.startswith("head.") for n in names)
    with pytest.raises(ConfigError):
        slice_lora(s, 4)


def test_factorize_reconstruct_full_rank(tiny_store):
    back = reconstruct_store(factorize_store(tiny_store, 8))
    for n in tiny_store:
        np.testing.assert_allclose(back[n], tiny_store[n], atol=1e-10)


def test_subset_full_scale_is_identity(tiny_store):
    spec = SubsetSpec(1.0, np.arange(8), np.arange(32))
    assert subset_extract(tiny_store, spec).bitwise_equal(tiny_store)


def test_subset_top_left_block():
    a = ArchitectureDescriptor(layers=1, embed_dim=4, heads=2, vocab=5, context=3)
    s = init_params(a, np.random.default_rng(0), dtype=np.float64)
    spec = SubsetSpec(0.5, np.array([0, 1]), np.arange(8))
    sub = subset_extract(s, spec)
    np.testing.assert_array_equal(sub["layers.0.attn_out.w"], s["layers.0.attn_out.w"][:2, :2])
    assert sub["layers.0.qkv.w"].shape == (2, 6)


def test_subset_round_trip_idempotent(tiny_store):
    spec = SubsetSpec(0.5, np.array([1, 3, 4, 6]), np.array([0, 5, 9, 17, 20, 21, 30, 31]))
    sub = subset_extract(tiny_store, spec)
    again = subset_extract(subset_embed(sub, tiny_store, spec), spec)
    assert again.bitwise_equal(sub)
    # forward of the sub-model runs with the reduced width
    assert logits(sub, np.zeros((1, 4), dtype=int)).shape == (1, 4, 16)


def test_truncate_keeps_exit_head(tiny_store):
    s = add_exit_heads(tiny_store, [1])
    np.testing.assert_array_equal(s["exits.1.out.w"], s["head.out.w"])
    t = truncate_to_depth(s, 1)
    assert not any(n.startswith(("layers.1.", "head.")) for n in t)
    assert "exits.1.out.w" in t


# --- checkpoints ------------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, tiny_arch):
    s = init_params(tiny_arch, np.random.default_rng(0))
    path = tmp_path / "m.flft"
    save_checkpoint(str(path), s)
    back = load_checkpoint(str(path))
    assert back.arch == s.arch and back.bitwise_equal(s)


def test_checkpoint_keeps_classifier_width(tiny_arch):
    s = replace_head(init_params(tiny_arch, np.random.default_rng(0)), 3, np.random.default_rng(1))
    back = decode_checkpoint(encode_checkpoint(s))
    assert back.arch.out_dim == 3 and back.arch == s.arch


def test_corrupt_checkpoint(tiny_arch):
    blob = encode_checkpoint(init_params(tiny_arch, np.random.default_rng(0)))
    with pytest.raises(ConfigError):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(ConfigError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(ConfigError):
        decode_checkpoint(blob + b"\0")
