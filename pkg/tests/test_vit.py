import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gelu as gelu_ref
from oracles import numpy_params, vit_logits
from privit import autodiff as ad
from privit.autodiff import ShapeError, Tensor
from privit.vit import (AttentionWeights, ModelConfig, SwitchSet, ViT, binarize, count_active,
                        scale_attention, softmax_attention, squared_attention, switched_attention,
                        switched_gelu, uniform_attention)

DESK = ModelConfig()


def images(b, cfg=DESK, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (b, cfg.image_size, cfg.image_size, cfg.channels))


def scalar_weights():
    return AttentionWeights.identity(1)


# -- config ------------------------------------------------------------------------


def test_desk_config_derived_sizes():
    assert DESK.num_tokens == 17
    assert DESK.head_dim == 8
    assert DESK.gelu_switch_shape == (2, 17)
    assert DESK.softmax_switch_shape == (2, 2, 17)
    assert ModelConfig(gelu_granularity="per-element").gelu_switch_shape == (2, 17, 32)


@pytest.mark.parametrize("kwargs", [dict(num_heads=3), dict(patch_size=5), dict(num_layers=0),
                                    dict(attn_variant="cubic"), dict(gelu_granularity="per-head")])
def test_invalid_configs(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


# -- switched gelu -------------------------------------------------------------------


@pytest.mark.parametrize("c, expected", [(1.0, 0.841192), (0.0, 1.0), (0.5, 0.920596)])
def test_switched_gelu_examples(c, expected):
    out = switched_gelu(Tensor(c), Tensor([1.0])).value
    assert out[0] == pytest.approx(expected, abs=1e-6)
    assert out[0] == pytest.approx(c * gelu_ref(1.0) + (1 - c) * 1.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_switched_gelu_endpoints_are_exact(xs):
    x = Tensor(np.array(xs))
    np.testing.assert_array_equal(switched_gelu(Tensor(1.0), x).value, ad.gelu(x).value)
    np.testing.assert_array_equal(switched_gelu(Tensor(0.0), x).value, x.value)


# -- attention variants ----------------------------------------------------------------


def test_squared_attention_scalars():
    w = scalar_weights()
    assert squared_attention(Tensor([[1.0]]), w).value.tolist() == [[1.0]]
    assert squared_attention(Tensor([[2.0]]), w).value.tolist() == [[32.0]]
    assert squared_attention(Tensor(np.zeros((3, 1))), w).value.tolist() == [[0.0]] * 3


def test_scale_attention_scalar_and_linearity():
    w = scalar_weights()
    assert scale_attention(Tensor([[2.0]]), w).value.tolist() == [[8.0]]
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(4, 3)))
    ws = AttentionWeights(*(Tensor(rng.normal(size=(3, 3))) for _ in range(4)))
    doubled = AttentionWeights(ws.w_q, ws.w_k, Tensor(2 * ws.w_v.value), ws.w_o)
    np.testing.assert_allclose(scale_attention(x, doubled).value, 2 * scale_attention(x, ws).value,
                               rtol=1e-12)


def test_uniform_attention_is_row_mean():
    out = uniform_attention(Tensor([[1.0, 3.0], [3.0, 1.0]]), AttentionWeights.identity(2)).value
    np.testing.assert_array_equal(out, [[2.0, 2.0], [2.0, 2.0]])
    x = Tensor([[5.0, -1.0]])
    np.testing.assert_array_equal(uniform_attention(x, AttentionWeights.identity(2)).value, x.value)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_uniform_rows_identical(n, seed):
    rng = np.random.default_rng(seed)
    ws = AttentionWeights(*(Tensor(rng.normal(size=(4, 4))) for _ in range(4)))
    out = uniform_attention(Tensor(rng.normal(size=(n, 4))), ws, num_heads=2).value
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)


def test_switched_attention_blend_scalar():
    w = scalar_weights()
    assert switched_attention(Tensor([[2.0]]), Tensor([[0.5]]), w).value.tolist() == [[17.0]]


@pytest.mark.parametrize("variant, branch", [("squared", squared_attention), ("scale", scale_attention),
                                             ("uniform", uniform_attention)])
def test_switched_attention_endpoints(variant, branch):
    rng = np.random.default_rng(2)
    n, d, h = 5, 4, 2
    x = Tensor(rng.normal(size=(n, d)))
    ws = AttentionWeights(*(Tensor(rng.normal(size=(d, d))) for _ in range(4)))
    on = switched_attention(x, Tensor(np.ones((h, n))), ws, h, variant).value
    off = switched_attention(x, Tensor(np.zeros((h, n))), ws, h, variant).value
    assert np.max(np.abs(on - softmax_attention(x, ws, h).value)) <= 1e-12
    assert np.max(np.abs(off - branch(x, ws, h).value)) <= 1e-12


def test_attention_matches_numpy_reference():
    from oracles import attention
    rng = np.random.default_rng(3)
    n, d, h = 6, 4, 2
    x = rng.normal(size=(n, d))
    mats = [rng.normal(size=(d, d)) for _ in range(4)]
    biases = [rng.normal(size=d) for _ in range(4)]
    s = rng.uniform(0, 1, (h, n))
    ws = AttentionWeights(*(Tensor(m) for m in mats + biases))
    got = switched_attention(Tensor(x), Tensor(s), ws, h, "squared").value
    np.testing.assert_allclose(got, attention(x, *mats, *biases, h, s), atol=1e-12)


# -- forward -------------------------------------------------------------------------


def test_forward_logit_shape():
    assert ViT(DESK, seed=0)(images(1)).shape == (1, DESK.num_classes)


def test_forward_rejects_wrong_image_shape():
    with pytest.raises(ShapeError):
        ViT(DESK)(np.zeros((1, 8, 8, 3)))


def test_wrong_switch_shape_rejected():
    sw = SwitchSet(Tensor(np.ones((2, 5))), Tensor(np.ones(DESK.softmax_switch_shape)))
    with pytest.raises(ShapeError):
        ViT(DESK, switches=sw)


@pytest.mark.parametrize("seed", [0, 1])
def test_forward_matches_reference_all_on(seed):
    model = ViT(DESK, seed=seed)
    x = images(3, seed=seed)
    ref = vit_logits(x, numpy_params(model), DESK)
    assert np.max(np.abs(model(x).value - ref)) < 1e-10


@pytest.mark.parametrize("variant", ["squared", "scale", "uniform"])
def test_forward_matches_reference_random_switches(variant):
    cfg = ModelConfig(attn_variant=variant)
    rng = np.random.default_rng(4)
    model = ViT(cfg, seed=4)
    model.switches.gelu.value = rng.uniform(-0.5, 1.5, cfg.gelu_switch_shape)
    model.switches.softmax.value = rng.uniform(-0.5, 1.5, cfg.softmax_switch_shape)
    x = images(2, cfg, seed=4)
    ref = vit_logits(x, numpy_params(model), cfg, model.switches.gelu.value, model.switches.softmax.value)
    assert np.max(np.abs(model(x).value - ref)) < 1e-10


def test_forward_per_element_granularity():
    cfg = ModelConfig(gelu_granularity="per-element")
    model = ViT(cfg, seed=5)
    model.switches.gelu.value = np.random.default_rng(5).uniform(0, 1, cfg.gelu_switch_shape)
    x = images(2, cfg, seed=5)
    ref = vit_logits(x, numpy_params(model), cfg, model.switches.gelu.value)
    assert np.max(np.abs(model(x).value - ref)) < 1e-10


def test_patch_permutation_invariance_without_positions():
    model = ViT(DESK, seed=6)
    model.params["pos"].value[:] = 0.0
    x = images(1, seed=6)
    g = DESK.image_size // DESK.patch_size
    perm = np.random.default_rng(6).permutation(g * g)
    p = DESK.patch_size
    blocks = x[0].reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, p, p, 3)[perm]
    shuffled = blocks.reshape(g, g, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(1, *x.shape[1:])
    assert not np.array_equal(shuffled, x)
    np.testing.assert_allclose(model(shuffled).value, model(x).value, atol=1e-9)


def test_full_model_gradient_check_small_batch():
    cfg = ModelConfig(num_layers=1, embed_dim=8, mlp_dim=8, image_size=8)
    model = ViT(cfg, seed=7)
    rng = np.random.default_rng(7)
    model.switches.gelu.value = rng.uniform(0.2, 1.0, cfg.gelu_switch_shape)
    model.switches.softmax.value = rng.uniform(0.2, 1.0, cfg.softmax_switch_shape)
    x, y = images(2, cfg, seed=7), np.array([0, 3])
    tensors = model.trainable()
    assert ad.grad_check(lambda *_: ad.cross_entropy(model(x), y), tensors, 1e-5) < 1e-4


# -- counting and binarization --------------------------------------------------------


def _switches(gelu, softmax=(1.0,), eps=1e-3):
    return SwitchSet(Tensor(np.array(gelu), requires_grad=True),
                     Tensor(np.array(softmax), requires_grad=True), eps)


def test_count_active_examples():
    assert count_active(_switches([1.0, 0.0005, 0.5]))[0] == 2
    assert count_active(SwitchSet.ones(DESK)) == (34, 68)
    assert count_active(_switches([0.0, 0.0], [0.0])) == (0, 0)


def test_count_is_strict_at_epsilon():
    assert count_active(_switches([1e-3, 1.0001e-3]))[0] == 1


def test_binarize_examples():
    sw = _switches([1.0, 0.0005, 0.5])
    before = count_active(sw)[0]
    binarize(sw, "gelu")
    assert sw.gelu.value.tolist() == [1.0, 0.0, 1.0]
    assert sw.gelu_frozen and not sw.gelu.requires_grad
    assert not sw.softmax_frozen
    assert int(sw.gelu.value.sum()) == before


def test_binarize_is_idempotent_and_frozen_noop():
    sw = _switches([1.0, 0.0, 1.0], [0.4, 0.0])
    binarize(sw, "both")
    snap = (sw.gelu.value.copy(), sw.softmax.value.copy())
    sw.gelu.value[0] = 0.7  # a frozen mask is left alone on re-binarization
    binarize(sw, "both")
    assert sw.gelu.value[0] == 0.7
    np.testing.assert_array_equal(sw.softmax.value, snap[1])
    with pytest.raises(ValueError):
        binarize(sw, "C")


def test_frozen_switches_leave_trainable_list():
    model = ViT(DESK)
    n = len(model.trainable())
    binarize(model.switches, "softmax")
    assert len(model.trainable()) == n - 1
    assert model.switches.gelu in model.trainable()


def test_per_token_switch_gates_m_elements():
    """Zeroing one token switch turns exactly m GELU outputs into identities."""
    cfg = DESK
    m = cfg.mlp_dim
    u = Tensor(np.random.default_rng(8).normal(size=(cfg.num_tokens, m)))
    c = np.ones(cfg.num_tokens)
    c[3] = 0.0
    out = switched_gelu(Tensor(c).reshape(cfg.num_tokens, 1), u).value
    changed = np.count_nonzero(out != ad.gelu(u).value)
    assert changed == m
    np.testing.assert_array_equal(out[3], u.value[3])


def test_copy_is_independent():
    model = ViT(DESK, seed=9)
    twin = model.copy()
    twin.params["head.w"].value[:] = 0.0
    twin.switches.gelu.value[:] = 0.0
    assert np.any(model.params["head.w"].value != 0.0)
    assert np.all(model.switches.gelu.value == 1.0)
