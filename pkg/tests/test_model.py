import math

import numpy as np
import pytest

from tubelet import model as mdl
from tubelet import tensor as tn
from tubelet.errors import ConfigError, DimensionError

MICRO = dict(T=4, H=20, W=20, d_e=16, depth=2, heads=2, ff_dim=32)


def micro(variant="smts-vivit", **kw):
    return mdl.ModelConfig.for_variant(variant, **{**MICRO, **kw})


def closed_form_count(c):
    d, ff, p = c.d_e, c.ff_dim, c.n_tokens
    embed = d * c.c_total * c.t * c.k_s ** 2 + d + d * d + d + p * d
    layer = 2 * 2 * d + 4 * (d * d + d) + (ff * d + ff) + (d * ff + d)
    out = c.t * c.k_s ** 2 * c.C_msi
    decoder = 2 * d + out * d + out
    return embed + c.depth * layer + decoder


# -- config ----------------------------------------------------------------

def test_reference_token_counts():
    assert mdl.ModelConfig(t=2).n_tokens == 432
    assert mdl.ModelConfig(t=6).n_tokens == 144
    assert mdl.ModelConfig().d_k == 8


@pytest.mark.parametrize("variant,t,c_sar", [
    ("mts-vit", 6, 0), ("mts-vivit", 2, 0), ("smts-vit", 6, 2), ("smts-vivit", 2, 2),
])
def test_variant_implies_span_and_sar(variant, t, c_sar):
    c = mdl.ModelConfig.for_variant(variant)
    assert (c.t, c.C_sar) == (t, c_sar)


def test_c_total_cases():
    assert mdl.ModelConfig.for_variant("smts-vivit").c_total == 14
    assert mdl.ModelConfig.for_variant("mts-vivit", use_mask_channel=False).c_total == 11


@pytest.mark.parametrize("kw", [dict(T=5), dict(H=62), dict(heads=5), dict(d_e=0)])
def test_invalid_configs_raise(kw):
    with pytest.raises(ConfigError):
        mdl.ModelConfig(**kw)


def test_variant_conflicts():
    with pytest.raises(ConfigError):
        mdl.ModelConfig.for_variant("mts-vit", t=2)
    with pytest.raises(ConfigError):
        mdl.ModelConfig.for_variant("resnet")


def test_anchors_enumerate_tiling_row_major():
    c = mdl.ModelConfig()
    a = mdl.token_anchors(c)
    assert a.shape == (432, 3)
    assert len({tuple(r) for r in a}) == 432
    assert tuple(a[0]) == (0, 0, 0) and tuple(a[1]) == (0, 0, 1) and tuple(a[12]) == (0, 1, 0)
    assert tuple(a[144]) == (1, 0, 0)


# -- parameters ------------------------------------------------------------

def test_param_count_closed_form():
    c2, c6 = mdl.ModelConfig.for_variant("smts-vivit"), mdl.ModelConfig.for_variant("smts-vit")
    assert mdl.param_count(c2) == closed_form_count(c2)
    assert mdl.param_count(c6) == closed_form_count(c6)
    pos = (432 - 144) * 64
    kernel = 64 * 14 * 25 * (2 - 6)
    decoder = (2 - 6) * 25 * 11 * (64 + 1)
    assert mdl.param_count(c2) - mdl.param_count(c6) == pos + kernel + decoder


def test_param_names_are_unique_and_dotted():
    names = list(mdl.param_shapes(mdl.ModelConfig()))
    assert len(names) == len(set(names))
    assert "enc.3.attn.q.weight" in names


def test_init_is_seeded_and_follows_the_rules():
    c = micro()
    a, b = mdl.init_params(c, 7), mdl.init_params(c, 7)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert any(a[k].data.tobytes() != v.data.tobytes() for k, v in mdl.init_params(c, 8).items())
    for name, p in a.items():
        if name.endswith(".bias") or name.endswith(".shift"):
            assert not p.data.any()
        elif name.endswith(".gain"):
            assert np.all(p.data == 1)
        elif name.endswith(".weight"):
            bound = 1 / math.sqrt(math.prod(p.shape[1:]))
            assert np.abs(p.data).max() <= bound
    pos = mdl.init_params(mdl.ModelConfig(), 0)["embed.pos"].data
    assert abs(pos.std() - 0.02) < 1e-3


# -- assemble_input --------------------------------------------------------

def test_assemble_input_layout_and_sar_passthrough():
    c = micro()
    rng = np.random.default_rng(0)
    msi = rng.random((4, 11, 20, 20)).astype(np.float32)
    sar = rng.random((4, 2, 20, 20)).astype(np.float32)
    mask = (rng.random((4, 20, 20)) > 0.5).astype(np.float32)
    x = mdl.assemble_input(msi * (1 - mask[:, None]), sar, mask, c)
    assert x.shape == (14, 4, 20, 20)
    assert x[11:13].transpose(1, 0, 2, 3).tobytes() == sar.tobytes()
    assert np.array_equal(x[13], mask)
    xb = mdl.assemble_input(msi[None], sar[None], mask[None], c)
    assert np.array_equal(xb[0], mdl.assemble_input(msi, sar, mask, c))


def test_assemble_input_sar_rules():
    msi, mask = np.zeros((4, 11, 20, 20)), np.zeros((4, 20, 20))
    with pytest.raises(ConfigError):
        mdl.assemble_input(msi, np.zeros((4, 2, 20, 20)), mask, micro("mts-vivit"))
    with pytest.raises(ConfigError):
        mdl.assemble_input(msi, None, mask, micro("smts-vivit"))
    with pytest.raises(DimensionError):
        mdl.assemble_input(msi, np.zeros((4, 3, 20, 20)), mask, micro("smts-vivit"))


# -- embedding / encoder / decoder -----------------------------------------

def test_zero_input_tokens_equal_positional_table():
    c = mdl.ModelConfig()
    params = mdl.init_params(c, 0)
    grid = mdl.tubelet_embed(np.zeros((c.c_total, 6, 60, 60), np.float32), params, c)
    assert grid.tokens.shape == (1, 432, 64)
    assert np.array_equal(grid.tokens.data[0], params["embed.pos"].data)
    c6 = mdl.ModelConfig.for_variant("smts-vit")
    assert mdl.tubelet_embed(np.zeros((14, 6, 60, 60), np.float32), mdl.init_params(c6, 0), c6).tokens.shape == (1, 144, 64)


def conv2d_stacked_naive(x, kernel, bias, k):
    """Baseline 2D patch embedding: channels = C * T stacked, k x k non-overlapping patches."""
    cs, h, w = x.shape
    out = np.zeros((kernel.shape[0], h // k, w // k))
    for o in range(kernel.shape[0]):
        for i in range(h // k):
            for j in range(w // k):
                out[o, i, j] = bias[o] + np.sum(kernel[o] * x[:, i * k:(i + 1) * k, j * k:(j + 1) * k])
    return out


def test_full_span_equals_stacked_channel_patch_embedding():
    c = micro("smts-vit")
    params = mdl.init_params(c, 3, dtype=np.float64)
    params["embed.tubelet.bias"].data[:] = np.random.default_rng(1).normal(size=c.d_e)
    x = np.random.default_rng(2).random((c.c_total, c.T, 20, 20))
    tokens = mdl.tubelet_embed(x, params, c).tokens.data[0]
    k2d = params["embed.tubelet.weight"].data.reshape(c.d_e, c.c_total * c.T, c.k_s, c.k_s)
    feats = conv2d_stacked_naive(x.reshape(c.c_total * c.T, 20, 20), k2d, params["embed.tubelet.bias"].data, c.k_s)
    flat = feats.reshape(c.d_e, -1).T
    expected = flat @ params["embed.linear.weight"].data.T + params["embed.linear.bias"].data + params["embed.pos"].data
    np.testing.assert_allclose(tokens, expected, atol=1e-10)


def test_attention_rows_sum_to_one():
    c = micro()
    params = mdl.init_params(c, 0)
    x = np.random.default_rng(0).random((2, c.c_total, 4, 20, 20)).astype(np.float32)
    weights = []
    mdl.forward(x, params, c, attention=weights)
    assert len(weights) == c.depth
    for w in weights:
        assert w.shape == (2, c.heads, c.n_tokens, c.n_tokens)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_encoder_is_permutation_equivariant():
    c = micro()
    params = mdl.init_params(c, 0, dtype=np.float64)
    x = np.random.default_rng(0).random((1, c.c_total, 4, 20, 20))
    base = mdl.tubelet_embed(x, params, c, positional=False)
    pos = params["embed.pos"].data
    perm = np.random.default_rng(1).permutation(c.n_tokens)
    a = mdl.encoder_forward(mdl.TokenGrid(tn.Tensor(base.tokens.data + pos), base.anchors), params, c)
    b = mdl.encoder_forward(mdl.TokenGrid(tn.Tensor(base.tokens.data[:, perm] + pos[perm]), base.anchors[perm]), params, c)
    np.testing.assert_allclose(b.tokens.data, a.tokens.data[:, perm], atol=1e-10)


def test_single_token_attention_is_value_projection():
    c = mdl.ModelConfig(T=2, t=2, H=5, W=5, C_sar=0, d_e=16, heads=4, depth=1, ff_dim=8)
    assert c.n_tokens == 1
    params = mdl.init_params(c, 0, dtype=np.float64)
    x = tn.Tensor(np.random.default_rng(0).normal(size=(3, 1, 16)))
    out = mdl.multi_head_attention(x, params, "enc.0.attn", c)
    v = tn.linear(x, params["enc.0.attn.v.weight"], params["enc.0.attn.v.bias"])
    expected = tn.linear(v, params["enc.0.attn.out.weight"], params["enc.0.attn.out.bias"])
    np.testing.assert_allclose(out.data, expected.data, atol=1e-12)


def test_decoder_zero_tokens_and_coverage():
    c = micro()
    params = mdl.init_params(c, 0, dtype=np.float64)
    zero = mdl.TokenGrid(tn.Tensor(np.zeros((1, c.n_tokens, c.d_e))), mdl.token_anchors(c))
    assert not mdl.decode_patches(zero, params, c).data.any()
    assert c.n_tokens * c.patch_dim == c.T * c.H * c.W * c.C_msi
    # Distinct per-token rows land in distinct output blocks with no overlap.
    ids = np.repeat(np.arange(c.n_tokens, dtype=float)[None, :, None], c.patch_dim, axis=2)
    out = tn.fold_tubelets(tn.Tensor(ids), c.C_msi, c.T, c.H, c.W, c.t, c.k_s).data[0]
    counts = np.bincount(out.ravel().astype(int))
    assert np.all(counts == c.patch_dim)


@pytest.mark.parametrize("variant", mdl.VARIANTS)
def test_reference_output_shape(variant):
    c = mdl.ModelConfig.for_variant(variant)
    params = mdl.init_params(c, 0)
    rng = np.random.default_rng(0)
    sar = rng.random((6, 2, 60, 60)) if c.fusion else None
    y = mdl.model_forward(rng.random((6, 11, 60, 60)), sar, np.zeros((6, 60, 60)), params, c)
    assert y.shape == (11, 6, 60, 60)


def test_forward_is_deterministic():
    c = micro()
    params = mdl.init_params(c, 0)
    x = np.random.default_rng(0).random((2, c.c_total, 4, 20, 20)).astype(np.float32)
    assert mdl.forward(x, params, c).data.tobytes() == mdl.forward(x, params, c).data.tobytes()


def test_model_gradients_on_micro_batch():
    from tubelet import objectives as obj
    c = micro(depth=1)
    params = mdl.init_params(c, 0, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = tn.Tensor(rng.random((2, c.c_total, 4, 20, 20)))
    target = tn.Tensor(rng.random((2, 4, 11, 20, 20)))

    def loss():
        pred = tn.transpose(mdl.forward(x, params, c), (0, 2, 1, 3, 4))
        return obj.multiscale_loss(pred, target)

    errors = tn.gradient_errors(loss, params, relative_floor=1e-2, max_entries=16)
    assert max(errors.values()) < 1e-4, errors
