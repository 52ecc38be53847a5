import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from caam.attention import (
    CBAM,
    AttentionPair,
    CBAMLogits,
    DBlock,
    LayoutError,
    MBlock,
    NumericError,
    ViTCaaMBlock,
    caam_split_cnn,
    caam_split_vit,
    d_block,
    token_attention_to_grid,
)
from caam.models import BackboneConfig, build_model


@pytest.fixture(autouse=True)
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


# -- CBAM logits -----------------------------------------------------------

def test_zero_init_logits_are_zero():
    mod = CBAMLogits(8, reduction=4)
    x = torch.randn(2, 8, 5, 5)
    assert torch.equal(mod(x), torch.zeros_like(x))


@pytest.mark.parametrize("shape", [(1, 4, 3, 3), (2, 16, 7, 5), (3, 1, 2, 2)])
def test_logits_keep_shape(shape):
    mod = CBAMLogits(shape[1], zero_init=False)
    assert mod(torch.randn(*shape)).shape == shape


def test_logits_reject_tokens():
    with pytest.raises(LayoutError):
        CBAMLogits(4)(torch.randn(2, 9, 4))


def test_logits_hand_trace_2x2x1():
    mod = CBAMLogits(1, reduction=16, spatial_kernel=1, zero_init=False)
    with torch.no_grad():
        mod.mlp[0].weight.fill_(0.5)
        mod.mlp[0].bias.fill_(0.1)
        mod.mlp[2].weight.fill_(-2.0)
        mod.mlp[2].bias.fill_(0.3)
        mod.spatial.weight[:] = torch.tensor([0.7, -0.4]).view(1, 2, 1, 1)
        mod.spatial.bias.fill_(0.05)
    vals = [[1.0, -2.0], [3.0, 0.5]]
    x = torch.tensor(vals).view(1, 1, 2, 2)
    avg = sum(sum(r) for r in vals) / 4
    mx = max(max(r) for r in vals)
    mlp = lambda v: -2.0 * max(0.5 * v + 0.1, 0.0) + 0.3
    zc = mlp(avg) + mlp(mx)
    # with one channel the per-pixel mean and max both equal the pixel value
    expected = [[zc + 0.7 * v - 0.4 * v + 0.05 for v in row] for row in vals]
    np.testing.assert_allclose(mod(x)[0, 0].detach().numpy(), expected, atol=1e-12)


# -- sigmoid split ---------------------------------------------------------

def test_zero_logits_halve_features():
    x = torch.randn(2, 3, 4, 4)
    c, s = caam_split_cnn(x, torch.zeros_like(x))
    assert torch.equal(c, 0.5 * x) and torch.equal(s, 0.5 * x)


def test_ln3_gives_three_quarters():
    x = torch.ones(1, 1, 1, 1)
    c, s = caam_split_cnn(x, torch.full_like(x, math.log(3)))
    assert c.item() == pytest.approx(0.75, abs=1e-12)
    assert s.item() == pytest.approx(0.25, abs=1e-12)


def test_non_finite_logits_raise():
    x = torch.ones(1, 1, 2, 2)
    z = torch.zeros_like(x)
    z[0, 0, 1, 1] = float("nan")
    with pytest.raises(NumericError):
        caam_split_cnn(x, z)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 30.0))
def test_cnn_split_reconstructs_input(seed, scale):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, 4, 5, generator=g, dtype=torch.float32)
    z = scale * torch.randn(2, 3, 4, 5, generator=g, dtype=torch.float32)
    c, s = caam_split_cnn(x, z)
    assert (c + s - x).abs().max().item() <= 1e-6


# -- D-Block / M-Block -----------------------------------------------------

def test_d_block_pure_skip():
    prev_c, prev_s = torch.randn(1, 2, 3, 3), torch.randn(1, 2, 3, 3)
    zero = torch.zeros_like(prev_c)
    c, s = d_block(AttentionPair(zero, zero), False, prev_c, prev_s)
    assert torch.equal(c, prev_c) and torch.equal(s, prev_s)


def test_d_block_init_skips_only_causal():
    res = torch.randn(1, 2, 3, 3)
    zero = torch.zeros_like(res)
    c, s = d_block(AttentionPair(zero, zero), True, residual_input=res)
    assert torch.equal(c, res) and torch.equal(s, zero)


def test_d_block_missing_inputs():
    pair = AttentionPair(torch.zeros(1), torch.zeros(1))
    with pytest.raises(ValueError):
        d_block(pair, True)
    with pytest.raises(ValueError):
        d_block(pair, False, prev_c=torch.zeros(1))


def test_d_block_module_hand_trace():
    torch.manual_seed(0)
    blk = DBlock(4, is_init=False, reduction=2).eval()
    with torch.no_grad():
        for p in blk.caam.logits.parameters():
            p.normal_(0, 0.3)
    x, pc, ps = torch.randn(1, 4, 5, 5), torch.randn(1, 4, 5, 5), torch.randn(1, 4, 5, 5)
    feat = blk.caam.body(x)
    z = blk.caam.logits(feat)
    c, s = blk(x, pc, ps)
    torch.testing.assert_close(c, torch.sigmoid(z) * feat + pc, rtol=0, atol=1e-12)
    torch.testing.assert_close(s, torch.sigmoid(-z) * feat + ps, rtol=0, atol=1e-12)


def test_m_block_identity_init():
    blk = MBlock(3)
    c, s = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    torch.testing.assert_close(blk(c, s), c + s, rtol=0, atol=1e-12)
    torch.testing.assert_close(blk(c, torch.zeros_like(s)), c, rtol=0, atol=1e-12)


def test_m_block_scalar_weights():
    blk = MBlock(1)
    with torch.no_grad():
        blk.conv_c.weight.fill_(2.5)
        blk.conv_s.weight.fill_(-0.5)
    c, s = torch.randn(1, 1, 3, 3), torch.randn(1, 1, 3, 3)
    torch.testing.assert_close(blk(c, s), 2.5 * c - 0.5 * s, rtol=0, atol=1e-12)


def test_m_block_shape_mismatch():
    with pytest.raises(ValueError):
        MBlock(2)(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 4))


def test_m_block_branches_have_distinct_parameters():
    blk = MBlock(2)
    assert blk.conv_c.weight.data_ptr() != blk.conv_s.weight.data_ptr()


# -- softmax split -----------------------------------------------------------

def test_zero_query_gives_uniform_attention():
    x = torch.randn(1, 5, 4)
    out = caam_split_vit(x, torch.zeros(4, 4), torch.randn(4, 4), torch.eye(4))
    assert torch.allclose(out.attn_pos, torch.full((1, 1, 5, 5), 0.2))
    assert torch.allclose(out.attn_neg, torch.full((1, 1, 5, 5), 0.2))
    mean_v = x.mean(dim=1, keepdim=True).expand_as(x)
    torch.testing.assert_close(out.causal, mean_v)
    assert torch.equal(out.causal, out.confounder)


def test_single_token():
    x = torch.randn(2, 1, 3)
    wv = torch.randn(3, 3)
    out = caam_split_vit(x, torch.randn(3, 3), torch.randn(3, 3), wv)
    assert torch.equal(out.attn_pos, torch.ones(2, 1, 1, 1))
    torch.testing.assert_close(out.causal, x @ wv.T)
    torch.testing.assert_close(out.confounder, x @ wv.T)


def test_two_token_hand_case():
    # d_k = 1 so the scale is 1; q = (1, 0) and k = (0, ln 2) give logits [[0, ln 2], [0, 0]]
    x = torch.eye(2)[None]
    w_q = torch.tensor([[1.0, 0.0]])
    w_k = torch.tensor([[0.0, math.log(2)]])
    w_v = torch.tensor([[1.0, 2.0]])
    out = caam_split_vit(x, w_q, w_k, w_v)
    np.testing.assert_allclose(out.attn_pos[0, 0, 0].numpy(), [1 / 3, 2 / 3], atol=1e-12)
    np.testing.assert_allclose(out.attn_neg[0, 0, 0].numpy(), [2 / 3, 1 / 3], atol=1e-12)
    np.testing.assert_allclose(out.attn_pos[0, 0, 1].numpy(), [0.5, 0.5], atol=1e-12)
    # v = (1, 2): c_0 = 1/3 + 4/3, s_0 = 2/3 + 2/3
    assert out.causal[0, 0, 0].item() == pytest.approx(5 / 3, abs=1e-12)
    assert out.confounder[0, 0, 0].item() == pytest.approx(4 / 3, abs=1e-12)


def test_vit_split_rejects_bad_shapes():
    with pytest.raises(ValueError):
        caam_split_vit(torch.randn(1, 3, 4), torch.zeros(0, 4), torch.zeros(0, 4), torch.zeros(0, 4))
    with pytest.raises(ValueError):
        caam_split_vit(torch.randn(1, 3, 4), torch.zeros(2, 5), torch.zeros(2, 5), torch.zeros(2, 5))
    with pytest.raises(LayoutError):
        caam_split_vit(torch.randn(1, 4), torch.zeros(2, 4), torch.zeros(2, 4), torch.zeros(2, 4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2, 4]))
def test_vit_attention_rows_sum_to_one(seed, heads):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 6, 8, generator=g)
    w = [3 * torch.randn(8, 8, generator=g) for _ in range(3)]
    out = caam_split_vit(x, *w, heads=heads)
    for attn in (out.attn_pos, out.attn_neg):
        assert (attn.sum(dim=-1) - 1).abs().max().item() <= 1e-6
        assert attn.shape == (2, heads, 6, 6)


# -- ViT block -----------------------------------------------------------------

def test_vit_block_combine_with_zero_mlps():
    blk = ViTCaaMBlock(4, 4)
    for mlp in (blk.mlp_c, blk.mlp_s):
        for p in mlp.parameters():
            torch.nn.init.zeros_(p)
    x, c_t, s_t = torch.randn(1, 3, 4), torch.randn(1, 3, 4), torch.randn(1, 3, 4)
    c, s, nxt = blk.combine(x, c_t, s_t)
    torch.testing.assert_close(c, c_t + x)
    torch.testing.assert_close(s, s_t)
    torch.testing.assert_close(nxt, c_t + x + s_t)


def test_vit_block_zero_input_zero_params():
    blk = ViTCaaMBlock(4, 4)
    with torch.no_grad():
        for p in blk.parameters():
            p.zero_()
    c, s, x = blk(torch.zeros(1, 4, 4))
    assert torch.equal(x, torch.zeros_like(x))
    assert torch.equal(c, torch.zeros_like(c)) and torch.equal(s, torch.zeros_like(s))


def test_vit_block_hand_trace():
    torch.manual_seed(3)
    blk = ViTCaaMBlock(4, 4)
    with torch.no_grad():
        blk.attn.q.weight.normal_()
    x = torch.randn(2, 4, 4)
    h = blk.norm_in(x)
    q, k, v = h @ blk.attn.q.weight.T, h @ blk.attn.k.weight.T, h @ blk.attn.v.weight.T
    logits = q @ k.transpose(1, 2) / 2.0
    c_hat = blk.attn.proj(torch.softmax(logits, -1) @ v)
    s_hat = blk.attn.proj(torch.softmax(-logits, -1) @ v)
    c_exp = blk.mlp_c(blk.norm_c(c_hat + x)) + c_hat + x
    s_exp = blk.mlp_s(blk.norm_s(s_hat)) + s_hat
    c, s, nxt = blk(x)
    torch.testing.assert_close(c, c_exp, rtol=0, atol=1e-12)
    torch.testing.assert_close(s, s_exp, rtol=0, atol=1e-12)
    torch.testing.assert_close(nxt, c_exp + s_exp, rtol=0, atol=1e-12)


def test_vit_block_separate_mlps():
    blk = ViTCaaMBlock(4, 4)
    assert blk.mlp_c[0].weight.data_ptr() != blk.mlp_s[0].weight.data_ptr()


def test_token_grid():
    attn = torch.softmax(torch.randn(2, 9, 9), dim=-1)
    grid = token_attention_to_grid(attn)
    assert grid.shape == (2, 3, 3)
    torch.testing.assert_close(grid.sum(dim=(1, 2)), torch.ones(2))
    with pytest.raises(ValueError):
        token_attention_to_grid(torch.ones(1, 5, 5))


# -- full networks -------------------------------------------------------------

SMALL_CNN = dict(image_size=32, block_channels=(16,), block_strides=(2,), stem_channels=8, reduction=4)


@pytest.mark.parametrize("attention", ["caam", "standard", "none"])
@pytest.mark.parametrize("layers", [1, 2])
def test_cnn_forward_shapes(attention, layers):
    model = build_model(BackboneConfig(attention=attention, num_caam_layers=layers, num_classes=5, **SMALL_CNN))
    out = model(torch.rand(3, 3, 32, 32, dtype=torch.float32))
    for logits in (out.logits_f, out.logits_g, out.logits_h):
        assert logits.shape == (3, 5)
    torch.testing.assert_close(out.mixed_feat, out.c_feat + out.s_feat)
    if attention == "none":
        assert out.attention is None
    else:
        assert out.attention.shape[0] == 3 and out.attention.dim() == 3


@pytest.mark.parametrize("attention", ["caam", "standard"])
def test_vit_forward_shapes(attention):
    cfg = BackboneConfig(kind="vit", attention=attention, num_classes=4, image_size=32, dim=16, d_k=16, patch_size=8)
    out = build_model(cfg)(torch.rand(2, 3, 32, 32, dtype=torch.float32))
    assert out.logits_g.shape == (2, 4)
    assert out.attention.shape == (2, 4, 4)


def test_skip_asymmetry_with_zeroed_caam():
    model = build_model(BackboneConfig(num_caam_layers=1, **SMALL_CNN), dtype=torch.float64).eval()
    dblk = model.backbone.d_blocks[0]
    with torch.no_grad():
        for p in dblk.caam.body.parameters():
            p.zero_()
    x = torch.rand(2, 3, 32, 32)
    feats = model.backbone.stem(x)
    for b in model.backbone.blocks:
        feats = b(feats)
    out = model(x)
    torch.testing.assert_close(out.c_feat, feats.mean(dim=(2, 3)))
    assert torch.equal(out.s_feat, torch.zeros_like(out.s_feat))


def test_zero_confounder_means_f_sees_causal_only():
    model = build_model(BackboneConfig(attention="none", **SMALL_CNN), dtype=torch.float64)
    out = model(torch.rand(2, 3, 32, 32))
    torch.testing.assert_close(out.logits_f, model.f(out.c_feat))


def test_forward_is_deterministic():
    cfg = BackboneConfig(**SMALL_CNN)
    img = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(0), dtype=torch.float32)
    a = build_model(cfg, seed=4).eval()(img)
    b = build_model(cfg, seed=4).eval()(img)
    for u, v in zip(a, b):
        assert torch.equal(u, v)


def test_batch_permutation_equivariance():
    model = build_model(BackboneConfig(**SMALL_CNN), dtype=torch.float64).eval()
    x = torch.rand(4, 3, 32, 32)
    perm = torch.tensor([2, 0, 3, 1])
    a, b = model(x), model(x[perm])
    torch.testing.assert_close(a.logits_g[perm], b.logits_g)


def test_bad_image_shape():
    model = build_model(BackboneConfig(**SMALL_CNN))
    with pytest.raises(ValueError):
        model(torch.rand(1, 3, 16, 16))


@pytest.mark.parametrize(
    "make",
    [
        lambda: CBAMLogits(3, reduction=1, zero_init=False),
        lambda: DBlock(3, is_init=True, reduction=1),
        lambda: MBlock(3),
        lambda: CBAM(3, reduction=1),
    ],
)
def test_block_gradients_match_finite_differences(make):
    torch.manual_seed(1)
    mod = make().double().eval()
    with torch.no_grad():
        for p in mod.parameters():
            p.add_(0.1 * torch.randn_like(p))
    x = torch.randn(1, 3, 4, 4, requires_grad=True)

    def scalar(inp):
        if isinstance(mod, MBlock):
            out = mod(inp, inp ** 2)
        else:
            out = mod(inp)
        if isinstance(out, tuple):
            out = out[0] * 1.3 + out[1] * 0.7
        return (out * torch.linspace(-1, 1, out.numel()).view_as(out)).sum()

    assert torch.autograd.gradcheck(scalar, (x,), eps=1e-6, atol=1e-7, rtol=1e-4)


def test_vit_block_gradients_match_finite_differences():
    torch.manual_seed(2)
    blk = ViTCaaMBlock(4, 4).double()
    with torch.no_grad():
        blk.attn.q.weight.normal_()
    x = torch.randn(1, 3, 4, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: sum(o.sum() for o in blk(t)), (x,), eps=1e-6, atol=1e-7, rtol=1e-4)
