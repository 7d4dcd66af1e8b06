import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewshot_lab.autograd import Tensor
from fewshot_lab.errors import ConfigError, DimensionError
from fewshot_lab.layers import (
    AAConv2d,
    AttentionGate,
    FireModule,
    InceptionModule,
    MultiHeadSelfAttention2d,
    RecurrentResidualUnit,
)

from oracles import attention_loops, recurrent_unit_steps

ORACLE_CASES = settings(max_examples=100, deadline=None, derandomize=True)


# ---------------------------------------------------------------------------
# multi-head self-attention

def test_mhsa_single_token_attention_is_one():
    rng = np.random.default_rng(0)
    layer = MultiHeadSelfAttention2d("m", 3, rng, heads=2, d_k=4, d_v=4)
    x = Tensor(rng.normal(size=(2, 3, 1, 1)))
    out, attn = layer(x, return_attention=True)
    assert out.shape == (2, 8, 1, 1)
    assert np.array_equal(attn, np.ones((2, 2, 1, 1)))


def test_mhsa_attention_rows_sum_to_one():
    rng = np.random.default_rng(1)
    layer = MultiHeadSelfAttention2d("m", 4, rng, heads=2, d_k=8, d_v=8)
    x = Tensor(rng.normal(size=(2, 4, 5, 5)) * 3)
    _, attn = layer(x, return_attention=True)
    np.testing.assert_allclose(attn.sum(axis=3), 1.0, rtol=0, atol=1e-12)


@ORACLE_CASES
@given(st.integers(0, 2**31 - 1), st.integers(1, 2), st.integers(1, 2),
       st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_mhsa_matches_token_pair_oracle(seed, h, w, cin, d_k, heads):
    rng = np.random.default_rng(seed)
    layer = MultiHeadSelfAttention2d("m", cin, rng, heads=heads, d_k=d_k, d_v=d_k)
    x = rng.normal(size=(1, cin, h, w))
    got = layer(Tensor(x)).data
    tokens = x[0].reshape(cin, h * w).T  # [T, C]
    want = attention_loops(tokens, layer.w_q.data, layer.w_k.data,
                           layer.w_v.data, layer.w_o.data, heads, d_k, d_k)
    got_tokens = got[0].reshape(heads * d_k, h * w).T
    assert np.abs(got_tokens - want).max() < 1e-9


def test_mhsa_channel_mismatch():
    layer = MultiHeadSelfAttention2d("m", 4, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        layer(Tensor(np.ones((1, 3, 2, 2))))


# ---------------------------------------------------------------------------
# attention-augmented convolution

@pytest.mark.parametrize("conv_channels,heads,d_v", [(2, 1, 2), (4, 2, 3), (8, 2, 8)])
def test_aa_conv_output_channel_arithmetic(conv_channels, heads, d_v):
    rng = np.random.default_rng(2)
    layer = AAConv2d("aa", 3, conv_channels, rng, heads=heads, d_k=4, d_v=d_v)
    out = layer(Tensor(rng.normal(size=(2, 3, 6, 6))))
    assert out.shape == (2, conv_channels + heads * d_v, 6, 6)


def test_aa_conv_zero_value_projection_isolates_branches():
    rng = np.random.default_rng(3)
    layer = AAConv2d("aa", 3, 4, rng, heads=2, d_k=4, d_v=4)
    layer.attn.w_v.data[...] = 0.0
    x = Tensor(rng.normal(size=(1, 3, 5, 5)))
    out = layer(x).data
    conv_only = layer.conv(x).data
    assert np.array_equal(out[:, :4], conv_only)
    assert np.array_equal(out[:, 4:], np.zeros((1, 8, 5, 5)))


# ---------------------------------------------------------------------------
# recurrent-residual unit

def test_recurrent_unit_t0_is_residual_plain_conv():
    rng = np.random.default_rng(4)
    unit = RecurrentResidualUnit("r", 2, rng, t_steps=0)
    x = Tensor(rng.normal(size=(1, 2, 5, 5)))
    want = x.data + np.maximum(unit.conv_f(x).data, 0.0)
    assert np.array_equal(unit(x).data, want)


def test_recurrent_unit_zero_recurrent_weights_is_t_invariant():
    rng = np.random.default_rng(5)
    outs = []
    for t in (0, 1, 2, 3):
        unit = RecurrentResidualUnit("r", 2, np.random.default_rng(5), t_steps=t)
        unit.conv_r.weight.data[...] = 0.0
        x = Tensor(np.random.default_rng(6).normal(size=(1, 2, 4, 4)))
        outs.append(unit(x).data)
    for other in outs[1:]:
        assert np.array_equal(outs[0], other)


@ORACLE_CASES
@given(st.integers(0, 2**31 - 1), st.integers(0, 2))
def test_recurrent_unit_matches_unrolled_oracle(seed, t_steps):
    rng = np.random.default_rng(seed)
    unit = RecurrentResidualUnit("r", 2, rng, t_steps=t_steps)
    x = rng.normal(size=(1, 2, 5, 5))
    got = unit(Tensor(x)).data
    want = recurrent_unit_steps(x, unit.conv_f.weight.data, unit.conv_f.bias.data,
                                unit.conv_r.weight.data, t_steps)
    assert np.abs(got - want).max() < 1e-9


def test_recurrent_unit_channel_mismatch():
    unit = RecurrentResidualUnit("r", 2, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        unit(Tensor(np.ones((1, 3, 4, 4))))


# ---------------------------------------------------------------------------
# attention gate

def test_attention_gate_saturated_bias_is_identity():
    rng = np.random.default_rng(7)
    gate = AttentionGate("g", 3, 2, rng)
    gate.conv_psi.weight.data[...] = 0.0
    gate.conv_psi.bias.data[...] = 50.0
    g = Tensor(rng.normal(size=(1, 3, 4, 4)))
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    assert np.abs(gate(g, x).data - x.data).max() < 1e-6


def test_attention_gate_coefficients_in_open_unit_interval():
    rng = np.random.default_rng(8)
    gate = AttentionGate("g", 3, 2, rng)
    g = Tensor(rng.normal(size=(2, 3, 4, 4)) * 5)
    x = Tensor(rng.normal(size=(2, 2, 4, 4)) * 5)
    alpha = gate.coefficients(g, x).data
    assert alpha.shape == (2, 1, 4, 4)
    assert (alpha > 0).all() and (alpha < 1).all()


def test_attention_gate_hand_computed_2x2():
    rng = np.random.default_rng(9)
    gate = AttentionGate("g", 1, 1, rng, inter=1)
    g = rng.normal(size=(1, 1, 2, 2))
    x = rng.normal(size=(1, 1, 2, 2))
    got = gate(Tensor(g), Tensor(x)).data

    # scalar arithmetic with the layer's own parameters
    wg = gate.conv_g.weight.data[0, 0, 0, 0]
    bg = gate.conv_g.bias.data[0]
    wx = gate.conv_x.weight.data[0, 0, 0, 0]
    bx = gate.conv_x.bias.data[0]
    wp = gate.conv_psi.weight.data[0, 0, 0, 0]
    bp = gate.conv_psi.bias.data[0]
    want = np.zeros((1, 1, 2, 2))
    for i in range(2):
        for j in range(2):
            pre = max(wg * g[0, 0, i, j] + bg + wx * x[0, 0, i, j] + bx, 0.0)
            alpha = 1.0 / (1.0 + np.exp(-(wp * pre + bp)))
            want[0, 0, i, j] = x[0, 0, i, j] * alpha
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_attention_gate_bounds_output_by_input():
    rng = np.random.default_rng(10)
    gate = AttentionGate("g", 2, 3, rng)
    g = Tensor(rng.normal(size=(1, 2, 2, 2)))
    x = Tensor(rng.normal(size=(1, 3, 4, 4)))
    out = gate(g, x).data  # upsampled gate path
    assert (np.abs(out) <= np.abs(x.data)).all()


def test_attention_gate_unalignable_shapes():
    gate = AttentionGate("g", 2, 2, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        gate(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 2, 4, 4))))


# ---------------------------------------------------------------------------
# fire module

@pytest.mark.parametrize("split", [0.25, 0.5, 0.75])
def test_fire_sr_0125_output_channels(split):
    rng = np.random.default_rng(11)
    fire = FireModule("f", 16, 16, 128, rng, split=split)
    assert fire.sr_ratio == 0.125
    out = fire(Tensor(rng.normal(size=(1, 16, 4, 4))))
    assert out.shape == (1, 128, 4, 4)


def test_fire_sr_075_equal_split_bank_widths():
    rng = np.random.default_rng(12)
    fire = FireModule("f", 16, 12, 16, rng, split=0.5)
    assert fire.sr_ratio == 0.75
    assert fire.expand1.weight.shape == (8, 12, 1, 1)
    assert fire.expand3.weight.shape == (8, 12, 3, 3)


def test_fire_zero_weights_simple_bypass_is_identity():
    rng = np.random.default_rng(13)
    fire = FireModule("f", 8, 2, 8, rng, bypass="simple")
    for p in fire.parameters():
        p.data[...] = 0.0
    x = Tensor(rng.normal(size=(2, 8, 5, 5)))
    assert np.array_equal(fire(x).data, x.data)


def test_fire_bypass_channel_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        FireModule("f", 6, 2, 8, np.random.default_rng(0), bypass="simple")


def test_fire_complex_bypass_is_declared_but_unsupported():
    with pytest.raises(ConfigError) as err:
        FireModule("f", 8, 2, 8, np.random.default_rng(0), bypass="complex")
    assert "complex" in str(err.value)


def test_fire_unknown_bypass():
    with pytest.raises(ConfigError):
        FireModule("f", 8, 2, 8, np.random.default_rng(0), bypass="weird")


# ---------------------------------------------------------------------------
# inception module

def test_inception_shape_contract():
    rng = np.random.default_rng(14)
    mod = InceptionModule("i", 5, rng)
    out = mod(Tensor(rng.normal(size=(10, 5, 7, 7))))
    assert out.shape == (10, 256, 7, 7)


def test_inception_branch_widths_are_64():
    mod = InceptionModule("i", 5, np.random.default_rng(15))
    assert mod.b1.weight.shape[0] == 64
    assert mod.b2.weight.shape[0] == 64
    assert mod.b3_b.weight.shape[0] == 64
    assert mod.b4.weight.shape[0] == 64
    assert mod.out_channels == 256


def test_inception_branch_isolation():
    rng = np.random.default_rng(16)
    mod = InceptionModule("i", 3, rng)
    for name, p in mod.named_parameters().items():
        if ".b1." not in name:
            p.data[...] = 0.0
    x = Tensor(rng.uniform(0.5, 1.0, size=(2, 3, 7, 7)))
    out = mod(x).data
    assert np.abs(out[:, :64]).max() > 0.0
    assert np.array_equal(out[:, 64:], np.zeros((2, 192, 7, 7)))


def test_inception_wrong_spatial_size():
    mod = InceptionModule("i", 3, np.random.default_rng(17))
    with pytest.raises(DimensionError):
        mod(Tensor(np.ones((1, 3, 8, 8))))
