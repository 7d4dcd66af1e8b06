import numpy as np
import pytest

from fewshot_lab import autograd as ag
from fewshot_lab.autograd import Tensor
from fewshot_lab.backbones import (
    BACKBONE_KINDS,
    BackboneConfig,
    build_backbone,
)
from fewshot_lab.errors import ConfigError, DimensionError


def images(rng, batch):
    return Tensor(rng.uniform(0.0, 1.0, size=(batch, 1, 28, 28)))


@pytest.mark.parametrize("kind", BACKBONE_KINDS)
def test_embedding_contract(kind):
    rng = np.random.default_rng(0)
    model = build_backbone(BackboneConfig(kind=kind), np.random.default_rng(1))
    batch = model.embed(images(rng, 3))
    assert batch.values.shape == (3, 64)
    assert batch.kind == kind
    assert np.isfinite(batch.values.data).all()


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError):
        BackboneConfig(kind="vgg").validate()


def test_wrong_input_shape_rejected():
    model = build_backbone(BackboneConfig(kind="unet"), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        model(Tensor(np.ones((2, 1, 32, 32))))


def test_unet_channel_progression_and_parameter_count():
    model = build_backbone(BackboneConfig(kind="unet", width=1), np.random.default_rng(2))
    # blocks at 8 -> 16 -> 32 channels, 3x3 kernels, then 32*3*3 -> 64 head
    expected = 0
    cin = 1
    for c in (8, 16, 32):
        expected += c * cin * 9 + c      # conv1 + bias
        expected += c * c * 9 + c        # conv2 + bias
        cin = c
    expected += 32 * 9 * 64 + 64         # fc
    assert model.param_count() == expected == 36536
    assert model.blocks[0].conv1.weight.shape == (8, 1, 3, 3)
    assert model.blocks[1].conv1.weight.shape == (16, 8, 3, 3)
    assert model.blocks[2].conv1.weight.shape == (32, 16, 3, 3)


def test_unet_aa_substitution_is_local_to_first_conv():
    plain = build_backbone(BackboneConfig(kind="unet"), np.random.default_rng(3))
    aa = build_backbone(BackboneConfig(kind="unet", aa_depth=1), np.random.default_rng(3))
    plain_names = set(plain.named_parameters())
    aa_names = set(aa.named_parameters())
    changed_plain = {n for n in plain_names - aa_names}
    changed_aa = {n for n in aa_names - plain_names}
    assert all(n.startswith("backbone.block1.conv1") for n in changed_plain | changed_aa)
    out = aa(images(np.random.default_rng(4), 2))
    assert out.shape == (2, 64)


def test_unet_aa_substitution_channel_budget():
    # heads*d_v must leave conv channels at width 1 (block width 8)
    with pytest.raises(ConfigError):
        build_backbone(BackboneConfig(kind="unet", aa_depth=1, attn_d_v=8),
                       np.random.default_rng(0))


def test_aa_depth_only_for_unet_family():
    with pytest.raises(ConfigError):
        BackboneConfig(kind="squeeze", aa_depth=1).validate()


def test_squeeze_parameter_counts_by_sr_ratio():
    fast = build_backbone(BackboneConfig(kind="squeeze", sr_ratio=0.125),
                          np.random.default_rng(5))
    accurate = build_backbone(BackboneConfig(kind="squeeze", sr_ratio=0.75),
                              np.random.default_rng(5))
    assert fast.param_count() < accurate.param_count()


def test_squeeze_expand_1x1_is_ninth_of_3x3_per_filter():
    model = build_backbone(BackboneConfig(kind="squeeze", sr_ratio=0.5,
                                          expand_split=0.5),
                           np.random.default_rng(6))
    fire = model.fires[0]
    w1 = fire.expand1.weight
    w3 = fire.expand3.weight
    assert w1.shape[0] == w3.shape[0]  # equal channel split
    per_filter_1x1 = w1.data[0].size
    per_filter_3x3 = w3.data[0].size
    assert per_filter_3x3 == 9 * per_filter_1x1


def test_inception_shape_chain_and_eval_determinism():
    model = build_backbone(BackboneConfig(kind="inception"), np.random.default_rng(7))
    x = images(np.random.default_rng(8), 10)
    stem = ag.relu(model.stem2(ag.relu(model.stem1(x))))
    assert stem.shape[2:] == (7, 7)
    mid = model.inception(stem)
    assert mid.shape == (10, 256, 7, 7)
    flat = ag.flatten(mid)
    assert flat.shape == (10, 12544)
    assert model(x).shape == (10, 64)

    model.eval()
    a = model(x).data
    b = model(x).data
    assert np.array_equal(a, b)


def test_inception_leaky_slope_observable():
    model = build_backbone(BackboneConfig(kind="inception"), np.random.default_rng(9))
    model.eval()
    # force every pre-activation feature to -1: zero fc, bias -1, identity bn
    model.fc.weight.data[...] = 0.0
    model.fc.bias.data[...] = -1.0
    model.bn.running_mean[...] = 0.0
    model.bn.running_var[...] = 1.0 - model.bn.eps
    out = model(images(np.random.default_rng(10), 2)).data
    np.testing.assert_allclose(out, -model.leaky_slope, rtol=0, atol=1e-12)


def test_r2u_t0_equals_residual_plain_conv_encoder():
    model = build_backbone(BackboneConfig(kind="r2u", t_steps=0),
                           np.random.default_rng(11))
    x = images(np.random.default_rng(12), 2)
    h = x
    for lift, unit in zip(model.lifts, model.units):
        lifted = lift(h)
        manual = Tensor(lifted.data + np.maximum(unit.conv_f(lifted).data, 0.0))
        h = ag.maxpool2d(manual, 2, 2)
    want = model.fc(ag.flatten(h)).data
    assert np.array_equal(model(x).data, want)


def test_r2u_peak_memory_below_256mib():
    model = build_backbone(BackboneConfig(kind="r2u", width=1),
                           np.random.default_rng(13))
    x = images(np.random.default_rng(14), 10)
    ag.reset_peak_memory()
    before = ag.memory_stats()[1]
    out = model(x)
    loss = ag.sum_(out)
    ag.backward(loss)
    peak = ag.memory_stats()[1]
    assert peak - before < 256 * 1024 * 1024


@pytest.mark.parametrize("kind", BACKBONE_KINDS)
def test_batch_independence_in_eval_mode(kind):
    rng = np.random.default_rng(15)
    model = build_backbone(BackboneConfig(kind=kind), np.random.default_rng(16))
    model.eval()
    x = rng.uniform(size=(1, 1, 28, 28))
    other1 = rng.uniform(size=(1, 1, 28, 28))
    other2 = rng.uniform(size=(1, 1, 28, 28))
    e1 = model(Tensor(np.concatenate([x, other1]))).data[0]
    e2 = model(Tensor(np.concatenate([x, other2]))).data[0]
    assert np.abs(e1 - e2).max() < 1e-9


def test_attention_unet_saturated_gates_reduce_to_plain_unet():
    plain = build_backbone(BackboneConfig(kind="unet"), np.random.default_rng(17))
    gated = build_backbone(BackboneConfig(kind="attention_unet"), np.random.default_rng(18))
    plain_params = plain.named_parameters()
    for name, p in gated.named_parameters().items():
        if ".gate" in name:
            continue
        p.data[...] = plain_params[name].data
    for gate in gated.gates:
        gate.conv_psi.weight.data[...] = 0.0
        gate.conv_psi.bias.data[...] = 50.0
    x = images(np.random.default_rng(19), 3)
    delta = np.abs(gated(x).data - plain(x).data).max()
    assert delta < 1e-4


def test_attention_unet_gate_coefficients_in_unit_interval():
    model = build_backbone(BackboneConfig(kind="attention_unet"), np.random.default_rng(20))
    x = images(np.random.default_rng(21), 2)
    b1, b2, _ = model.blocks
    f1 = b1(x)
    f2_pre = b2(ag.maxpool2d(f1, 2, 2))
    alpha = model.gates[0].coefficients(f2_pre, f1).data
    assert (alpha > 0).all() and (alpha < 1).all()


def test_parameter_names_unique_per_model():
    for kind in BACKBONE_KINDS:
        model = build_backbone(BackboneConfig(kind=kind), np.random.default_rng(22))
        names = list(model.named_parameters())
        assert len(names) == len(set(names))
        assert all(n.startswith("backbone.") for n in names)
