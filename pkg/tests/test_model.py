import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_model_config
from d2aunet import ops
from d2aunet.gradcheck import gradcheck
from d2aunet.losses import seg_loss
from d2aunet.model import (
    HDC,
    RAB,
    D2AUNet,
    DecoderStage,
    EncoderSpec,
    ModelConfig,
    RABSpec,
    count_params_flops,
    equivalent_kernel_size,
    format_cost_report,
    full_resnext_config,
    full_vgg_config,
    theoretical_receptive_field,
)
from d2aunet.ops import ConvSpec, ShapeError
from d2aunet.selftest import hdc_gradient_support
from d2aunet.tensor import Tensor


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- kernel arithmetic --------------------------------------------------------


def test_equivalent_kernel_examples():
    assert [equivalent_kernel_size(3, n) for n in (1, 2, 5)] == [3, 5, 11]
    assert all(equivalent_kernel_size(1, n) == 1 for n in range(1, 10))


@given(st.integers(1, 9), st.integers(1, 9))
def test_equivalent_kernel_formula(k, n):
    assert equivalent_kernel_size(k, n) == k + (k - 1) * (n - 1)


def test_receptive_field_examples():
    assert theoretical_receptive_field([(3, 1), (3, 2), (3, 5)]) == 17
    assert theoretical_receptive_field([(3, 1)]) == 3


def _support_box(support):
    rows, cols = np.nonzero(support)
    box = support[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1]
    return box.shape, bool(box.all())


def test_hdc_gradient_support_is_dense_17x17():
    shape, dense = _support_box(hdc_gradient_support())
    assert shape == (17, 17) and dense


def test_uniform_dilation_stack_has_holes():
    shape, dense = _support_box(hdc_gradient_support(dilations=(5, 5, 5)))
    assert shape == (31, 31) and not dense


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3))
def test_support_extent_matches_theory(dilations):
    support = hdc_gradient_support(size=35, dilations=tuple(dilations))
    shape, _ = _support_box(support)
    assert shape[0] == shape[1] == theoretical_receptive_field([(3, d) for d in dilations])


# -- HDC / RAB ----------------------------------------------------------------


@given(st.integers(1, 12), st.integers(1, 12))
def test_hdc_preserves_shape(h, w):
    hdc = HDC(RABSpec(2, norm=False), np.random.default_rng(0))
    assert hdc(Tensor(np.ones((1, 2, h, w), np.float32))).shape == (1, 2, h, w)


def test_hdc_identity_kernels_pass_nonnegative_input(rng):
    hdc = HDC(RABSpec(2, norm=False)).astype(np.float64)
    for block in hdc.convs:
        w = np.zeros(block.conv.weight.shape)
        w[[0, 1], [0, 1], 1, 1] = 1.0
        block.conv.weight.data[...] = w
    x = rng.random((1, 2, 9, 9))
    np.testing.assert_array_equal(hdc(T(x)).data, x)
    np.testing.assert_array_equal(hdc(T(x - 0.5)).data, np.maximum(x - 0.5, 0))


def test_hdc_channel_mismatch():
    with pytest.raises(ShapeError):
        HDC(RABSpec(2))(T(np.ones((1, 3, 4, 4))))


def test_rab_zero_hdc_is_identity(rng):
    rab = RAB(RABSpec(8, reduce_ratio=2), rng).astype(np.float64)
    for block in rab.hdc.convs:
        block.conv.weight.data[...] = 0.0
    x = T(rng.standard_normal((1, 8, 16, 16)))
    y = rab(x)
    assert y.shape == (1, 8, 16, 16)
    np.testing.assert_array_equal(y.data, x.data)


def test_rab_gradcheck(rng):
    rab = RAB(RABSpec(2, reduce_ratio=2), rng).astype(np.float64)
    x = T(rng.standard_normal((2, 2, 6, 6)), grad=True)
    r = Tensor(rng.standard_normal((2, 2, 6, 6)))
    assert gradcheck(lambda: ops.sum_all(ops.mul(rab(x), r)), [x] + rab.parameters(), max_entries=16) < 1e-4


def test_gam_dam_rab_chain_gradcheck(rng):
    from d2aunet.attention import DecoderAttention, GateAttention

    gam = GateAttention(2, 3, 2, rng).astype(np.float64)
    dam = DecoderAttention(2, 2, rng).astype(np.float64)
    rab = RAB(RABSpec(2, reduce_ratio=2), rng).astype(np.float64)
    f = T(rng.standard_normal((2, 2, 6, 6)), grad=True)
    g = T(rng.standard_normal((2, 3, 3, 3)), grad=True)
    r = Tensor(rng.standard_normal((2, 2, 6, 6)))
    params = gam.parameters() + dam.parameters() + rab.parameters()
    err = gradcheck(lambda: ops.sum_all(ops.mul(rab(dam(gam(f, g))), r)), [f, g] + params, max_entries=10)
    assert err < 1e-4


# -- decoder stage ------------------------------------------------------------


def test_decoder_stage_shape():
    cfg = ModelConfig()
    stage = DecoderStage(64, 32, 32, cfg, np.random.default_rng(0))
    y = stage(Tensor(np.ones((1, 64, 8, 8), np.float32)), Tensor(np.ones((1, 32, 16, 16), np.float32)))
    assert y.shape == (1, 32, 16, 16)


def test_decoder_stage_rejects_extent_mismatch():
    stage = DecoderStage(4, 2, 2, tiny_model_config(), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        stage(Tensor(np.ones((1, 4, 4, 4), np.float32)), Tensor(np.ones((1, 2, 6, 6), np.float32)))


def test_zeroed_attention_does_not_zero_stage_output(rng):
    stage = DecoderStage(3, 2, 2, tiny_model_config(), rng).astype(np.float64)
    for mod in (stage.up_dam, stage.gam, stage.rab.dam):
        for p in mod.parameters():
            p.data[...] = 0.0
    y = stage(T(rng.standard_normal((2, 3, 4, 4))), T(rng.standard_normal((2, 2, 8, 8))))
    assert np.abs(y.data).max() > 0


def test_decoder_stage_gradcheck(rng):
    stage = DecoderStage(3, 2, 2, tiny_model_config(), rng).astype(np.float64)
    deep = T(rng.standard_normal((2, 3, 3, 3)), grad=True)
    skip = T(rng.standard_normal((2, 2, 6, 6)), grad=True)
    r = Tensor(rng.standard_normal((2, 2, 6, 6)))
    err = gradcheck(lambda: ops.sum_all(ops.mul(stage(deep, skip), r)), [deep, skip] + stage.parameters(),
                    max_entries=12)
    assert err < 1e-4


# -- full model ---------------------------------------------------------------


def test_toy_model_output_shape():
    model = D2AUNet(ModelConfig(), seed=0)
    assert model(Tensor(np.zeros((2, 1, 64, 64), np.float32))).shape == (2, 1, 64, 64)


@given(st.integers(1, 4), st.integers(1, 3))
def test_logits_match_input_extent(mult_h, mult_w):
    model = D2AUNet(tiny_model_config(), seed=0).eval()
    x = Tensor(np.zeros((1, 1, 2 * mult_h, 2 * mult_w), np.float32))
    assert model(x).shape == x.shape


def test_model_rejects_indivisible_extent_and_color():
    model = D2AUNet(ModelConfig(), seed=0)
    with pytest.raises(ShapeError, match="divisible by 16"):
        model(Tensor(np.zeros((1, 1, 40, 40), np.float32)))
    with pytest.raises(ShapeError, match="grayscale"):
        model(Tensor(np.zeros((1, 3, 64, 64), np.float32)))


def test_forward_is_bit_deterministic(rng):
    x = Tensor(rng.random((2, 1, 32, 32)).astype(np.float32))
    a = D2AUNet(ModelConfig(), seed=7)(x).data
    b = D2AUNet(ModelConfig(), seed=7)(x).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, D2AUNet(ModelConfig(), seed=8)(x).data)


def test_head_bias_starts_at_zero():
    assert not D2AUNet(ModelConfig(), seed=0).head.bias.data.any()


def test_two_stage_model_gradcheck(rng):
    model = D2AUNet(tiny_model_config(), seed=0).astype(np.float64)
    x = T(rng.random((2, 1, 8, 8)))
    target = (rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64)
    assert gradcheck(lambda: seg_loss(model(x), target), model.parameters(), max_entries=8) < 1e-4


def test_resnext_encoder_shape():
    cfg = ModelConfig(encoder=EncoderSpec("resnext", (8, 16, 16, 32, 32), resnext_blocks=(1, 1, 1, 1),
                                          cardinality=4), reduce_ratio=4, input_size=32)
    model = D2AUNet(cfg, seed=0).eval()
    assert model(Tensor(np.zeros((1, 1, 32, 32), np.float32))).shape == (1, 1, 32, 32)
    with pytest.raises(ShapeError, match="divisible by 32"):
        model(Tensor(np.zeros((1, 1, 48, 48), np.float32)))


def test_encoder_spec_validation():
    with pytest.raises(ValueError):
        EncoderSpec("vgg", (8,))
    with pytest.raises(ValueError):
        EncoderSpec("resnext", (8, 16, 32))
    with pytest.raises(ValueError):
        EncoderSpec("unet")
    with pytest.raises(ValueError):
        ModelConfig(input_size=40)


# -- analytic cost --------------------------------------------------------------


def test_single_conv_cost_closed_form():
    spec = ConvSpec.same(1, 1, 3)
    assert spec.num_params() == 10
    assert spec.macs(448, 448) == 9 * 448 * 448


def test_flops_scale_with_area_params_do_not():
    cfg = ModelConfig()
    p1, f1 = count_params_flops(cfg, 64)
    p2, f2 = count_params_flops(cfg, 128)
    assert p1 == p2
    # conv work quadruples with 4x area; the tiny MLP work inside attention does not scale
    assert abs(f2 / f1 - 4) < 1e-3


def test_analytic_count_agrees_with_model_and_runtime_counter():
    cfg = ModelConfig()
    params, flops = count_params_flops(cfg, 64)
    model = D2AUNet(cfg, seed=0)
    assert params == model.num_params()
    with ops.count_macs() as macs:
        model(Tensor(np.zeros((1, 1, 64, 64), np.float32)))
    assert flops == sum(macs)


def test_full_scale_cost_within_tolerance():
    params, flops = count_params_flops(full_vgg_config(), 448)
    assert abs(params / 8.95e6 - 1) <= 0.15
    assert abs(flops / 53.19e9 - 1) <= 0.15
    params, flops = count_params_flops(full_resnext_config(), 448)
    assert abs(params / 90.05e6 - 1) <= 0.15
    assert abs(flops / 149.97e9 - 1) <= 0.15


def test_cost_report_mentions_totals():
    text = format_cost_report(ModelConfig(), 64)
    assert "params" in text.lower() and "flops" in text.lower()
