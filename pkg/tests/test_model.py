import numpy as np
import pytest

from clipit.numeric import rowdot
from clipit.errors import BadMagic, ConfigInvalid, DimensionMismatch, InputError, TruncatedFile
from clipit.model import (
    VARIANTS,
    ClipItModel,
    LoraLinear,
    _affine_flops,
    branch_logits,
    count_cost,
    forward_joint,
    load_checkpoint,
    predict_unimodal,
    save_checkpoint,
)


# -- LoRA ---------------------------------------------------------------------


@pytest.mark.parametrize("d_in, d_out, r", [(4, 3, 1), (8, 8, 2), (16, 5, 4)])
def test_lora_zero_delta_is_base(rs, d_in, d_out, r):
    W, b = rs.normal(size=(d_out, d_in)), rs.normal(size=d_out)
    layer = LoraLinear(W, rs.normal(size=(r, d_in)), np.zeros((d_out, r)), 3.0, b)
    x = rs.normal(size=(100, d_in))
    assert np.max(np.abs(layer.forward(x) - (rowdot(x, W) + b))) == 0.0


def test_lora_hand_example():
    layer = LoraLinear(np.eye(2), [[1.0, 0.0]], [[0.0], [1.0]], 1.0, np.zeros(2))
    np.testing.assert_array_equal(layer.forward([1.0, 0.0]), [1.0, 1.0])


def test_lora_scaling_alpha_over_r():
    A = np.array([[1.0, 0.0], [0.0, 1.0]])
    B = np.eye(2)
    layer = LoraLinear(np.zeros((2, 2)), A, B, alpha=6.0)
    np.testing.assert_array_equal(layer.forward([1.0, 2.0]), [3.0, 6.0])


def test_lora_shape_checks():
    with pytest.raises(DimensionMismatch):
        LoraLinear(np.eye(2), np.ones((1, 3)), np.zeros((2, 1)), 1.0)
    with pytest.raises(DimensionMismatch):
        LoraLinear(np.eye(2), np.ones((1, 2)), np.zeros((2, 1)), 1.0).forward([1.0, 2.0, 3.0])


# -- joint forward --------------------------------------------------------------


def _unit(v):
    return v / np.linalg.norm(v)


def test_forward_matches_straight_line_calculation(rs):
    m = ClipItModel.init(3, 4, 2, rank=2, alpha=4.0, hidden=5, seed=9)
    for k, v in m.params.items():
        if k not in m.frozen:
            m.params[k] = rs.normal(size=v.shape)
    p = m.params
    xv, xt = rs.normal(size=3), rs.normal(size=4)
    v = p["fv.W"] @ xv + 2.0 * (p["fv.B"] @ (p["fv.A"] @ xv))
    t = p["ft.W"] @ xt + 2.0 * (p["ft.B"] @ (p["ft.A"] @ xt))
    t_hat = p["hd.W2"] @ np.tanh(p["hd.W1"] @ v + p["hd.b1"]) + p["hd.b2"]
    zt = p["ht.W"] @ t_hat + p["ht.b"]
    zv = p["hv.W"] @ v + p["hv.b"]
    z = p["g.W"] @ np.concatenate([zt, zv]) + p["g.b"]
    logits, t_got, t_hat_got = forward_joint(m, xv, xt)
    np.testing.assert_allclose(logits, z, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(t_got, t, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(t_hat_got, t_hat, rtol=1e-12, atol=1e-12)


def test_fusion_starts_as_average(rs):
    m = ClipItModel.init(6, 6, 3, seed=1)
    x = rs.normal(size=(4, 6))
    zv, zt = branch_logits(m, x)
    _, logits = predict_unimodal(m, x)
    np.testing.assert_allclose(logits, 0.5 * (zv + zt), rtol=0, atol=1e-15)


def test_fusion_selecting_vision_slot_gives_vision_head(rs):
    m = ClipItModel.init(6, 6, 3, seed=2)
    C = 3
    m.params["g.W"] = np.hstack([np.zeros((C, C)), np.eye(C)])
    x = rs.normal(size=(10, 6))
    zv, _ = branch_logits(m, x)
    cls, _ = predict_unimodal(m, x)
    np.testing.assert_array_equal(cls, np.argmax(zv, axis=1))


@pytest.mark.parametrize("variant", ["standard", "no_lora", "early_fusion", "direct_distill", "arch_only"])
def test_unimodal_matches_joint_logits(rs, variant):
    m = ClipItModel.init(8, 5, 3, rank=2, variant=variant, seed=4)
    for k, v in m.params.items():
        if k not in m.frozen:
            m.params[k] = rs.normal(size=v.shape)
    xv, xt = rs.normal(size=(20, 8)), rs.normal(size=(20, 5))
    joint, _, _ = forward_joint(m, xv, xt)
    _, uni = predict_unimodal(m.unimodal(), xv)
    np.testing.assert_array_equal(uni, joint)


def test_unimodal_ignores_text_input(rs):
    m = ClipItModel.init(4, 4, 2, seed=0)
    xv = rs.normal(size=(3, 4))
    a, _, _ = forward_joint(m, xv, rs.normal(size=(3, 4)))
    b, _, _ = forward_joint(m, xv, rs.normal(size=(3, 4)))
    np.testing.assert_array_equal(a, b)


def test_unimodal_drops_text_side():
    for variant in VARIANTS:
        uni = ClipItModel.init(4, 6, 2, variant=variant).unimodal()
        assert not any(k.startswith(("ft.", "dd.")) for k in uni.params)
    dd = ClipItModel.init(4, 6, 2, variant="direct_distill").unimodal()
    assert not any(k.startswith(("hd.", "ht.", "g.")) for k in dd.params)


def test_init_validation():
    with pytest.raises(ConfigInvalid):
        ClipItModel.init(4, 4, 1)
    with pytest.raises(ConfigInvalid):
        ClipItModel.init(4, 4, 2, variant="bogus")
    with pytest.raises(ConfigInvalid):
        ClipItModel.init(4, 4, 2, rank=0)


# -- cost -----------------------------------------------------------------------


def test_affine_cost_definition():
    assert _affine_flops(4, 3) == 24
    assert 4 * 3 + 3 == 15


def test_lora_trainable_count():
    m = ClipItModel.init(4, 4, 2, rank=2)
    assert m.params["fv.A"].size + m.params["fv.B"].size == 2 * (4 + 4)


def test_default_cost_by_summation():
    m = ClipItModel.init(64, 64, 2, rank=8)
    lora = 64 * 64 + 8 * 64 + 64 * 8
    heads = 2 * (2 * 64 + 2)
    hd = 64 * 64 + 64 + 64 * 64 + 64
    g = 2 * 4 + 2
    cost = count_cost(m)
    assert cost.param_total == 2 * lora + heads + hd + g == 18830
    assert cost.param_trainable == cost.param_total - 2 * 64 * 64
    lora_f = 2 * 64 * 64 + 2 * 64 * 8 + 2 * 8 * 64
    uni_f = lora_f + (2 * 64 * 64 + 64 + 2 * 64 * 64) + 2 * 64 * 2 + 2 * 64 * 2 + 2 * 4 * 2
    assert cost.flops_unimodal == uni_f == 27216
    assert cost.flops_text_branch == lora_f


# -- checkpoints ----------------------------------------------------------------


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("unimodal", [False, True])
def test_checkpoint_roundtrip(tmp_path, rs, variant, unimodal):
    m = ClipItModel.init(5, 7, 3, rank=2, alpha=3.5, lam=0.25, variant=variant, seed=8)
    for k, v in m.params.items():
        m.params[k] = rs.normal(size=v.shape)
    if unimodal:
        m = m.unimodal()
    save_checkpoint(m, tmp_path / "m.cipm")
    back = load_checkpoint(tmp_path / "m.cipm")
    assert (back.d_v, back.d_t, back.hidden, back.n_classes, back.rank, back.alpha, back.lam, back.variant) == \
        (m.d_v, m.d_t, m.hidden, m.n_classes, m.rank, m.alpha, m.lam, m.variant)
    assert back.params.keys() == m.params.keys()
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])


def test_unimodal_checkpoint_is_smaller(tmp_path):
    m = ClipItModel.init(16, 16, 2)
    save_checkpoint(m, tmp_path / "full.cipm")
    save_checkpoint(m.unimodal(), tmp_path / "uni.cipm")
    assert (tmp_path / "uni.cipm").stat().st_size < (tmp_path / "full.cipm").stat().st_size


def test_checkpoint_errors(tmp_path):
    save_checkpoint(ClipItModel.init(4, 4, 2), tmp_path / "m.cipm")
    raw = (tmp_path / "m.cipm").read_bytes()
    (tmp_path / "bad.cipm").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        load_checkpoint(tmp_path / "bad.cipm")
    (tmp_path / "cut.cipm").write_bytes(raw[:-9])
    with pytest.raises(TruncatedFile):
        load_checkpoint(tmp_path / "cut.cipm")


def test_checkpoint_shape_validation(tmp_path):
    m = ClipItModel.init(4, 4, 2)
    m.params["hv.W"] = np.zeros((2, 5))
    save_checkpoint(m, tmp_path / "m.cipm")
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "m.cipm")
