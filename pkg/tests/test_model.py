import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.lib.stride_tricks import sliding_window_view

from anct import autodiff as ad
from anct.attributes import ATTRIBUTE_NAMES
from anct.model import (
    Model,
    ModelConfig,
    ValidationError,
    active_params,
    ascmm_aux_predict,
    backbone_forward,
    compute_loss,
    init_model_params,
    param_layout,
)

from helpers import stencil_grad_check

TINY = dict(channel_preset="tiny", attention_hidden=16, head_hidden=16)


def tiny_model(seed=0, dtype=np.float64, **kw):
    return Model.create(ModelConfig(**{**TINY, **kw}), seed=seed, dtype=dtype)


def random_volume(m, seed=0):
    return np.random.default_rng(seed).standard_normal((m, 64, 64))


# --------------------------------------------------------------------------
# independent numpy forward pass (sliding windows + einsum)


def np_sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def oracle_forward(volume, params, config):
    P = {k: np.asarray(v.data, dtype=np.float64) for k, v in params.items()}
    x = volume[..., None].astype(np.float64)
    for i in range(4):
        k, b = P[f"backbone.conv{i}.kernel"], P[f"backbone.conv{i}.bias"]
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (M, H, W, C, 3, 3)
        x = np.einsum("mhwcij,ijco->mhwo", win, k) + b
        x = np.maximum(x, 0)
        m, h, w, c = x.shape
        x = x.reshape(m, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))
    xg = x.mean(axis=(1, 2))
    if config.enable_sam:
        h = np.maximum(xg @ P["sam.W0"].T + P["sam.b0"], 0)
        p = (h @ P["sam.W1"].T + P["sam.b1"])[:, 0]
        e = np.exp(p - p.max())
        alpha = e / e.sum()
    else:
        alpha = np.full(len(xg), 1 / len(xg))
    fc = alpha @ xg
    out = {"alpha": alpha, "fc": fc}
    heads_in = None
    if config.enable_caam:
        xs = np.maximum(np.einsum("tij,j->ti", P["spec.W"], fc) + P["spec.b"], 0)
        out["xs"] = xs
        if config.enable_ascmm:
            out["aux"] = np_sigmoid(np.einsum("toj,tj->t", P["aux.W"], xs) + P["aux.b"][:, 0])
        Q = np.zeros((9, 9))
        for t in range(9):
            for k in range(9):
                hk = np.maximum(P["caam.W0"][t] @ xs[k] + P["caam.b0"][t], 0)
                Q[t, k] = P["caam.W1"][t, 0] @ hk + P["caam.b1"][t, 0]
        out["caam"] = Q
        heads_in = Q @ xs
    else:
        heads_in = np.tile(fc, (9, 1))
    final = np.zeros(9)
    for t in range(9):
        h = np.maximum(P["head.W1"][t] @ heads_in[t] + P["head.b1"][t], 0)
        final[t] = np_sigmoid(P["head.W2"][t, 0] @ h + P["head.b2"][t, 0])
    out["final"] = final
    return out


@pytest.mark.parametrize(
    "flags",
    [
        dict(),
        dict(enable_ascmm=False),
        dict(enable_caam=False, enable_ascmm=False),
        dict(enable_sam=False),
        dict(enable_sam=False, enable_caam=False, enable_ascmm=False),
    ],
)
def test_forward_matches_oracle(flags):
    model = tiny_model(seed=3, **flags)
    vol = random_volume(4, seed=1)
    rec = model.forward(vol).to_numpy()
    ref = oracle_forward(vol, model.params, model.config)
    for key, val in ref.items():
        np.testing.assert_allclose(rec[key], val, rtol=1e-10, atol=1e-12, err_msg=key)
    if not model.config.enable_caam:
        assert not rec["caam"].any()


def test_backbone_shape_and_single_slice():
    model = Model.create(ModelConfig(channel_preset="tiny"), seed=0)
    assert backbone_forward(random_volume(3), model.params, model.config).shape == (3, 64)
    rec = model.forward(random_volume(1))
    assert rec.alpha.data.tolist() == [1.0]
    np.testing.assert_array_equal(rec.fc.data, rec.xg.data[0])


def test_full_size_preset_dims():
    cfg = ModelConfig()
    shapes = dict((n, s) for n, s, _ in param_layout(cfg))
    assert cfg.content_dim == 256
    assert shapes["backbone.conv0.kernel"] == (3, 3, 1, 32)
    assert shapes["backbone.conv3.kernel"] == (3, 3, 128, 256)
    assert shapes["caam.W0"] == (9, 128, 256)


def test_volume_shape_validation():
    model = tiny_model()
    with pytest.raises(ad.ShapeError):
        model.forward(np.zeros((2, 32, 32)))
    with pytest.raises(ad.ShapeError):
        model.forward(np.zeros((0, 64, 64)))


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(enable_caam=False, enable_ascmm=True)
    with pytest.raises(ValidationError):
        ModelConfig(channel_preset="huge")
    with pytest.raises(ValidationError):
        ModelConfig(active_attributes=("colour",))
    with pytest.raises(ValidationError):
        ModelConfig(lam=-1.0)
    cfg = ModelConfig(lam=0.3, active_attributes=("malignancy", "texture"))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# --------------------------------------------------------------------------
# hand-set weights


def _zero_all(model):
    for p in model.params.values():
        p.value.data[...] = 0


def test_zero_heads_predict_half_and_hand_loss():
    model = tiny_model()
    _zero_all(model)
    rec = model.forward(random_volume(2))
    np.testing.assert_array_equal(rec.final.data, np.full(9, 0.5))
    np.testing.assert_array_equal(rec.aux.data, np.full(9, 0.5))
    # lam * 9 * 0.25 + 9 * 0.25
    assert model.loss(rec, np.zeros(9)).item() == pytest.approx(0.1 * 2.25 + 2.25, abs=1e-12)


def test_head_bias_sets_prediction():
    model = tiny_model(enable_caam=False, enable_ascmm=False)
    _zero_all(model)
    model.params["head.b2"].value.data[:, 0] = np.log(3.0)  # sigmoid -> 0.75
    rec = model.forward(random_volume(3))
    np.testing.assert_allclose(rec.final.data, 0.75, atol=1e-15)
    assert model.loss(rec, np.full(9, 0.25)).item() == pytest.approx(9 * 0.25, abs=1e-12)


def test_zero_scorer_gives_uniform_alpha():
    model = tiny_model()
    model.params["sam.W1"].value.data[...] = 0
    rec = model.forward(random_volume(5))
    np.testing.assert_allclose(rec.alpha.data, 0.2, atol=1e-15)


def test_constant_caam_scores_mix_equally():
    model = tiny_model()
    model.params["caam.W1"].value.data[...] = 0
    model.params["caam.b1"].value.data[...] = 2.0
    rec = model.forward(random_volume(2)).to_numpy()
    np.testing.assert_array_equal(rec["caam"], np.full((9, 9), 2.0))
    np.testing.assert_allclose(rec["fs"], np.tile(2.0 * rec["xs"].sum(axis=0), (9, 1)), rtol=1e-12)


def test_attribute_subset_loss():
    model = tiny_model(enable_ascmm=False, enable_caam=False, active_attributes=("malignancy",))
    _zero_all(model)
    rec = model.forward(random_volume(2))
    t = np.zeros(9)
    t[-1] = 1.0
    assert model.loss(rec, t).item() == pytest.approx(0.25, abs=1e-15)


def test_loss_rejects_bad_targets():
    model = tiny_model()
    rec = model.forward(random_volume(1))
    with pytest.raises(ValidationError):
        compute_loss(rec, np.full(9, 1.5), model.config)
    with pytest.raises(ValidationError):
        compute_loss(rec, np.zeros(8), model.config)


def test_aux_requires_ascmm():
    model = tiny_model(enable_ascmm=False)
    rec = model.forward(random_volume(1))
    with pytest.raises(ad.UsageError):
        ascmm_aux_predict(rec.xs, model.params, model.config)


def test_lambda_zero_reduces_to_main_loss():
    full = tiny_model(seed=2, lam=0.0)
    plain = Model(ModelConfig(**{**TINY, "enable_ascmm": False}), full.params)
    vol = random_volume(3, seed=9)
    t = np.linspace(0.1, 0.9, 9)
    assert full.loss(full.forward(vol), t).item() == plain.loss(plain.forward(vol), t).item()


# --------------------------------------------------------------------------
# slice-order properties


@settings(max_examples=8, deadline=None)
@given(st.integers(2, 6), st.integers(0, 1000))
def test_slice_permutation_equivariance(m, seed):
    model = tiny_model(seed=1)
    vol = random_volume(m, seed)
    perm = np.random.default_rng(seed).permutation(m)
    a = model.forward(vol).to_numpy()
    b = model.forward(vol[perm]).to_numpy()
    assert abs(a["alpha"].sum() - 1) < 1e-12
    np.testing.assert_allclose(b["alpha"], a["alpha"][perm], atol=1e-9, rtol=0)
    np.testing.assert_allclose(b["fc"], a["fc"], atol=1e-9, rtol=0)
    np.testing.assert_allclose(b["final"], a["final"], atol=1e-9, rtol=0)


@pytest.mark.parametrize("sam", [True, False])
def test_slice_duplication_invariance(sam):
    # Repeating every slice twice halves each weight and leaves fc unchanged.
    model = tiny_model(seed=4, enable_sam=sam)
    vol = random_volume(3, 5)
    a = model.forward(vol).to_numpy()
    b = model.forward(np.repeat(vol, 2, axis=0)).to_numpy()
    np.testing.assert_allclose(b["alpha"], np.repeat(a["alpha"], 2) / 2, atol=1e-12)
    np.testing.assert_allclose(b["fc"], a["fc"], atol=1e-12)
    np.testing.assert_allclose(b["final"], a["final"], atol=1e-12)


# --------------------------------------------------------------------------
# init and gradients


def test_init_deterministic_and_shared_across_variants():
    a = init_model_params(ModelConfig(**TINY), seed=11)
    b = init_model_params(ModelConfig(**TINY, enable_sam=False, enable_caam=False, enable_ascmm=False), seed=11)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    c = init_model_params(ModelConfig(**TINY), seed=12)
    assert not np.array_equal(a["head.W1"].data, c["head.W1"].data)


def test_active_params_follow_flags():
    model = tiny_model(enable_sam=False, enable_caam=False, enable_ascmm=False)
    names = {p.name.split(".")[0] for p in active_params(model.params, model.config)}
    assert names == {"backbone", "head"}


def test_full_model_gradcheck():
    # Extended precision, tiny channels, all modules. Stencils that flip a ReLU
    # or pooling switch are re-probed with a step that keeps the pattern fixed.
    model = Model.create(ModelConfig(channel_preset="tiny"), seed=0, dtype=np.longdouble)
    vol = random_volume(3, seed=0).astype(np.longdouble)
    t = np.linspace(0.05, 0.95, 9)
    rep = stencil_grad_check(
        lambda: model.loss(model.forward(vol), t),
        [(p.name, p.value) for p in model.trainable()],
        samples=3,
    )
    assert rep.smooth_max < 1e-4
    assert rep.kinked_max < 1e-4


def test_full_model_gradcheck_float64_tail():
    # Plain grad_check on the auxiliary and head parameters, where nothing is piecewise.
    model = Model.create(ModelConfig(channel_preset="tiny"), seed=0, dtype=np.float64)
    vol = 0.3 * random_volume(3, seed=0)
    t = np.linspace(0.05, 0.95, 9)
    params = [model.params[n].value for n in ("aux.W", "aux.b", "head.b2", "caam.b1")]
    assert ad.grad_check(lambda: model.loss(model.forward(vol), t), params) < 1e-4


def test_predict_in_unit_interval():
    model = Model.create(ModelConfig(channel_preset="tiny"), seed=0)
    out = model.predict(np.full((2, 64, 64), -4.0))
    assert out.shape == (9,) and np.all((out > 0) & (out < 1))
    assert len(ATTRIBUTE_NAMES) == 9
