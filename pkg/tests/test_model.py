import math

import numpy as np
import pytest

from cdslice import autodiff as ad
from cdslice.autodiff import Tensor
from cdslice.errors import ConfigMismatchError, DimensionError, FormatError, ParameterError
from cdslice.geometry import PointCloud3D, SliceConfig, SliceTensor, slice_point_cloud
from cdslice.model import (
    ModelConfig,
    count_parameters,
    decode_params,
    encode_params,
    encode_sequence,
    encode_slice,
    forward,
    init_params,
    load_params,
    lstm_cell,
    predict,
    predict_many,
    regress,
    save_params,
    slice_sensitivity,
)

TINY = ModelConfig(n_slices=5, m_max=12, point_channels=(2, 6, 8), hidden=4, head_channels=(6, 3))


def random_slices(config, rng, n_empty=1):
    S, M = config.n_slices, config.m_max
    counts = rng.integers(1, M + 1, size=S)
    counts[rng.choice(S, n_empty, replace=False)] = 0
    mask = np.arange(M) < counts[:, None]
    data = np.where(mask[..., None], rng.normal(size=(S, M, 2)), 0.0)
    return SliceTensor(data, mask, counts)


# ------------------------------------------------------------ parameter counts


def test_default_parameter_count():
    cfg = ModelConfig()
    assert count_parameters(cfg) == 2_796_321
    assert count_parameters(cfg, "pointnet") == 18_848
    assert count_parameters(cfg, "regressor") == 147_841
    assert count_parameters(cfg, "lstm") == 2_629_632


def test_single_bias_convention_count():
    assert count_parameters(ModelConfig(lstm_biases=1)) == 2_792_225


def test_count_matches_materialised_params():
    p = init_params(ModelConfig(), seed=0)
    assert count_parameters(p) == 2_796_321


def test_init_within_fan_in_bounds():
    p = init_params(TINY, seed=3)
    w = p["lstm.l1.fwd.w_ih"].value  # fan_in = 2h = 8
    assert np.abs(w).max() <= 1 / math.sqrt(8)
    assert np.abs(p["pointnet.conv0.weight"].value).max() <= 1 / math.sqrt(2)
    q = init_params(TINY, seed=3)
    assert all(np.array_equal(p[n].value, q[n].value) for n in p.tensors)


def test_invalid_config():
    with pytest.raises(ParameterError):
        ModelConfig(point_channels=(3, 8))
    with pytest.raises(ParameterError):
        ModelConfig(lstm_dropout=1.0)


# ------------------------------------------------------------ slice encoder


@pytest.mark.usefixtures("f64")
class TestEncodeSlice:
    def setup_method(self):
        self.params = init_params(TINY, seed=1)

    def embed(self, pts, mask=None):
        pts = np.asarray(pts, dtype=float)
        mask = np.ones(len(pts)) if mask is None else mask
        return encode_slice(pts, mask, self.params).value

    def test_permutation_invariant(self, rng):
        pts = rng.normal(size=(9, 2))
        np.testing.assert_array_equal(self.embed(pts), self.embed(pts[rng.permutation(9)]))

    def test_single_point_is_mlp_image(self):
        p = self.params
        x = np.array([0.3, -1.2])
        h = x
        for k in range(2):
            w, b = p[f"pointnet.conv{k}.weight"].value, p[f"pointnet.conv{k}.bias"].value
            h = np.maximum(w @ h + b, 0)
        np.testing.assert_allclose(self.embed([x]), h, rtol=1e-14)

    def test_union_is_elementwise_max(self, rng):
        a, b = rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
        np.testing.assert_array_equal(self.embed(np.vstack([a, b])), np.maximum(self.embed(a), self.embed(b)))

    def test_empty_mask_gives_zero(self, rng):
        assert not self.embed(rng.normal(size=(4, 2)), np.zeros(4)).any()


# ------------------------------------------------------------ LSTM cell


def naive_lstm_cell(x, h, c, w_ih, w_hh, b_ih, b_hh):
    H = len(h)

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    pre = []
    for r in range(4 * H):
        s = b_ih[r] + b_hh[r]
        for j in range(len(x)):
            s += w_ih[r][j] * x[j]
        for j in range(H):
            s += w_hh[r][j] * h[j]
        pre.append(s)
    h_new, c_new = [], []
    for k in range(H):
        i = sig(pre[k])
        f = sig(pre[H + k])
        g = math.tanh(pre[2 * H + k])
        o = sig(pre[3 * H + k])
        ck = f * c[k] + i * g
        c_new.append(ck)
        h_new.append(o * math.tanh(ck))
    return h_new, c_new


@pytest.mark.usefixtures("f64")
def test_lstm_cell_matches_scalar_oracle(rng):
    for _ in range(5):
        d, H = 3, 4
        args = [rng.normal(size=s) * 0.7 for s in [(d,), (H,), (H,), (4 * H, d), (4 * H, H), (4 * H,), (4 * H,)]]
        h, c = lstm_cell(*args[:3], *(Tensor(a) for a in args[3:]))
        h_ref, c_ref = naive_lstm_cell(*(a.tolist() for a in args))
        np.testing.assert_allclose(h.value, h_ref, atol=1e-10, rtol=0)
        np.testing.assert_allclose(c.value, c_ref, atol=1e-10, rtol=0)


@pytest.mark.usefixtures("f64")
def test_lstm_cell_zero_weights():
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    h, c = lstm_cell(np.ones(3), np.ones(2), np.zeros(2), z(8, 3), z(8, 2), z(8), z(8))
    assert not h.value.any() and not c.value.any()


@pytest.mark.usefixtures("f64")
def test_lstm_cell_zero_cell_state(rng):
    x, h0 = rng.normal(size=3), rng.normal(size=2)
    w_ih, w_hh, b = Tensor(rng.normal(size=(8, 3))), Tensor(rng.normal(size=(8, 2))), Tensor(rng.normal(size=8))
    _, c = lstm_cell(x, h0, np.zeros(2), w_ih, w_hh, b)
    pre = w_ih.value @ x + w_hh.value @ h0 + b.value
    i, g = 1 / (1 + np.exp(-pre[:2])), np.tanh(pre[4:6])
    np.testing.assert_allclose(c.value, i * g, rtol=1e-14)


# ------------------------------------------------------------ sequence encoder


def swapped_directions(params):
    """Copy with fwd/bwd weights exchanged; deeper layers also swap input halves."""
    q = params.copy()
    h = params.config.hidden
    for layer in range(params.config.lstm_layers):
        for name in ("w_ih", "w_hh", "b_ih", "b_hh"):
            f, b = params[f"lstm.l{layer}.fwd.{name}"].value, params[f"lstm.l{layer}.bwd.{name}"].value
            if name == "w_ih" and layer > 0:
                f = np.concatenate([f[:, h:], f[:, :h]], axis=1)
                b = np.concatenate([b[:, h:], b[:, :h]], axis=1)
            q[f"lstm.l{layer}.fwd.{name}"].value = b.copy()
            q[f"lstm.l{layer}.bwd.{name}"].value = f.copy()
    return q


@pytest.mark.usefixtures("f64")
def test_reversal_with_swapped_weights_swaps_halves(rng):
    p = init_params(TINY, seed=2)
    emb = rng.normal(size=(2, 5, 8))
    out = encode_sequence(p, emb).value
    rev = encode_sequence(swapped_directions(p), emb[:, ::-1]).value
    h = TINY.hidden
    np.testing.assert_allclose(rev[:, :h], out[:, h:], atol=1e-12)
    np.testing.assert_allclose(rev[:, h:], out[:, :h], atol=1e-12)


@pytest.mark.usefixtures("f64")
def test_sequence_length_one(rng):
    cfg = ModelConfig(n_slices=1, m_max=4, point_channels=(2, 4), hidden=3, head_channels=(2,))
    out = encode_sequence(init_params(cfg), rng.normal(size=(1, 1, 4))).value
    assert out.shape == (1, 6) and np.all(np.isfinite(out))


def test_sequence_inference_deterministic(rng):
    p = init_params(TINY, seed=2)
    emb = rng.normal(size=(1, 5, 8))
    assert np.array_equal(encode_sequence(p, emb).value, encode_sequence(p, emb).value)


def test_sequence_rejects_bad_shape():
    with pytest.raises(DimensionError):
        encode_sequence(init_params(TINY), np.zeros((5, 8)))


def test_training_dropout_reproducible_with_same_rng(rng):
    p = init_params(TINY, seed=2)
    emb = rng.normal(size=(1, 5, 8))
    a = encode_sequence(p, emb, training=True, rng=np.random.default_rng(0)).value
    b = encode_sequence(p, emb, training=True, rng=np.random.default_rng(0)).value
    assert np.array_equal(a, b)


# ------------------------------------------------------------ regressor


@pytest.mark.usefixtures("f64")
def test_regress_hand_example():
    cfg = ModelConfig(n_slices=1, m_max=1, point_channels=(2, 2), hidden=1, head_channels=(2,))
    p = init_params(cfg)
    p["regressor.fc0.weight"].value = np.array([[1.0, -1.0], [2.0, 1.0]])
    p["regressor.fc0.bias"].value = np.array([0.0, -1.0])
    p["regressor.fc1.weight"].value = np.array([[1.0, 3.0]])
    p["regressor.fc1.bias"].value = np.array([0.5])
    # hidden = relu([1 - 2, 2 + 2 - 1]) = [0, 3]; out = 3 * 3 + 0.5
    assert regress(p, np.array([[1.0, 2.0]])).value.tolist() == [9.5]


@pytest.mark.usefixtures("f64")
def test_regress_zero_weights_returns_final_bias():
    p = init_params(TINY)
    for name, t in p.sections("regressor"):
        t.value = np.zeros_like(t.value)
    p["regressor.fc2.bias"].value = np.array([0.27])
    assert regress(p, np.zeros((1, 8))).value.tolist() == [0.27]


# ------------------------------------------------------------ full predictor


@pytest.mark.usefixtures("f64")
class TestPredict:
    def setup_method(self):
        self.params = init_params(TINY, seed=4)

    def test_within_slice_permutation_invariance(self, rng):
        s = random_slices(TINY, rng)
        base = predict(s, self.params)
        data = s.data.copy()
        for i in range(TINY.n_slices):
            n = s.counts[i]
            data[i, :n] = data[i, rng.permutation(n)]
        assert predict(SliceTensor(data, s.mask, s.counts), self.params) == base

    def test_padding_invariance(self, rng):
        s = random_slices(TINY, rng)
        assert predict(s.padded_to(40), self.params) == predict(s, self.params)

    def test_padding_values_never_matter(self, rng):
        s = random_slices(TINY, rng)
        junk = np.where(s.mask[..., None], s.data, rng.normal(size=s.data.shape) * 100)
        assert predict(SliceTensor(junk, s.mask, s.counts), self.params) == predict(s, self.params)

    def test_batch_composition_invariance(self, rng):
        slices = [random_slices(TINY, rng) for _ in range(7)]
        data = np.stack([s.data for s in slices])
        mask = np.stack([s.mask for s in slices])
        full = predict_many(self.params, data, mask, batch_size=7)
        single = [predict(s, self.params) for s in slices]
        assert full.tolist() == single
        assert predict_many(self.params, data, mask, batch_size=3).tolist() == single

    def test_slice_count_mismatch(self, rng):
        s = random_slices(ModelConfig(n_slices=6, m_max=12), rng)
        with pytest.raises(DimensionError, match="5 slices"):
            predict(s, self.params)

    def test_pool_padding_flag_changes_semantics(self, rng):
        # same weights; pooling over padded rows lets the bias-only features of
        # zero points leak in, so the compatibility model disagrees
        compat = self.params.copy()
        compat.config = ModelConfig(**{**TINY.describe(), "pool_padding": True})
        s = random_slices(TINY, rng, n_empty=2)
        assert predict(s, compat) != predict(s, self.params)


def test_default_config_forward_shape():
    """Full-size tensors: one sample at (80, 6500, 2) runs through the network."""
    cfg = ModelConfig()
    p = init_params(cfg, seed=0)
    g = np.random.default_rng(0)
    cloud = PointCloud3D(g.uniform(-1, 1, size=(30_000, 3)))
    s = slice_point_cloud(cloud, SliceConfig())
    out = forward(p, s.data[None], s.mask[None])
    assert out.shape == (1,) and np.isfinite(out.value[0])


# ------------------------------------------------------------ sensitivity


def test_sensitivity_empty_slice_is_exactly_zero(rng):
    p = init_params(TINY, seed=5)
    s = random_slices(TINY, rng, n_empty=2)
    d = slice_sensitivity(s, p)
    assert d.shape == (5,)
    assert all(d[i] == 0.0 for i in np.flatnonzero(s.counts == 0))


@pytest.mark.usefixtures("f64")
def test_sensitivity_matches_direct_occlusion(rng):
    p = init_params(TINY, seed=5)
    s = random_slices(TINY, rng)
    base = predict(s, p)
    direct = [predict(s.occluded(i), p) - base for i in range(5)]
    np.testing.assert_allclose(slice_sensitivity(s, p), direct, atol=1e-14)


# ------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip_bytes(tmp_path):
    p = init_params(TINY, seed=6)
    save_params(p, tmp_path / "a.cdpm")
    q = load_params(tmp_path / "a.cdpm")
    save_params(q, tmp_path / "b.cdpm")
    assert (tmp_path / "a.cdpm").read_bytes() == (tmp_path / "b.cdpm").read_bytes()
    assert q.config == TINY and q.seed == 6
    for name in p.tensors:
        np.testing.assert_array_equal(q[name].value, p[name].value.astype(np.float32))


def test_checkpoint_layout():
    raw = encode_params(init_params(TINY))
    assert raw[:8] == b"CDPM0001"


def test_truncated_checkpoint_reports_offset():
    raw = encode_params(init_params(TINY))
    for cut in (4, 20, len(raw) // 2, len(raw) - 1):
        with pytest.raises(FormatError) as err:
            decode_params(raw[:cut])
        assert err.value.offset is not None


def test_bad_magic_and_trailing_bytes():
    raw = encode_params(init_params(TINY))
    with pytest.raises(FormatError, match="magic"):
        decode_params(b"NOTAMODL" + raw[8:])
    with pytest.raises(FormatError):
        decode_params(raw + b"\0")


def test_config_mismatch_names_both(tmp_path):
    save_params(init_params(TINY), tmp_path / "m.cdpm")
    other = ModelConfig(**{**TINY.describe(), "n_slices": 7})
    with pytest.raises(ConfigMismatchError) as err:
        load_params(tmp_path / "m.cdpm", expect=other)
    assert "n_slices" in str(err.value) and "5" in str(err.value) and "7" in str(err.value)


# ------------------------------------------------------------ target scaling


@pytest.mark.usefixtures("f64")
def test_target_scaling_maps_raw_output(rng):
    cfg = ModelConfig(**{**TINY.describe(), "target_mean": 0.3, "target_scale": 0.02})
    p = init_params(cfg, seed=4)
    s = random_slices(TINY, rng)
    raw = forward(p, s.data[None], s.mask[None], standardized=True).value[0]
    assert predict(s, p) == pytest.approx(0.3 + 0.02 * raw, abs=1e-15)
    # identity scaling leaves the raw output untouched
    q = init_params(TINY, seed=4)
    assert predict(s, q) == forward(q, s.data[None], s.mask[None], standardized=True).value[0]


def test_target_scaling_survives_checkpoint(tmp_path):
    cfg = ModelConfig(**{**TINY.describe(), "target_mean": 0.31, "target_scale": 0.027})
    save_params(init_params(cfg), tmp_path / "m.cdpm")
    assert load_params(tmp_path / "m.cdpm").config == cfg


def test_target_scale_must_be_positive():
    with pytest.raises(ParameterError):
        ModelConfig(target_scale=0.0)


# ------------------------------------------------------------ golden file


def test_golden_checkpoint_prediction():
    """A committed desk-scale model reproduces its stored held-out prediction."""
    import json
    from pathlib import Path

    from cdslice.geometry import read_cloud

    here = Path(__file__).parent / "golden"
    expected = json.loads((here / "expected.json").read_text())
    params = load_params(here / "model.cdpm")
    cfg = params.config
    value = predict(slice_point_cloud(read_cloud(here / "holdout.pcld"), SliceConfig(cfg.n_slices, cfg.m_max)), params)
    # float32 arithmetic: allow a few ulps at Cd ~ 0.3
    assert value == pytest.approx(expected["cd_predicted"], abs=1e-6)
