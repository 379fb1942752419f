import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamdsu.encoder import (
    UNBOUNDED, Encoder, EncoderConfig, FeatureMatrix, WindowConfig, build_mask, desk_config,
    receptive_field, theoretical_latency, weighted_features,
)
from streamdsu.gradcheck import numerical_grad, relative_error

TINY = dict(d_model=8, n_heads=2, d_ffn=16, conv_spec=((4, 4, 2), (4, 2, 2)), pos_conv_kernel=3)


def test_window_validation_and_parsing():
    with pytest.raises(ValueError):
        WindowConfig(1, 2, 1)
    with pytest.raises(ValueError):
        WindowConfig(-1, 1, 0)
    assert WindowConfig.parse("8,1,8") == WindowConfig(8, 1, 8)
    assert WindowConfig.parse("inf,1,4") == WindowConfig(UNBOUNDED, 1, 4)
    assert WindowConfig.parse("full").is_full
    assert str(WindowConfig(UNBOUNDED, 1, 3)) == "inf,1,3"


def test_encoder_config_invariants():
    assert desk_config().frame_stride_samples == 160
    with pytest.raises(ValueError):
        EncoderConfig(d_model=10, n_heads=4)


def test_mask_examples():
    np.testing.assert_array_equal(build_mask(3, WindowConfig(0, 1, 0)), np.eye(3, dtype=bool))
    assert build_mask(4, WindowConfig.full()).all()
    row = build_mask(5, WindowConfig(1, 1, 2))[2]
    assert np.flatnonzero(row).tolist() == [1, 2, 3, 4]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.one_of(st.integers(0, 12), st.just(UNBOUNDED)),
       st.one_of(st.integers(0, 12), st.just(UNBOUNDED)))
def test_mask_matches_inequality(t, left, right):
    m = build_mask(t, WindowConfig(left, 1, right))
    for i in range(t):
        lo = 0 if left == UNBOUNDED else max(0, i - left)
        hi = t - 1 if right == UNBOUNDED else min(t - 1, i + right)
        for j in range(t):
            assert m[i, j] == (lo <= j <= hi)
    assert m.diagonal().all()


def test_receptive_field_and_latency_examples():
    assert receptive_field(WindowConfig(2, 1, 2), 3) == 13
    assert receptive_field(WindowConfig(0, 1, 0), 7) == 1
    assert receptive_field(WindowConfig(64, 1, 64), 21) == 2689
    assert receptive_field(WindowConfig(UNBOUNDED, 1, 4), 3) == UNBOUNDED
    assert theoretical_latency(WindowConfig(5, 1, 0), 21) == 1
    assert theoretical_latency(WindowConfig(1, 1, 1), 4) == 5
    assert theoretical_latency(WindowConfig(UNBOUNDED, 1, 16), 21) == 337
    assert theoretical_latency(WindowConfig(3, 1, UNBOUNDED), 2) == UNBOUNDED


def test_frame_count_from_stride():
    cfg = desk_config(conv_spec=((16, 10, 5), (16, 3, 2), (16, 3, 2), (16, 3, 2), (16, 2, 2), (16, 2, 2), (16, 2, 2)),
                      n_layers=1)
    assert cfg.frame_stride_samples == 320
    enc = Encoder.create(cfg)
    out = enc.encode(np.zeros(16000))
    assert out.final.n_frames == 50
    assert out.final.frame_rate_hz == 50.0


def test_too_short_input():
    enc = Encoder.create(desk_config(n_layers=1))
    with pytest.raises(ValueError):
        enc.encode(np.zeros(159))
    with pytest.raises(ValueError):
        enc.encode(np.zeros(0))


@pytest.mark.parametrize("window", [WindowConfig.full(), WindowConfig(2, 1, 2)])
def test_zero_signal_interior_frames_equal(window):
    enc = Encoder.create(desk_config(n_layers=2, window=window), dtype=np.float64)
    frames = enc.encode(np.zeros(16000)).final.frames
    # windowed attention spreads edge effects by (left)·n frames, so start later
    start = 10 if window.is_full else 10 + 2 * 2
    interior = frames[start:41]
    np.testing.assert_allclose(interior, np.broadcast_to(interior[0], interior.shape), atol=1e-5)


def test_encode_deterministic():
    x = np.random.default_rng(5).normal(0, 0.1, 8000)
    a = Encoder.create(desk_config(n_layers=2, seed=9)).encode(x).final.frames
    b = Encoder.create(desk_config(n_layers=2, seed=9)).encode(x).final.frames
    assert a.tobytes() == b.tobytes()


def test_full_window_equals_unmasked_bit_exact():
    enc = Encoder.create(desk_config(n_layers=2, window=WindowConfig.full()))
    x = np.random.default_rng(1).normal(0, 0.1, 6400)
    a = enc.encode(x).final.frames
    b = enc.encode(x, masked=False).final.frames
    assert a.tobytes() == b.tobytes()


def test_encode_returns_all_layers():
    enc = Encoder.create(desk_config(n_layers=3))
    out = enc.encode(np.random.default_rng(0).normal(0, 0.1, 3200))
    assert len(out.layers) == 4
    np.testing.assert_array_equal(out.final.frames, out.layers[-1].frames)


# -- weighted features ----------------------------------------------------------

def test_weighted_features_examples(rng):
    layers = [FeatureMatrix(rng.normal(size=(4, 3)), 100.0) for _ in range(3)]
    one_hot = weighted_features(layers, np.array([0.0, 50.0, 0.0]))
    np.testing.assert_allclose(one_hot.frames, layers[1].frames, atol=1e-4)
    same = weighted_features([layers[0], layers[0]], np.zeros(2))
    np.testing.assert_allclose(same.frames, layers[0].frames)
    logits = rng.normal(size=3)
    w = np.exp(logits) / np.exp(logits).sum()
    ref = sum(wk * fm.frames for wk, fm in zip(w, layers))
    np.testing.assert_allclose(weighted_features(layers, logits).frames, ref, atol=1e-6)
    with pytest.raises(ValueError):
        weighted_features([layers[0], FeatureMatrix(np.zeros((2, 3)), 100.0)], np.zeros(2))


def test_wf_encoder_output_is_convex_mix():
    enc = Encoder.create(desk_config(n_layers=2, wf_enabled=True))
    enc.params["wf.logits"].value[:] = [0.3, -1.0, 2.0]
    out = enc.encode(np.random.default_rng(2).normal(0, 0.1, 3200))
    ref = weighted_features(out.layers, enc.v("wf.logits"))
    np.testing.assert_allclose(out.final.frames, ref.frames, rtol=1e-5, atol=1e-5)


# -- dependency cone (receptive field / latency) ----------------------------------

def _stack_response(enc, h0, j):
    base = enc.stack(h0)[1]
    bumped = h0.copy()
    bumped[j] += 1.0
    return np.abs(enc.stack(bumped)[1] - base).max(axis=1) > 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.integers(0, 3), st.integers(1, 3), st.integers(0, 2**16))
def test_perturbation_respects_receptive_field(left, right, n, seed):
    cfg = EncoderConfig(n_layers=n, window=WindowConfig(left, 1, right), seed=seed, **TINY)
    enc = Encoder.create(cfg, dtype=np.float64)
    rng = np.random.default_rng(seed)
    t = 30
    h0 = rng.normal(size=(t, cfg.d_model))
    j = int(rng.integers(0, t))
    changed = np.flatnonzero(_stack_response(enc, h0, j))
    rf = receptive_field(cfg.window, n)
    for i in changed:
        # output i sees inputs [i - left·n, i + right·n]
        assert i - left * n <= j <= i + right * n
        assert abs(i - j) < rf
        assert not i < j - right * n
    assert j in changed


# -- gradients through the whole encoder -------------------------------------------

@pytest.mark.parametrize("wf", [False, True])
@pytest.mark.parametrize("window", [WindowConfig(1, 1, 2), WindowConfig.full()])
def test_end_to_end_encoder_gradients(wf, window):
    cfg = EncoderConfig(n_layers=2, window=window, wf_enabled=wf, seed=3, **TINY)
    enc = Encoder.create(cfg, dtype=np.float64)
    if wf:
        enc.params["wf.logits"].value[:] = [0.2, -0.1, 0.4]
    rng = np.random.default_rng(0)
    x = rng.normal(0, 0.5, 40)
    r = rng.normal(size=(10, cfg.d_model))

    def loss():
        h0, _ = enc.frontend(x)
        return float(np.sum(enc.stack(h0)[1] * r))

    enc.zero_grad()
    h0, cf = enc.frontend(x, keep=True)
    _, final, cs = enc.stack(h0, keep=True)
    dh0 = enc.stack_backward(r, cs)
    enc.frontend_backward(dh0, cf)
    for name, p in enc.params.items():
        num = numerical_grad(loss, p.value)
        # key bias shifts every score in a row equally, so its true gradient is zero
        if np.abs(num).max() < 1e-8:
            assert np.abs(p.grad).max() < 1e-8, name
            continue
        err = relative_error(p.grad, num)
        assert err < 1e-4, f"{name}: {err:.2e}"


def test_checkpoint_roundtrip(tmp_path):
    enc = Encoder.create(desk_config(n_layers=2, window=WindowConfig(3, 1, 1), wf_enabled=True, seed=4))
    enc.save(tmp_path / "ckpt")
    manifest = (tmp_path / "ckpt" / "manifest").read_text()
    assert "window = 3,1,1" in manifest
    again = Encoder.load(tmp_path / "ckpt")
    assert again.cfg == enc.cfg
    for k, p in enc.params.items():
        np.testing.assert_array_equal(again.v(k), p.value)


def test_truncated_student_shares_lower_layers():
    teacher = Encoder.create(desk_config(n_layers=3))
    student = teacher.truncated(1, window=WindowConfig(2, 1, 2), wf_enabled=True)
    assert student.cfg.n_layers == 1 and student.cfg.window == WindowConfig(2, 1, 2)
    assert "layers.1.attn.wq" not in student.params
    np.testing.assert_array_equal(student.v("layers.0.ffn.w1"), teacher.v("layers.0.ffn.w1"))
    assert student.v("wf.logits").shape == (2,)
    student.params["layers.0.ffn.w1"].value[0, 0] += 1.0
    assert teacher.v("layers.0.ffn.w1")[0, 0] != student.v("layers.0.ffn.w1")[0, 0]
