import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixemb import diffcore as dc
from mixemb import extraction as ex
from mixemb.diffcore import Tensor
from mixemb.errors import NormError, RangeError, ShapeError
from mixemb.extraction import ExtractorConfig, ExtractorModel
from mixemb.objectives import si_sdr_loss
from mixemb.synthgen import Waveform


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_film_identity_and_constant():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((7, 5))
    np.testing.assert_array_equal(ex.film_apply(x, np.ones(5), np.zeros(5)).data, x)
    b = rng.standard_normal(5)
    np.testing.assert_array_equal(ex.film_apply(x, np.zeros(5), b).data, np.tile(b, (7, 1)))
    with pytest.raises(ShapeError):
        ex.film_apply(x, np.ones(4), np.zeros(4))


def test_film_gradients():
    for seed in range(10):
        rng = np.random.default_rng([seed, 1])
        x, g, b = rng.standard_normal((6, 4)), rng.standard_normal(4), rng.standard_normal(4)
        c = rng.standard_normal((6, 4))
        assert dc.grad_check(lambda t: dc.sum_(ex.film_apply(x, t, b) * c), g) < 1e-6
        assert dc.grad_check(lambda t: dc.sum_(ex.film_apply(x, g, t) * c), b) < 1e-6
        assert dc.grad_check(lambda t: dc.sum_(dc.tanh(ex.film_apply(t, g, b)) * c), x) < 1e-4


def _small_model(seed=0, randomize_film=False):
    m = ExtractorModel(ExtractorConfig(emb_dim=4, channels=6, kernel=3, seed=seed))
    if randomize_film:
        rng = np.random.default_rng([seed, 2])
        m.params["film.1.w"].data = 0.3 * rng.standard_normal(m.params["film.1.w"].shape)
        m.params["film.1.b"].data = 0.1 * rng.standard_normal(m.params["film.1.b"].shape)
    return m


def test_stft_round_trip_with_unit_mask():
    x = np.random.default_rng(1).standard_normal((2, 1234))
    spec = ex.stft(x)
    y = ex.istft_masked(Tensor(np.ones(spec.shape)), spec, x.shape[1]).data
    np.testing.assert_allclose(y, x, atol=1e-12)


def test_untrained_extractor_ignores_condition():
    m = ExtractorModel(ExtractorConfig(seed=3))
    rng = np.random.default_rng(4)
    mix = rng.standard_normal(4000)
    a = ex.extract(m, Waveform(mix), _unit(rng.standard_normal(32))).samples
    b = ex.extract(m, Waveform(mix), _unit(rng.standard_normal(32))).samples
    assert len(a) == len(mix)
    assert np.max(np.abs(a - b)) <= 1e-6


def test_mask_bounds_and_zero_input():
    m = _small_model(randomize_film=True)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 900))
    spec = ex.stft(x)
    mask = m.mask(spec, _unit(rng.standard_normal((1, 4)))).data
    assert mask.min() >= 0 and mask.max() <= 1
    out = ex.extract(m, np.zeros(900), _unit(np.ones(4))).samples
    assert np.max(np.abs(out)) <= 1e-12
    with pytest.raises(RangeError):
        ex.extract(m, np.zeros(150), _unit(np.ones(4)))


def test_extractor_never_exceeds_mixture_magnitude():
    m = _small_model(seed=1, randomize_film=True)
    rng = np.random.default_rng(6)
    x = rng.standard_normal(1600)
    y = ex.extract(m, x, _unit(rng.standard_normal(4))).samples
    # the resynthesised output equals mask * mixture STFT, so per-bin magnitude is bounded
    spec = ex.stft(x[None])
    mask = m.mask(spec, _unit(rng.standard_normal((1, 4)))).data
    assert np.all(np.abs(mask * spec) <= np.abs(spec) + 1e-15)
    assert np.all(np.isfinite(y))


def test_full_extractor_loss_gradients_on_ten_frames():
    L = 520  # ten analysis frames after boundary padding
    assert ex.stft(np.zeros((1, L))).shape[1] == 10
    for seed in range(10):
        rng = np.random.default_rng([seed, 7])
        m = _small_model(seed, randomize_film=True)
        mix = rng.standard_normal((2, L))
        ref = mix * 0.6 + 0.2 * rng.standard_normal((2, L))
        cond = _unit(rng.standard_normal((2, 4)))

        def via(name):
            def f(t):
                m.params[name] = t
                return si_sdr_loss(m.forward(mix, cond), ref)
            return f

        # loss is O(10) while some weight gradients are O(1e-6): a wider step keeps roundoff down
        assert dc.grad_check(lambda t: si_sdr_loss(m.forward(mix, t), ref), cond, eps=1e-5) < 1e-4
        for name in ("film.0.w", "film.1.b", "enc.0.b", "dec.1.b"):
            orig = m.params[name]
            assert dc.grad_check(via(name), orig.data.copy(), eps=1e-5) < 1e-4, (seed, name)
            m.params[name] = orig


def test_select_target_and_margin():
    e = _unit(np.random.default_rng(8).standard_normal((3, 5)))
    assert ex.select_target(e, e[1]) == (1, pytest.approx(1.0))
    ref = np.array([1.0, 0.0])
    cands = np.array([[0.9, np.sqrt(1 - 0.81)], [0.3, np.sqrt(1 - 0.09)]])
    assert ex.select_target(cands, ref)[0] == 0
    assert ex.cosine_margin(cands, ref) == pytest.approx(0.6, abs=1e-12)
    assert ex.select_target(np.array([[0.0, 1.0], [0.0, -1.0], [0.0, 1.0]]), ref)[0] == 0
    assert ex.cosine_margin(np.tile(e[:1], (3, 1)), e[2]) == 0.0
    with pytest.raises(RangeError):
        ex.cosine_margin(e[:1], e[0])
    with pytest.raises(NormError):
        ex.select_target(np.zeros((2, 5)), e[0])


def test_interp_embeddings():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    np.testing.assert_array_equal(ex.interp_embeddings(e1, e2, 0.0), e1)
    np.testing.assert_array_equal(ex.interp_embeddings(e1, e2, 1.0), e2)
    assert np.linalg.norm(ex.interp_embeddings(e1, e2, 0.5)) == pytest.approx(np.sqrt(2) / 2, abs=1e-15)
    with pytest.raises(RangeError):
        ex.interp_embeddings(e1, e2, 1.5)


def test_align_gain_lag_examples():
    ref = np.random.default_rng(9).standard_normal(400)
    est = 0.5 * np.concatenate([np.zeros(3), ref[:-3]])  # est[n] = 0.5 ref[n - 3]
    aligned, gain, lag = ex.align_gain_lag(est, ref)
    assert (lag, gain) == (3, pytest.approx(2.0, abs=1e-12))
    np.testing.assert_allclose(aligned.samples[:-3], ref[:-3], atol=1e-9)
    aligned, gain, lag = ex.align_gain_lag(ref, ref)
    assert lag == 0 and gain == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(RangeError):
        ex.align_gain_lag(np.zeros(400), ref)
    with pytest.raises(RangeError):
        ex.align_gain_lag(ref, ref, max_lag=81)


def test_align_tie_prefers_small_then_negative_lag():
    ref = np.zeros(50)
    ref[25] = 1.0
    est = np.zeros(50)
    est[20] = est[30] = 1.0  # shifts of -5 and +5 correlate equally
    _, _, lag = ex.align_gain_lag(est, ref, max_lag=10)
    assert lag == -5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**20), st.integers(0, 20))
def test_align_is_least_squares_over_scanned_lags(seed, max_lag):
    rng = np.random.default_rng(seed)
    ref, est = rng.standard_normal(120), rng.standard_normal(120)
    aligned, gain, lag = ex.align_gain_lag(est, ref, max_lag=max_lag)
    err = np.linalg.norm(aligned.samples - ref)
    for s in range(-max_lag, max_lag + 1):
        es = ex._shift(est, s)
        g = es @ ref / (es @ es)
        # NCC maximisation picks the lag with the smallest optimal-gain residual
        assert err <= np.linalg.norm(g * es - ref) + 1e-9 or abs(es @ ref) / np.linalg.norm(es) <= \
            abs(ex._shift(est, lag) @ ref) / np.linalg.norm(ex._shift(est, lag)) + 1e-12


def test_interp_signals():
    x = np.random.default_rng(10).standard_normal(64)
    np.testing.assert_array_equal(ex.interp_signals(x, -x, 0.0).samples, x)
    np.testing.assert_array_equal(ex.interp_signals(x, -x, 1.0).samples, -x)
    assert not np.any(ex.interp_signals(x, -x, 0.5).samples)
    with pytest.raises(ShapeError):
        ex.interp_signals(x, x[:10], 0.5)


def test_extractor_checkpoint_roundtrip(tmp_path):
    m = _small_model(seed=2, randomize_film=True)
    m.feat_mean, m.feat_std = -3.0, 2.5
    ex.save_extractor(m, tmp_path / "x")
    back = ex.load_extractor(tmp_path / "x")
    x = np.random.default_rng(11).standard_normal(800)
    c = _unit(np.ones(4))
    np.testing.assert_array_equal(ex.extract(back, x, c).samples, ex.extract(m, x, c).samples)
