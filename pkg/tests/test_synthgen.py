import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixemb import synthgen as sg
from mixemb.errors import DataError, RangeError
from mixemb.synthgen import DatasetConfig, SpeakerProfile, Waveform

SR = sg.SAMPLE_RATE


def _profile(f0, depth=0.01, sid=0, seed=5):
    gains = np.arange(1, 41, dtype=float) ** -1.0
    return SpeakerProfile(sid, f0, gains, (500.0, 1500.0, 2800.0), vibrato_rate=5.0, vibrato_depth=depth,
                          seed=seed)


def _voiced(x):
    # skip pauses: keep 25 ms frames above 10% of peak frame energy
    frames = x[:len(x) // 200 * 200].reshape(-1, 200)
    e = (frames ** 2).sum(axis=1)
    return frames[e > 0.1 * e.max()].reshape(-1)


def test_utterance_deterministic_and_peak_normalised():
    p = _profile(150.0)
    a, b = sg.synth_utterance(p, 2.0, seed=3), sg.synth_utterance(p, 2.0, seed=3)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert np.max(np.abs(a.samples)) == pytest.approx(0.5, abs=1e-12)
    assert len(a) == 16000


def test_utterance_duration_guard():
    with pytest.raises(RangeError):
        sg.synth_utterance(_profile(150.0), 0.5, seed=0)
    with pytest.raises(RangeError):
        sg.synth_utterance(_profile(150.0), 11.0, seed=0)


def test_profile_invariants():
    with pytest.raises(RangeError):
        _profile(60.0)
    with pytest.raises(RangeError):
        SpeakerProfile(0, 150.0, [-1.0, 1.0], (500.0, 1500.0))
    with pytest.raises(RangeError):
        SpeakerProfile(0, 150.0, [1.0], (500.0, 4100.0))
    p = _profile(123.0)
    assert SpeakerProfile.from_dict(json.loads(json.dumps(p.to_dict()))).to_dict() == p.to_dict()


def test_fundamental_peaks_separate_two_profiles():
    # flat harmonic gains and no formant dominance near f0: the strongest low-band peak is f0
    n = 16384
    for f0 in (200.0, 120.0):
        p = SpeakerProfile(0, f0, np.ones(40) * np.arange(1, 41.0) ** -2.0, (300.0, 1500.0, 2800.0),
                           vibrato_depth=0.0, seed=2)
        x = _voiced(sg.synth_utterance(p, 4.0, seed=1).samples)[:n]
        spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
        freqs = np.fft.rfftfreq(len(x), 1 / SR)
        band = (freqs > 60) & (freqs < 1.5 * f0)
        peak = freqs[band][np.argmax(spec[band])]
        assert abs(peak - f0) <= SR / len(x)


def test_autocorrelation_pitch_without_vibrato():
    for f0 in (110.0, 180.0, 260.0):
        p = _profile(f0, depth=0.0)
        x = _voiced(sg.synth_utterance(p, 3.0, seed=4).samples)[:4000]
        ac = np.correlate(x, x, mode="full")[len(x) - 1:]
        lo, hi = int(SR / 420), int(SR / 75)
        lag = lo + int(np.argmax(ac[lo:hi]))
        # parabolic refinement of the peak
        y0, y1, y2 = ac[lag - 1], ac[lag], ac[lag + 1]
        frac = 0.5 * (y0 - y2) / (y0 - 2 * y1 + y2)
        assert abs(SR / (lag + frac) - f0) < 2.0


@pytest.mark.parametrize("kind", sg.NOISE_KINDS)
def test_noise_unit_rms_and_deterministic(kind):
    a = sg.synth_noise(kind, 1.5, seed=9)
    assert np.sqrt(np.mean(a.samples ** 2)) == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_array_equal(a.samples, sg.synth_noise(kind, 1.5, seed=9).samples)


def test_pink_noise_slope():
    x = sg.synth_noise("pink", 8.0, seed=1).samples
    seg = 1024
    frames = x[:len(x) // seg * seg].reshape(-1, seg) * np.hanning(seg)
    psd = (np.abs(np.fft.rfft(frames, axis=1)) ** 2).mean(axis=0)
    f = np.fft.rfftfreq(seg, 1 / SR)
    band = (f >= 100) & (f <= 3000)
    slope_db_per_oct = np.polyfit(np.log2(f[band]), 10 * np.log10(psd[band]), 1)[0]
    assert abs(slope_db_per_oct + 3.0) <= 1.0


def test_unknown_noise_kind():
    with pytest.raises(RangeError):
        sg.synth_noise("brown", 1.0, seed=0)


def test_vad_crop_finds_tone():
    t = np.arange(2 * SR) / SR
    x = np.concatenate([np.zeros(SR), np.sin(2 * np.pi * 440 * t), np.zeros(SR)])
    out = sg.energy_vad_crop(Waveform(x), 2.0)
    assert len(out) == 2 * SR
    # locate the crop inside the input
    idx = [s for s in range(0, len(x) - 2 * SR + 1, 200) if np.array_equal(x[s:s + 2 * SR], out.samples)]
    assert idx and abs(idx[0] - SR) <= 200


def test_vad_crop_silence_and_short_input():
    out = sg.energy_vad_crop(Waveform(np.zeros(3 * SR)), 2.0)
    assert len(out) == 2 * SR and not np.any(out.samples)
    with pytest.raises(RangeError):
        sg.energy_vad_crop(Waveform(np.zeros(SR)), 2.0)


def test_vad_crop_beats_every_window():
    x = sg.synth_utterance(_profile(170.0), 3.0, seed=11).samples
    out = sg.energy_vad_crop(Waveform(x), 2.0).samples
    best = max(np.sum(x[s:s + 2 * SR] ** 2) for s in range(0, len(x) - 2 * SR + 1, 200))
    assert np.sum(out ** 2) >= best - 1e-9


def test_snr_sampler():
    rng = np.random.default_rng(0)
    draws = np.array([sg.sample_snr(rng) for _ in range(10000)])
    assert draws.min() >= -5 and draws.max() <= 25
    for lo, hi in sg.SNR_MODES:
        assert abs(np.mean((draws >= lo) & (draws < hi)) - 1 / 3) <= 0.03
    a = [sg.sample_snr(np.random.default_rng(4)) for _ in range(3)]
    assert a == [sg.sample_snr(np.random.default_rng(4)) for _ in range(3)]


def _sources(n, L=16000):
    return [Waveform(sg.synth_utterance(_profile(100.0 + 60 * k, sid=k, seed=k), L / SR, seed=k).samples)
            for k in range(n)]


def test_mix_offsets_snr_and_noise_free():
    srcs = _sources(2)
    noise = sg.synth_noise("white", 4.0, seed=0)
    m = sg.mix(srcs, noise, 0.5, 10.0, seed=1)
    assert m.start_offsets == [0, 8000]
    ps = np.mean(np.sum([s.samples for s in m.sources], axis=0) ** 2)
    assert abs(10 * np.log10(ps / np.mean(m.noise.samples ** 2)) - 10.0) <= 0.01
    clean = sg.mix(srcs, noise, 0.5, 10.0, seed=1, noise_free=True)
    np.testing.assert_allclose(clean.mixture.samples, np.sum([s.samples for s in clean.sources], axis=0),
                               atol=1e-12, rtol=0)


def test_mix_errors():
    srcs = _sources(2)
    noise = sg.synth_noise("white", 4.0, seed=0)
    with pytest.raises(RangeError):
        sg.mix(srcs, noise, 0.9, 0.0, seed=0)
    with pytest.raises(RangeError):
        sg.mix([], noise, 0.6, 0.0, seed=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 3), st.floats(0.5, 0.8), st.floats(-5, 25), st.integers(0, 2**20))
def test_mixture_reconstructs_from_parts(n_sp, overlap, snr, seed):
    srcs = [Waveform(np.random.default_rng([seed, k]).standard_normal(800)) for k in range(n_sp)]
    m = sg.mix(srcs, sg.synth_noise("white", 0.2, seed=seed), overlap, snr, seed)
    total = np.sum([s.samples for s in m.sources], axis=0) + m.noise.samples
    assert np.max(np.abs(m.mixture.samples - total)) <= 1e-9
    assert len(m.sources) == n_sp and 0.5 <= m.overlap_ratio <= 0.8
    assert m.start_offsets == [k * int(round((1 - overlap) * 800)) for k in range(n_sp)]


def _small_cfg(**kw):
    base = dict(n_speakers=16, n_test_speakers=8, utterances_per_speaker=4, n_sp=2, n_train=12, n_test=6,
                n_single_train=6, n_single_test=4, noise_bank_size=3, noise_seconds=3.0, seed=3)
    base.update(kw)
    return DatasetConfig(**base)


def test_sample_depends_only_on_seed_and_index():
    cfg = _small_cfg()
    train, _ = sg.speaker_split(cfg)
    a = sg.generate_sample(cfg, "train", 5, train)
    sg.generate_sample(cfg, "train", 2, train)
    b = sg.generate_sample(cfg, "train", 5, train)
    np.testing.assert_array_equal(a.mixture.samples, b.mixture.samples)
    assert a.speaker_ids == b.speaker_ids and len(set(a.speaker_ids)) == 2


def test_build_dataset_structure_and_determinism(tmp_path):
    cfg = _small_cfg()
    m1 = sg.build_dataset(cfg, tmp_path / "a")
    sg.build_dataset(cfg, tmp_path / "b")
    for split in ("train", "test", "single_train", "single_test"):
        assert (tmp_path / "a" / split / "manifest.json").read_bytes() == \
            (tmp_path / "b" / split / "manifest.json").read_bytes()
    man = sg.load_manifest(m1["train"])
    assert len(man["entries"]) == 12
    keys = {"id", "mixture_path", "source_paths", "noise_path", "speaker_ids", "overlap_ratio", "snr_db",
            "start_offsets"}
    for e in man["entries"]:
        assert keys <= set(e)
        assert len(set(e["speaker_ids"])) == 2
        assert 0.5 <= e["overlap_ratio"] <= 0.8 and -5 <= e["snr_db"] <= 25
    train_ids = {s for e in man["entries"] for s in e["speaker_ids"]}
    test_ids = {s for e in sg.load_manifest(m1["test"])["entries"] for s in e["speaker_ids"]}
    assert not train_ids & test_ids
    # files decode to 8 kHz 16-bit audio whose parts add up to the mixture up to quantisation
    s = sg.load_entry(man, man["entries"][0])
    parts = np.sum([w.samples for w in s.sources], axis=0) + s.noise.samples
    assert s.mixture.sample_rate == SR
    assert np.max(np.abs(parts - s.mixture.samples)) < 4 / 32767


def test_three_speaker_dataset(tmp_path):
    m = sg.build_dataset(_small_cfg(n_sp=3, n_train=3, n_test=2), tmp_path)
    for e in sg.load_manifest(m["test"])["entries"]:
        assert len(e["speaker_ids"]) == 3 and len(e["source_paths"]) == 3


def test_wav_io_errors(tmp_path):
    with pytest.raises(DataError, match="missing.wav"):
        sg.read_wav(tmp_path / "missing.wav")
    with pytest.raises(DataError):
        sg.write_wav(tmp_path / "no" / "dir" / "x.wav", np.zeros(10))
