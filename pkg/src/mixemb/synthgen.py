"""Synthetic speakers, noise and overlapped noisy mixtures.

Speakers are harmonic sources (fixed f0 with vibrato) shaped by two or
three formant resonators, gated by a pause pattern.  Mixtures follow the
additive model ``x = sum_i s_i + n`` with staggered start offsets that
realise a requested pairwise overlap and a noise gain that realises a
requested speech-to-noise ratio.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import DataError, RangeError

SAMPLE_RATE = 8000
PEAK = 0.5
NOISE_KINDS = ("white", "pink", "babble")
SNR_MODES = ((-5.0, 5.0), (5.0, 15.0), (15.0, 25.0))
VAD_FRAME = 200  # 25 ms at 8 kHz


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise RangeError(f"Waveform must be mono, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise RangeError("Waveform samples must be finite")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class SpeakerProfile:
    speaker_id: int
    f0: float
    harmonic_gains: np.ndarray
    formant_centers: tuple
    vibrato_rate: float = 5.0
    vibrato_depth: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.harmonic_gains = np.asarray(self.harmonic_gains, dtype=np.float64)
        if not 80.0 <= self.f0 <= 400.0:
            raise RangeError(f"f0={self.f0} Hz outside [80, 400]")
        if np.any(self.harmonic_gains < 0):
            raise RangeError("harmonic gains must be nonnegative")
        if not 2 <= len(self.formant_centers) <= 3:
            raise RangeError("need 2 or 3 formant centers")
        if max(self.formant_centers) >= SAMPLE_RATE / 2:
            raise RangeError("formant centers must lie below Nyquist")

    def to_dict(self):
        d = asdict(self)
        d["harmonic_gains"] = [float(g) for g in self.harmonic_gains]
        d["formant_centers"] = [float(f) for f in self.formant_centers]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["formant_centers"] = tuple(d["formant_centers"])
        return cls(**d)


@dataclass
class MixtureSample:
    mixture: Waveform
    sources: list
    noise: Waveform
    speaker_ids: list
    overlap_ratio: float
    snr_db: float
    start_offsets: list = field(default_factory=list)

    @property
    def n_sp(self):
        return len(self.sources)


def random_profile(speaker_id: int, rng: np.random.Generator, f0: float | None = None) -> SpeakerProfile:
    if f0 is None:
        f0 = float(np.exp(rng.uniform(np.log(85.0), np.log(380.0))))
    tilt = rng.uniform(0.7, 1.4)
    n_harm = 40
    gains = np.arange(1, n_harm + 1) ** -tilt * rng.uniform(0.6, 1.0, n_harm)
    f1 = rng.uniform(300.0, 850.0)
    f2 = rng.uniform(max(f1 + 300.0, 900.0), 2300.0)
    f3 = rng.uniform(2500.0, 3400.0)
    return SpeakerProfile(
        speaker_id=int(speaker_id),
        f0=float(f0),
        harmonic_gains=gains,
        formant_centers=(float(f1), float(f2), float(f3)),
        vibrato_rate=float(rng.uniform(4.0, 6.5)),
        vibrato_depth=float(rng.uniform(0.005, 0.02)),
        seed=int(rng.integers(2**31)),
    )


def make_speaker_pool(n: int, seed: int, f0_range=(90.0, 340.0)) -> list[SpeakerProfile]:
    """``n`` profiles whose f0 values are stratified over ``f0_range`` on a log scale.

    Stratification keeps neighbouring identities apart so that pools of a
    few dozen speakers stay distinguishable.
    """
    rng = np.random.default_rng([seed, 7919])
    edges = np.exp(np.linspace(np.log(f0_range[0]), np.log(f0_range[1]), n + 1))
    profiles = []
    for i in range(n):
        lo, hi = edges[i], edges[i + 1]
        f0 = float(np.exp(rng.uniform(np.log(lo) * 0.8 + np.log(hi) * 0.2,
                                      np.log(lo) * 0.2 + np.log(hi) * 0.8)))
        profiles.append(random_profile(i, rng, f0=f0))
    return profiles


def _resonator(fc, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * fc / sr
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    # unit gain at the resonance frequency
    z = np.exp(1j * theta)
    gain = abs(a[0] + a[1] / z + a[2] / z**2)
    return np.array([gain]), a


def _pause_mask(n, rng, sr):
    """0/1 gate with 20-40% silence split into several pauses, with 10 ms ramps."""
    silence_frac = rng.uniform(0.2, 0.4)
    n_voiced = int(round(n * (1 - silence_frac)))
    segs = []
    total = 0
    while total < n_voiced:
        seg = int(rng.uniform(0.2, 0.7) * sr)
        seg = min(seg, n_voiced - total)
        segs.append(seg)
        total += seg
    gaps = rng.dirichlet(np.ones(len(segs) + 1)) * (n - n_voiced)
    gaps = np.floor(gaps).astype(int)
    gaps[-1] += n - n_voiced - gaps.sum()
    mask = np.zeros(n)
    pos = gaps[0]
    for seg, gap in zip(segs, gaps[1:]):
        mask[pos:pos + seg] = 1.0
        pos += seg + gap
    ramp = int(0.01 * sr)
    kernel = np.hanning(2 * ramp + 1)
    kernel /= kernel.sum()
    return np.clip(np.convolve(mask, kernel, mode="same"), 0.0, 1.0)


def synth_utterance(profile: SpeakerProfile, duration: float, seed: int,
                    sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Render one utterance of ``profile``; bit-identical for the same (profile, seed)."""
    if not 1.0 <= duration <= 10.0:
        raise RangeError(f"utterance duration {duration} s outside [1, 10]")
    rng = np.random.default_rng([profile.seed, int(seed), 1])
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    vib_phase = rng.uniform(0, 2 * np.pi)
    f_inst = profile.f0 * (1.0 + profile.vibrato_depth * np.sin(2 * np.pi * profile.vibrato_rate * t + vib_phase))
    phase = 2 * np.pi * np.cumsum(f_inst) / sample_rate
    f_max = profile.f0 * (1.0 + profile.vibrato_depth)
    x = np.zeros(n)
    for h, g in enumerate(profile.harmonic_gains, start=1):
        if h * f_max >= 0.95 * sample_rate / 2:
            break
        x += g * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    for fc in profile.formant_centers:
        b, a = _resonator(fc, 60.0 + 0.06 * fc, sample_rate)
        x = 0.5 * x + signal.lfilter(b, a, x)
    # slow amplitude modulation at syllable-like rates
    am_rate = rng.uniform(3.0, 6.0)
    am = 0.65 + 0.35 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    x = x * am * _pause_mask(n, rng, sample_rate)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (PEAK / peak)
    return Waveform(x, sample_rate)


def synth_noise(kind: str, duration: float, seed: int, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Unit-RMS white, pink (1/f power) or babble (six random talkers) noise."""
    if kind not in NOISE_KINDS:
        raise RangeError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    if duration <= 0:
        raise RangeError("noise duration must be positive")
    rng = np.random.default_rng([int(seed), NOISE_KINDS.index(kind), 2])
    n = int(round(duration * sample_rate))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1.0 / sample_rate)
        f[0] = f[1]
        x = np.fft.irfft(spec / np.sqrt(f), n)
    else:
        x = np.zeros(n)
        talk_dur = min(max(duration, 1.0), 10.0)
        for k in range(6):
            prof = random_profile(-1 - k, rng)
            utt = synth_utterance(prof, talk_dur, int(rng.integers(2**31))).samples
            reps = int(np.ceil(n / len(utt)))
            x += np.roll(np.tile(utt, reps)[:n], int(rng.integers(n)))
    x = x - x.mean()
    x = x / np.sqrt(np.mean(x * x))
    return Waveform(x, sample_rate)


def energy_vad_crop(wave: Waveform, target_len: float) -> Waveform:
    """Keep the ``target_len``-second window (frame-aligned) with the largest energy."""
    n_out = int(round(target_len * wave.sample_rate))
    x = wave.samples
    if len(x) < n_out:
        raise RangeError(f"wave of {len(x)} samples shorter than crop of {n_out}")
    frame = int(round(0.025 * wave.sample_rate))
    csum = np.concatenate([[0.0], np.cumsum(x * x)])
    starts = np.arange(0, len(x) - n_out + 1, frame)
    energies = csum[starts + n_out] - csum[starts]
    best = int(starts[int(np.argmax(energies))])
    return Waveform(x[best:best + n_out].copy(), wave.sample_rate)


def sample_snr(rng: np.random.Generator) -> float:
    """Three equally weighted uniform modes covering [-5, 25] dB."""
    lo, hi = SNR_MODES[int(rng.integers(len(SNR_MODES)))]
    return float(rng.uniform(lo, hi))


def sample_overlap(rng: np.random.Generator) -> float:
    return float(rng.uniform(0.5, 0.8))


def mix(sources, noise: Waveform, overlap_ratio: float, snr_db: float, seed: int,
        noise_free: bool = False) -> MixtureSample:
    """Stagger ``sources`` to the requested overlap and add noise at ``snr_db``."""
    if not sources:
        raise RangeError("mix needs at least one source")
    if not 2 <= len(sources) <= 3:
        raise RangeError(f"mix supports 2 or 3 sources, got {len(sources)}")
    if not 0.5 <= overlap_ratio <= 0.8:
        raise RangeError(f"overlap ratio {overlap_ratio} outside [0.5, 0.8]")
    lengths = {len(s) for s in sources}
    if len(lengths) != 1:
        raise RangeError(f"sources must share one length, got {sorted(lengths)}")
    sr = sources[0].sample_rate
    L = lengths.pop()
    offset = int(round((1.0 - overlap_ratio) * L))
    starts = [k * offset for k in range(len(sources))]
    total = L + starts[-1]
    padded = []
    for s, st in zip(sources, starts):
        p = np.zeros(total)
        p[st:st + L] = s.samples
        padded.append(p)
    speech = np.sum(padded, axis=0)

    rng = np.random.default_rng([int(seed), 3])
    nz = noise.samples
    if len(nz) >= total:
        st = int(rng.integers(len(nz) - total + 1))
        nz = nz[st:st + total]
    else:
        nz = np.tile(nz, int(np.ceil(total / len(nz))))[:total]
    if noise_free:
        scaled = np.zeros(total)
    else:
        p_speech = np.mean(speech**2)
        p_noise = np.mean(nz**2)
        scaled = nz * np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))
    return MixtureSample(
        mixture=Waveform(speech + scaled, sr),
        sources=[Waveform(p, sr) for p in padded],
        noise=Waveform(scaled, sr),
        speaker_ids=[None] * len(sources),
        overlap_ratio=float(overlap_ratio),
        snr_db=float(snr_db),
        start_offsets=starts,
    )


# dataset construction

@dataclass
class DatasetConfig:
    n_speakers: int = 16
    n_test_speakers: int = 8
    split: str = "disjoint"
    utterances_per_speaker: int = 40
    n_sp: int = 2
    n_train: int = 2000
    n_test: int = 400
    n_single_train: int = 2000
    n_single_test: int = 400
    utterance_seconds: float = 3.0
    crop_seconds: float = 2.0
    noise_bank_size: int = 24
    noise_seconds: float = 8.0
    seed: int = 0


_SPLIT_CODES = {"train": 11, "test": 13, "single_train": 17, "single_test": 19}


def speaker_split(cfg: DatasetConfig):
    """Train and test speaker profiles; a disjoint split interleaves test ids among train ids."""
    if cfg.split == "disjoint":
        total = cfg.n_speakers + cfg.n_test_speakers
        pool = make_speaker_pool(total, cfg.seed)
        step = total / cfg.n_test_speakers
        test_idx = {int(step * k + step / 2) for k in range(cfg.n_test_speakers)}
        train = [p for p in pool if p.speaker_id not in test_idx]
        test = [p for p in pool if p.speaker_id in test_idx]
        return train, test
    if cfg.split == "shared":
        pool = make_speaker_pool(cfg.n_speakers, cfg.seed)
        return pool, pool
    raise RangeError(f"unknown split mode {cfg.split!r}")


@lru_cache(maxsize=4096)
def _utterance(profile_json: str, utt_idx: int, seconds: float, crop: float):
    prof = SpeakerProfile.from_dict(json.loads(profile_json))
    wave = synth_utterance(prof, seconds, seed=utt_idx)
    return energy_vad_crop(wave, crop).samples


@lru_cache(maxsize=512)
def _noise(kind: str, bank_seed: int, seconds: float):
    return synth_noise(kind, seconds, bank_seed).samples


def _bank_seed(cfg, split, kind_idx, item):
    # train and test draw from different noise banks
    return int(np.random.SeedSequence([cfg.seed, 101 if "train" in split else 103, kind_idx, item])
               .generate_state(1)[0])


def generate_sample(cfg: DatasetConfig, split: str, index: int, profiles: list) -> MixtureSample:
    """Sample ``index`` of ``split``; depends only on (cfg.seed, split, index)."""
    rng = np.random.default_rng([cfg.seed, _SPLIT_CODES[split], int(index)])
    single = split.startswith("single")
    n_sp = 1 if single else cfg.n_sp
    chosen = rng.choice(len(profiles), size=n_sp, replace=False)
    utt_ids = rng.integers(cfg.utterances_per_speaker, size=n_sp)
    kind_idx = int(rng.integers(len(NOISE_KINDS)))
    bank_item = int(rng.integers(cfg.noise_bank_size))
    snr = sample_snr(rng)
    overlap = sample_overlap(rng)
    mix_seed = int(rng.integers(2**31))
    sources = []
    for c, u in zip(chosen, utt_ids):
        pj = json.dumps(profiles[c].to_dict(), sort_keys=True)
        sources.append(Waveform(_utterance(pj, int(u), cfg.utterance_seconds, cfg.crop_seconds)))
    noise = Waveform(_noise(NOISE_KINDS[kind_idx], _bank_seed(cfg, split, kind_idx, bank_item),
                            cfg.noise_seconds))
    if single:
        sample = add_noise(sources[0], noise, snr, mix_seed)
    else:
        sample = mix(sources, noise, overlap, snr, mix_seed)
    sample.speaker_ids = [int(profiles[c].speaker_id) for c in chosen]
    return sample


def add_noise(source: Waveform, noise: Waveform, snr_db: float, seed: int) -> MixtureSample:
    """Single-speaker variant of :func:`mix` (no stagger)."""
    total = len(source)
    rng = np.random.default_rng([int(seed), 3])
    nz = noise.samples
    if len(nz) >= total:
        st = int(rng.integers(len(nz) - total + 1))
        nz = nz[st:st + total]
    else:
        nz = np.tile(nz, int(np.ceil(total / len(nz))))[:total]
    s = source.samples
    scaled = nz * np.sqrt(np.mean(s**2) / (np.mean(nz**2) * 10.0 ** (snr_db / 10.0)))
    return MixtureSample(Waveform(s + scaled), [Waveform(s.copy())], Waveform(scaled),
                         [None], float("nan"), float(snr_db), [0])


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype(np.int16)
    try:
        wavfile.write(str(path), sample_rate, pcm)
    except OSError as exc:
        raise DataError(f"cannot write wav ({exc.strerror})", path) from exc


def read_wav(path) -> Waveform:
    try:
        sr, pcm = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read wav ({exc})", path) from exc
    if pcm.ndim != 1:
        raise DataError("expected mono wav", path)
    return Waveform(pcm.astype(np.float64) / 32767.0, sr)


def _write_sample(args):
    cfg, split, index, profiles, root = args
    sample = generate_sample(cfg, split, index, profiles)
    sid = f"{split}_{index:05d}"
    # one common gain keeps mixture == sum(sources) + noise while avoiding clipping
    peak = max(np.max(np.abs(sample.mixture.samples)),
               *(np.max(np.abs(s.samples)) for s in sample.sources),
               np.max(np.abs(sample.noise.samples)))
    gain = min(1.0, 0.99 / peak) if peak > 0 else 1.0
    rel = Path(split)
    write_wav(root / rel / f"{sid}_mix.wav", gain * sample.mixture.samples)
    src_paths = []
    for k, s in enumerate(sample.sources):
        p = rel / f"{sid}_s{k}.wav"
        write_wav(root / p, gain * s.samples)
        src_paths.append(str(p))
    write_wav(root / rel / f"{sid}_noise.wav", gain * sample.noise.samples)
    ov = sample.overlap_ratio
    return {
        "id": sid,
        "mixture_path": str(rel / f"{sid}_mix.wav"),
        "source_paths": src_paths,
        "noise_path": str(rel / f"{sid}_noise.wav"),
        "speaker_ids": sample.speaker_ids,
        "overlap_ratio": None if np.isnan(ov) else round(ov, 6),
        "snr_db": round(sample.snr_db, 6),
        "start_offsets": [int(s) for s in sample.start_offsets],
    }


def build_dataset(cfg: DatasetConfig, out_dir, workers: int = 1) -> dict:
    """Write every split of ``cfg`` under ``out_dir``; returns {split: manifest path}.

    Layout: ``<split>/manifest.json`` plus one wav per mixture, source and
    noise; ``speakers.json`` lists the profiles and ``enrollment/`` holds one
    held-out clean utterance per speaker.
    """
    root = Path(out_dir)
    train_prof, test_prof = speaker_split(cfg)
    splits = {"single_train": (cfg.n_single_train, train_prof),
              "single_test": (cfg.n_single_test, test_prof),
              "train": (cfg.n_train, train_prof),
              "test": (cfg.n_test, test_prof)}
    try:
        for name in list(splits) + ["enrollment"]:
            (root / name).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory ({exc.strerror})", root) from exc

    all_prof = {p.speaker_id: p for p in train_prof + test_prof}
    enroll = {}
    for sid, prof in sorted(all_prof.items()):
        # utterance index beyond the mixture pool keeps enrollment held out
        wav = synth_utterance(prof, cfg.utterance_seconds, seed=cfg.utterances_per_speaker + 1000)
        wav = energy_vad_crop(wav, cfg.crop_seconds)
        rel = f"enrollment/spk{sid:03d}.wav"
        write_wav(root / rel, wav.samples)
        enroll[str(sid)] = rel
    meta = {"config": asdict(cfg), "sample_rate": SAMPLE_RATE,
            "train_speakers": [p.speaker_id for p in train_prof],
            "test_speakers": [p.speaker_id for p in test_prof],
            "profiles": [all_prof[k].to_dict() for k in sorted(all_prof)],
            "enrollment": enroll}
    _dump_json(root / "speakers.json", meta)

    paths = {}
    for split, (count, profs) in splits.items():
        jobs = [(cfg, split, i, profs, root) for i in range(count)]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                entries = list(ex.map(_write_sample, jobs, chunksize=16))
        else:
            entries = [_write_sample(j) for j in jobs]
        manifest = {"split": split, "n_sp": 1 if split.startswith("single") else cfg.n_sp,
                    "sample_rate": SAMPLE_RATE, "config": asdict(cfg), "entries": entries}
        paths[split] = root / split / "manifest.json"
        _dump_json(paths[split], manifest)
    return paths


def _dump_json(path, obj):
    try:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write json ({exc.strerror})", path) from exc


def load_manifest(path) -> dict:
    path = Path(path)
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest ({exc})", path) from exc
    manifest["root"] = str(path.parent.parent)
    return manifest


def load_entry(manifest: dict, entry: dict) -> MixtureSample:
    root = Path(manifest["root"])
    mixture = read_wav(root / entry["mixture_path"])
    sources = [read_wav(root / p) for p in entry["source_paths"]]
    noise = read_wav(root / entry["noise_path"])
    ov = entry["overlap_ratio"]
    return MixtureSample(mixture, sources, noise, list(entry["speaker_ids"]),
                         float("nan") if ov is None else ov, entry["snr_db"],
                         list(entry["start_offsets"]))


def cpu_workers(requested: int | None) -> int:
    if requested:
        return max(1, int(requested))
    return max(1, min(4, os.cpu_count() or 1))
