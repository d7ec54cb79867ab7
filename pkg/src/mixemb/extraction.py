"""FiLM-conditioned target extractor and the candidate-selection utilities.

The extractor is a magnitude-mask network: log-magnitude STFT frames go
through three conv blocks, the bottleneck is modulated per channel by
(gamma, beta) predicted from the conditioning embedding, and two more conv
blocks produce a sigmoid mask.  The masked magnitude is resynthesised with
the mixture phase by weighted overlap-add, so the whole path from
parameters to waveform stays differentiable.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import get_window

from . import diffcore as dc
from .diffcore import Tensor
from .encoder import load_checkpoint, save_checkpoint
from .errors import DataError, NormError, RangeError, ShapeError
from .synthgen import SAMPLE_RATE, Waveform

WIN = 200
HOP = 80
N_BINS = WIN // 2 + 1
MAG_FLOOR = 1e-5

_WINDOW = get_window("hann", WIN)
# real-valued inverse DFT bases: frame = Re-part @ _BR + Im-part @ _BI
_BR = np.fft.irfft(np.eye(N_BINS), n=WIN, axis=1)
_BI = np.fft.irfft(1j * np.eye(N_BINS), n=WIN, axis=1)


@dataclass
class FilmParams:
    gamma: np.ndarray
    beta: np.ndarray


def film_apply(features, gamma, beta) -> Tensor:
    """Per-channel affine modulation ``gamma[c] * x[..., c] + beta[c]``.

    ``features`` is (T, C) or (B, T, C); gamma/beta are (C,) or (B, C).
    """
    x, g, b = dc.as_tensor(features), dc.as_tensor(gamma), dc.as_tensor(beta)
    C = x.shape[-1]
    if g.shape[-1] != C or b.shape[-1] != C:
        raise ShapeError("film_apply", x.shape, g.shape, b.shape)
    if x.ndim == 3 and g.ndim == 2:
        g = g.reshape(g.shape[0], 1, C)
        b = b.reshape(b.shape[0], 1, C)
    return x * g + b


# analysis / synthesis

def _pad_lengths(n):
    total = n + 2 * WIN
    extra = (-(total - WIN)) % HOP
    return WIN, WIN + extra


def stft(x: np.ndarray) -> np.ndarray:
    """Complex STFT of (B, L) signals with WIN-sample padding on both sides; (B, N, N_BINS)."""
    x = np.atleast_2d(x)
    left, right = _pad_lengths(x.shape[1])
    xp = np.pad(x, ((0, 0), (left, right)))
    n = 1 + (xp.shape[1] - WIN) // HOP
    idx = np.arange(n)[:, None] * HOP + np.arange(WIN)[None, :]
    return np.fft.rfft(xp[:, idx] * _WINDOW, axis=2)


def _ola_norm(n_frames, length):
    wsum = np.zeros((n_frames - 1) * HOP + WIN)
    for k in range(n_frames):
        wsum[k * HOP:k * HOP + WIN] += _WINDOW**2
    left = WIN
    return 1.0 / np.maximum(wsum[left:left + length], 1e-8)


def istft_masked(mask: Tensor, spec: np.ndarray, length: int) -> Tensor:
    """Differentiable resynthesis of ``mask * spec`` (mixture phase kept); returns (B, length)."""
    B, N, _ = spec.shape
    frames = dc.matmul(mask * spec.real, _BR) + dc.matmul(mask * spec.imag, _BI)
    frames = frames * _WINDOW
    y = dc.overlap_add(frames, HOP)
    return y[:, WIN:WIN + length] * _ola_norm(N, length)


@dataclass
class ExtractorConfig:
    emb_dim: int = 32
    channels: int = 128
    kernel: int = 3
    seed: int = 0


class ExtractorModel:
    def __init__(self, cfg: ExtractorConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 59])
        C, K, D = cfg.channels, cfg.kernel, cfg.emb_dim
        p = {}

        def conv(name, cin, cout, scale=1.0):
            lim = scale * np.sqrt(6.0 / (cin * K + cout))
            p[f"{name}.w"] = Tensor(rng.uniform(-lim, lim, (K, cin, cout)), requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)

        conv("enc.0", N_BINS, C)
        conv("enc.1", C, C)
        conv("enc.2", C, C)
        conv("dec.0", C, C)
        conv("dec.1", C, N_BINS, scale=0.1)
        lim = np.sqrt(6.0 / (D + 2 * C))
        p["film.0.w"] = Tensor(rng.uniform(-lim, lim, (D, 2 * C)), requires_grad=True)
        p["film.0.b"] = Tensor(np.zeros(2 * C), requires_grad=True)
        # zero output layer: gamma == 1 and beta == 0 for every condition at init
        p["film.1.w"] = Tensor(np.zeros((2 * C, 2 * C)), requires_grad=True)
        p["film.1.b"] = Tensor(np.zeros(2 * C), requires_grad=True)
        self.params = p
        self.feat_mean = 0.0
        self.feat_std = 1.0

    def trainable(self):
        return dict(self.params)

    def film_params(self, cond) -> tuple[Tensor, Tensor]:
        p = self.params
        h = dc.tanh(dc.matmul(cond, p["film.0.w"]) + p["film.0.b"])
        out = dc.matmul(h, p["film.1.w"]) + p["film.1.b"]
        C = self.cfg.channels
        return out[..., :C] + 1.0, out[..., C:]

    def features(self, spec):
        return (np.log(np.abs(spec) + MAG_FLOOR) - self.feat_mean) / self.feat_std

    def fit_normalizer(self, mixtures):
        logs = [np.log(np.abs(stft(m)) + MAG_FLOOR) for m in mixtures]
        allv = np.concatenate([x.reshape(-1) for x in logs])
        self.feat_mean = float(allv.mean())
        self.feat_std = float(allv.std())

    def mask(self, spec, cond) -> Tensor:
        p = self.params

        def block(h, name, act=dc.relu):
            return act(dc.conv1d(h, p[f"{name}.w"], p[f"{name}.b"]))

        h = Tensor(self.features(spec))
        h = block(h, "enc.0")
        h = block(h, "enc.1")
        h = block(h, "enc.2", act=dc.tanh)
        gamma, beta = self.film_params(cond)
        h = film_apply(h, gamma, beta)
        h = block(h, "dec.0")
        return block(h, "dec.1", act=dc.sigmoid)

    def forward(self, mixtures: np.ndarray, cond) -> Tensor:
        """(B, L) mixtures and (B, D) conditions -> (B, L) estimates."""
        mixtures = np.atleast_2d(np.asarray(mixtures, dtype=np.float64))
        cond = dc.as_tensor(cond)
        if cond.ndim == 1:
            cond = cond.reshape(1, -1)
        if cond.shape != (mixtures.shape[0], self.cfg.emb_dim):
            raise ShapeError("extract", mixtures.shape, cond.shape)
        spec = stft(mixtures)
        return istft_masked(self.mask(spec, cond), spec, mixtures.shape[1])


def extract(model: ExtractorModel, mixture, condition) -> Waveform:
    """Estimate the talker identified by ``condition`` from ``mixture``."""
    x = np.asarray(getattr(mixture, "samples", mixture), dtype=np.float64)
    if len(x) < WIN:
        raise RangeError(f"extract: mixture of {len(x)} samples shorter than one window")
    with dc.no_grad():
        y = model.forward(x[None], np.asarray(condition, dtype=np.float64)[None]).data[0]
    return Waveform(y, getattr(mixture, "sample_rate", SAMPLE_RATE))


def extract_batch(model: ExtractorModel, mixtures: list, conditions: np.ndarray, batch=16) -> list:
    """Batched inference over variable-length mixtures (zero-padded, then trimmed)."""
    outs = []
    for i in range(0, len(mixtures), batch):
        chunk = mixtures[i:i + batch]
        L = max(len(m) for m in chunk)
        xs = np.zeros((len(chunk), L))
        for k, m in enumerate(chunk):
            xs[k, :len(m)] = m
        with dc.no_grad():
            y = model.forward(xs, conditions[i:i + batch]).data
        outs.extend(y[k, :len(m)].copy() for k, m in enumerate(chunk))
    return outs


def save_extractor(model: ExtractorModel, path, extra=None) -> str:
    tensors = {n: p.data for n, p in model.params.items()}
    tensors["norm.mean"] = np.array([model.feat_mean])
    tensors["norm.std"] = np.array([model.feat_std])
    return save_checkpoint(path, tensors, asdict(model.cfg), "extractor", extra)


def load_extractor(path) -> ExtractorModel:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "extractor":
        raise DataError(f"checkpoint kind {meta.get('kind')!r} is not an extractor", path)
    model = ExtractorModel(ExtractorConfig(**meta["config"]))
    for n, p in model.params.items():
        p.data = tensors[n]
    model.feat_mean = float(tensors["norm.mean"][0])
    model.feat_std = float(tensors["norm.std"][0])
    return model


# candidate selection and probes

def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise NormError("zero-norm embedding")
    return v / n


def candidate_cosines(candidates, reference) -> np.ndarray:
    cands = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if cands.shape[0] == 0:
        raise RangeError("empty candidate set")
    return _unit(cands) @ _unit(reference)


def select_target(candidates, reference) -> tuple[int, float]:
    """Index and cosine of the candidate closest to ``reference`` (lowest index on ties)."""
    cos = candidate_cosines(candidates, reference)
    idx = int(np.argmax(cos))
    return idx, float(cos[idx])


def cosine_margin(candidates, reference) -> float:
    """max(cos) - min(cos) between the candidates and a reference embedding."""
    if len(candidates) < 2:
        raise RangeError("cosine_margin needs at least two candidates")
    cos = candidate_cosines(candidates, reference)
    return float(cos.max() - cos.min())


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise RangeError(f"alpha={alpha} outside [0, 1]")


def interp_embeddings(e1, e2, alpha: float) -> np.ndarray:
    """(1 - alpha) * e1 + alpha * e2, deliberately left un-normalised."""
    _check_alpha(alpha)
    e1, e2 = np.asarray(e1, dtype=np.float64), np.asarray(e2, dtype=np.float64)
    if alpha == 0.0:
        return e1.copy()
    if alpha == 1.0:
        return e2.copy()
    return (1.0 - alpha) * e1 + alpha * e2


def _shift(x, lag):
    """y[n] = x[n + lag], zero outside the signal."""
    y = np.zeros_like(x)
    if lag >= 0:
        y[:len(x) - lag] = x[lag:]
    else:
        y[-lag:] = x[:len(x) + lag]
    return y


def align_gain_lag(est, ref, max_lag: int = 80):
    """Least-squares gain and small time shift mapping ``est`` onto ``ref``.

    The lag maximises |normalised cross-correlation| over [-max_lag, max_lag]
    (ties: smaller |lag|, then the negative one).  Returns
    ``(aligned Waveform, gain, lag)`` with ``aligned[n] = gain * est[n + lag]``.
    """
    e = np.asarray(getattr(est, "samples", est), dtype=np.float64)
    r = np.asarray(getattr(ref, "samples", ref), dtype=np.float64)
    if e.shape != r.shape:
        raise ShapeError("align_gain_lag", e.shape, r.shape)
    if not 0 <= max_lag <= 80:
        raise RangeError(f"max_lag={max_lag} outside [0, 80]")
    if not np.any(e):
        raise RangeError("align_gain_lag: estimate is all zeros")
    rn = np.linalg.norm(r)
    best = None
    for lag in sorted(range(-max_lag, max_lag + 1), key=lambda k: (abs(k), k)):
        es = _shift(e, lag)
        en = np.linalg.norm(es)
        if en == 0 or rn == 0:
            continue
        score = abs(float(es @ r)) / (en * rn)
        if best is None or score > best[0]:
            best = (score, lag, es)
    if best is None:
        return Waveform(np.zeros_like(r)), 0.0, 0
    _, lag, es = best
    gain = float(es @ r) / float(es @ es)
    return Waveform(gain * es, getattr(ref, "sample_rate", SAMPLE_RATE)), gain, lag


def interp_signals(clean, degraded, alpha: float) -> Waveform:
    """Sample-wise (1 - alpha) * clean + alpha * degraded."""
    _check_alpha(alpha)
    c = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    d = np.asarray(getattr(degraded, "samples", degraded), dtype=np.float64)
    if c.shape != d.shape:
        raise ShapeError("interp_signals", c.shape, d.shape)
    if alpha == 0.0:
        return Waveform(c.copy())
    if alpha == 1.0:
        return Waveform(d.copy())
    return Waveform((1.0 - alpha) * c + alpha * d)
