"""Log-mel front-end and the teacher/student speaker-embedding networks.

Both networks share one architecture: a stack of 1-D conv blocks (conv +
tanh) over log-mel frames, followed by one or more heads.  A head is
attentive statistics pooling, a linear projection to D dimensions and an
l2 normalisation.  The teacher has one head; the student has ``n_sp``
independent heads reading the same trunk output and emits an unordered
set of embeddings.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DataError, RangeError, ShapeError
from .synthgen import SAMPLE_RATE, Waveform

WIN = 200  # 25 ms
HOP = 80  # 10 ms
N_FFT = 256
N_MELS = 40
LOG_FLOOR = 1e-6
VAR_FLOOR = 1e-9


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, F)
    frame_rate: float = SAMPLE_RATE / HOP

    @property
    def n_frames(self):
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sr=SAMPLE_RATE):
    """Triangular filters on the mel scale; returns (weights (n_mels, n_bins), centers in Hz)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sr / 2), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sr)
    fb = np.zeros((n_mels, len(freqs)))
    for i in range(n_mels):
        lo, c, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb, edges[1:-1]


_FB, MEL_CENTERS = mel_filterbank()
_WINDOW = get_window("hann", WIN)


def frame_signal(x, win=WIN, hop=HOP):
    n = 1 + (len(x) - win) // hop
    idx = np.arange(n)[:, None] * hop + np.arange(win)[None, :]
    return x[idx]


def featurize(wave: Waveform) -> FeatureSequence:
    """40 log-mel energies per 25 ms frame, 10 ms hop."""
    x = wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)
    if len(x) < WIN:
        raise RangeError(f"featurize: {len(x)} samples is shorter than one {WIN}-sample window")
    frames = frame_signal(x) * _WINDOW
    power = np.abs(np.fft.rfft(frames, N_FFT, axis=1)) ** 2
    return FeatureSequence(np.log(power @ _FB.T + LOG_FLOOR))


# parameters and initialisation

def _glorot(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-lim, lim, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def asp_pool(frames: Tensor, att_w, att_b, att_v, mask=None) -> Tensor:
    """Attentive statistics pooling.

    frames: (B, T, C) or (T, C); returns concat(mean, std) of shape (B, 2C)
    or (2C,).  ``mask`` (B, T) marks valid frames with 1.
    """
    frames = dc.as_tensor(frames)
    squeeze = frames.ndim == 2
    if squeeze:
        frames = frames.reshape(1, *frames.shape)
        if mask is not None:
            mask = np.asarray(mask)[None]
    if frames.shape[1] == 0:
        raise ShapeError("asp_pool", frames.shape, detail="needs at least one frame")
    scores = dc.matmul(dc.tanh(dc.matmul(frames, att_w) + att_b), att_v.reshape(-1, 1))
    scores = scores.reshape(frames.shape[0], frames.shape[1])
    if mask is not None:
        scores = scores + np.where(np.asarray(mask) > 0, 0.0, -1e9)
    w = dc.softmax(scores, axis=1).reshape(frames.shape[0], frames.shape[1], 1)
    mu = dc.sum_(w * frames, axis=1)
    second = dc.sum_(w * frames * frames, axis=1)
    sigma = dc.sqrt(dc.clamp_min(second - mu * mu, VAR_FLOOR))
    stats = dc.concat([mu, sigma], axis=1)
    return stats.reshape(-1) if squeeze else stats


@dataclass
class EncoderConfig:
    feat_dim: int = N_MELS
    channels: int = 64
    depth: int = 4
    kernel: int = 3
    att_dim: int = 32
    emb_dim: int = 32
    n_heads: int = 1
    freeze_depth: int = 0
    seed: int = 0


class EncoderModel:
    """Shared conv trunk plus ``n_heads`` ASP + projection heads."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 31])
        self.params: dict[str, Tensor] = {}
        cin = cfg.feat_dim
        for i in range(cfg.depth):
            self.params[f"trunk.{i}.w"] = _glorot(rng, cin * cfg.kernel, cfg.channels,
                                                  (cfg.kernel, cin, cfg.channels))
            self.params[f"trunk.{i}.b"] = _zeros((cfg.channels,))
            cin = cfg.channels
        for h in range(cfg.n_heads):
            self._init_head(h, rng)
        # feature normalisation constants, fitted on training data, never trained
        self.feat_mean = np.zeros(cfg.feat_dim)
        self.feat_std = np.ones(cfg.feat_dim)
        self.set_freeze_depth(cfg.freeze_depth)

    def _init_head(self, h, rng):
        C, A, D = self.cfg.channels, self.cfg.att_dim, self.cfg.emb_dim
        self.params[f"head.{h}.att_w"] = _glorot(rng, C, A, (C, A))
        self.params[f"head.{h}.att_b"] = _zeros((A,))
        self.params[f"head.{h}.att_v"] = _glorot(rng, A, 1, (A,))
        self.params[f"head.{h}.proj_w"] = _glorot(rng, 2 * C, D, (2 * C, D))
        self.params[f"head.{h}.proj_b"] = _zeros((D,))

    @property
    def n_heads(self):
        return self.cfg.n_heads

    def trunk_names(self, layer=None):
        layers = range(self.cfg.depth) if layer is None else [layer]
        return [f"trunk.{i}.{p}" for i in layers for p in ("w", "b")]

    def set_freeze_depth(self, k: int):
        if not 0 <= k <= self.cfg.depth:
            raise RangeError(f"freeze depth {k} outside [0, {self.cfg.depth}]")
        self.cfg.freeze_depth = k
        for i in range(self.cfg.depth):
            for name in self.trunk_names(i):
                self.params[name].requires_grad = i >= k
        return self

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def fit_normalizer(self, feats):
        stacked = np.concatenate([f.frames if isinstance(f, FeatureSequence) else f for f in feats])
        self.feat_mean = stacked.mean(axis=0)
        self.feat_std = stacked.std(axis=0) + 1e-3

    def prepare(self, feats):
        """Normalise and zero-pad a list of (T_i, F) feature matrices to (B, T_max, F) plus mask."""
        mats = [f.frames if isinstance(f, FeatureSequence) else np.asarray(f) for f in feats]
        for m in mats:
            if m.ndim != 2 or m.shape[1] != self.cfg.feat_dim:
                raise ShapeError("prepare", m.shape, (None, self.cfg.feat_dim))
        t_max = max(m.shape[0] for m in mats)
        x = np.zeros((len(mats), t_max, self.cfg.feat_dim))
        mask = np.zeros((len(mats), t_max))
        for i, m in enumerate(mats):
            x[i, :len(m)] = (m - self.feat_mean) / self.feat_std
            mask[i, :len(m)] = 1.0
        return x, mask

    def trunk(self, x, mask) -> Tensor:
        h = dc.as_tensor(x)
        m = mask[..., None]
        for i in range(self.cfg.depth):
            h = dc.tanh(dc.conv1d(h, self.params[f"trunk.{i}.w"], self.params[f"trunk.{i}.b"]))
            h = h * m  # keep padding frames at zero
        return h

    def head(self, h, trunk_out: Tensor, mask) -> Tensor:
        p = self.params
        stats = asp_pool(trunk_out, p[f"head.{h}.att_w"], p[f"head.{h}.att_b"], p[f"head.{h}.att_v"], mask)
        return dc.l2_normalize(dc.matmul(stats, p[f"head.{h}.proj_w"]) + p[f"head.{h}.proj_b"], axis=-1)

    def forward(self, x, mask) -> Tensor:
        """(B, n_heads, D) unit-norm embeddings for prepared input."""
        h = self.trunk(x, mask)
        outs = [self.head(k, h, mask).reshape(h.shape[0], 1, self.cfg.emb_dim) for k in range(self.n_heads)]
        return outs[0] if len(outs) == 1 else dc.concat(outs, axis=1)


def teacher_forward(model: EncoderModel, features) -> np.ndarray:
    """One unit-norm embedding per input; accepts a FeatureSequence or a list of them."""
    if model.n_heads != 1:
        raise RangeError(f"teacher_forward needs a 1-head model, got {model.n_heads} heads")
    single = isinstance(features, (FeatureSequence, np.ndarray))
    feats = [features] if single else list(features)
    with dc.no_grad():
        out = model.forward(*model.prepare(feats)).data[:, 0]
    return out[0] if single else out


def student_forward(model: EncoderModel, features, n_sp: int | None = None) -> np.ndarray:
    """Unordered set of ``n_sp`` unit-norm embeddings per input: (n_sp, D) or (B, n_sp, D)."""
    if n_sp is not None and model.n_heads != n_sp:
        raise RangeError(f"student_forward: model has {model.n_heads} heads, expected {n_sp}")
    single = isinstance(features, (FeatureSequence, np.ndarray))
    feats = [features] if single else list(features)
    with dc.no_grad():
        out = model.forward(*model.prepare(feats)).data
    return out[0] if single else out


def embed_batched(model, feats, batch=64, fn=None):
    fn = fn or (teacher_forward if model.n_heads == 1 else student_forward)
    outs = [fn(model, feats[i:i + batch]) for i in range(0, len(feats), batch)]
    return np.concatenate(outs) if outs else np.zeros((0,))


def set_freeze_depth(model: EncoderModel, k: int) -> EncoderModel:
    return model.set_freeze_depth(k)


def make_student(teacher: EncoderModel, n_sp: int, freeze_depth: int = 2, seed: int = 1,
                 copy_projection: bool = False) -> EncoderModel:
    """Student with the teacher's trunk weights and ``n_sp`` freshly initialised heads.

    With ``copy_projection`` every head starts from the teacher's output
    projection; attention weights stay random so the heads still differ.
    """
    cfg = EncoderConfig(**{**asdict(teacher.cfg), "n_heads": n_sp, "freeze_depth": 0, "seed": seed})
    student = EncoderModel(cfg)
    for name in teacher.trunk_names():
        student.params[name].data = teacher.params[name].data.copy()
    if copy_projection:
        for h in range(n_sp):
            for k in ("proj_w", "proj_b"):
                student.params[f"head.{h}.{k}"].data = teacher.params[f"head.0.{k}"].data.copy()
    student.feat_mean = teacher.feat_mean.copy()
    student.feat_std = teacher.feat_std.copy()
    return student.set_freeze_depth(freeze_depth)


# checkpoints: directory with meta.json + tensors.bin (little-endian float64)

def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict, kind: str, extra=None) -> str:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        entries = []
        offset = 0
        with open(path / "tensors.bin", "wb") as fh:
            for name in sorted(tensors):
                arr = np.ascontiguousarray(tensors[name], dtype="<f8")
                fh.write(arr.tobytes())
                entries.append({"name": name, "shape": list(arr.shape), "dtype": "float64",
                                "offset": offset, "nbytes": arr.nbytes})
                offset += arr.nbytes
        digest = checkpoint_hash(path)
        meta = {"kind": kind, "config": config, "tensors": entries, "byte_order": "little",
                "sha256": digest, **(extra or {})}
        with open(path / "meta.json", "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint ({exc.strerror})", path) from exc
    return digest


def load_checkpoint(path):
    path = Path(path)
    try:
        with open(path / "meta.json") as fh:
            meta = json.load(fh)
        raw = (path / "tensors.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint ({exc})", path) from exc
    tensors = {}
    for e in meta["tensors"]:
        buf = raw[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).copy()
    return meta, tensors


def checkpoint_hash(path) -> str:
    return hashlib.sha256((Path(path) / "tensors.bin").read_bytes()).hexdigest()


def save_encoder(model: EncoderModel, path, extra=None) -> str:
    tensors = {n: p.data for n, p in model.params.items()}
    tensors["norm.mean"] = model.feat_mean
    tensors["norm.std"] = model.feat_std
    return save_checkpoint(path, tensors, asdict(model.cfg), "encoder", extra)


def load_encoder(path) -> EncoderModel:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "encoder":
        raise DataError(f"checkpoint kind {meta.get('kind')!r} is not an encoder", path)
    model = EncoderModel(EncoderConfig(**meta["config"]))
    for n, p in model.params.items():
        p.data = tensors[n]
    model.feat_mean = tensors["norm.mean"]
    model.feat_std = tensors["norm.std"]
    return model
