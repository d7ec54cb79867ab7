"""Dataset loading, feature caching and the three training loops."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from ..encoder import (EncoderConfig, EncoderModel, embed_batched, featurize, make_student,
                       student_forward, teacher_forward)
from ..errors import ConfigError, DataError
from ..extraction import ExtractorConfig, ExtractorModel, select_target
from ..objectives import ArcFaceHead, arcface_loss, pit_cosine_loss_batch, si_sdr_loss
from ..synthgen import SAMPLE_RATE, load_entry, load_manifest, read_wav, sample_snr
from .config import ExperimentConfig

log = logging.getLogger("mixemb")


@dataclass
class SplitData:
    """In-memory copy of one manifest split (float32 to halve memory)."""
    name: str
    n_sp: int
    ids: list
    mixtures: list
    sources: list  # per entry: list of mixture-aligned padded sources
    speaker_ids: list
    offsets: list
    crop_len: int
    root: Path = None
    _feats: list = field(default=None, repr=False)

    def __len__(self):
        return len(self.ids)

    def active(self, i, k):
        """Source ``k`` of entry ``i`` restricted to its own crop window."""
        st = self.offsets[i][k]
        return self.sources[i][k][st:st + self.crop_len].astype(np.float64)

    def mixture(self, i):
        return self.mixtures[i].astype(np.float64)

    def source(self, i, k):
        return self.sources[i][k].astype(np.float64)

    def features(self):
        if self._feats is None:
            self._feats = [featurize(self.mixture(i)).frames for i in range(len(self))]
        return self._feats


def load_split(data_dir, split: str, limit: int | None = None) -> SplitData:
    path = Path(data_dir) / split / "manifest.json"
    if not path.exists():
        raise DataError("dataset split not found (run gen-data first)", path)
    manifest = load_manifest(path)
    entries = manifest["entries"][:limit] if limit else manifest["entries"]
    crop_len = int(round(manifest["config"]["crop_seconds"] * manifest["sample_rate"]))
    mixtures, sources, spk, offs, ids = [], [], [], [], []
    for e in entries:
        s = load_entry(manifest, e)
        mixtures.append(s.mixture.samples.astype(np.float32))
        sources.append([w.samples.astype(np.float32) for w in s.sources])
        spk.append([int(x) for x in e["speaker_ids"]])
        offs.append([int(x) for x in e["start_offsets"]])
        ids.append(e["id"])
    return SplitData(split, int(manifest["n_sp"]), ids, mixtures, sources, spk, offs, crop_len,
                     Path(manifest["root"]))


def load_enrollment(data_dir) -> dict:
    import json
    meta_path = Path(data_dir) / "speakers.json"
    try:
        meta = json.loads(meta_path.read_text())
    except OSError as exc:
        raise DataError("cannot read speakers.json", meta_path) from exc
    return {int(k): read_wav(Path(data_dir) / v).samples for k, v in meta["enrollment"].items()}


def _encoder_cfg(cfg: ExperimentConfig, n_heads: int, freeze: int) -> EncoderConfig:
    m = cfg.model
    return EncoderConfig(channels=m.channels, depth=m.depth, kernel=m.kernel, att_dim=m.att_dim,
                         emb_dim=m.emb_dim, n_heads=n_heads, freeze_depth=freeze, seed=cfg.seed)


def _step(loss, params, opt, clip):
    opt.zero_grad()
    loss.backward()
    dc.clip_grad_norm(params, clip)
    opt.step()


def _log_progress(name, step, steps, history, every):
    if step % every == 0 or step == steps - 1:
        window = history[-every:]
        log.info("%s step %d/%d loss %.4f", name, step, steps, float(np.mean(window)))


# teacher

def train_teacher(cfg: ExperimentConfig, data: SplitData):
    """ArcFace training of the single-head encoder on noisy single-speaker clips."""
    if data.n_sp != 1:
        raise ConfigError(f"teacher needs a single-speaker split, got n_sp={data.n_sp}")
    tc = cfg.train
    speakers = sorted({s[0] for s in data.speaker_ids})
    label_of = {s: i for i, s in enumerate(speakers)}
    labels = np.array([label_of[s[0]] for s in data.speaker_ids])
    model = EncoderModel(_encoder_cfg(cfg, 1, 0))
    feats = data.features()
    model.fit_normalizer(feats)
    X, M = model.prepare(feats)
    if tc.teacher_remix:
        clean = [data.source(i, 0) for i in range(len(data))]
        noise = [data.mixture(i) - clean[i] for i in range(len(data))]
    head = ArcFaceHead(len(speakers), cfg.model.emb_dim, tc.arcface_scale, tc.arcface_margin, seed=cfg.seed)
    params = {**model.trainable(), **head.params()}
    opt = dc.Adam(params, lr=tc.teacher_lr)
    rng = np.random.default_rng([cfg.seed, 101])
    history = []
    for step in range(tc.teacher_steps):
        idx = rng.choice(len(labels), size=min(tc.teacher_batch, len(labels)), replace=False)
        if tc.teacher_remix:
            xb, mb = model.prepare([featurize(_remix(clean[i], noise, rng)).frames for i in idx])
        else:
            xb, mb = X[idx], M[idx]
        xb, mb = _random_crops(xb, mb, rng, tc.teacher_crop_min)
        emb = model.forward(xb, mb).reshape(len(idx), -1)
        loss = arcface_loss(emb, labels[idx], head)
        _step(loss, params, opt, tc.grad_clip)
        opt.state.lr = _cosine_lr(tc.teacher_lr, step + 1, tc.teacher_steps)
        history.append(loss.item())
        _log_progress("teacher", step, tc.teacher_steps, history, tc.log_every)
    return model, head, history, speakers


def _remix(clean, noise_pool, rng):
    """Clean clip plus a random pool noise at a freshly drawn SNR (same SNR law as the dataset)."""
    n = noise_pool[int(rng.integers(len(noise_pool)))]
    if len(n) > len(clean):
        st = int(rng.integers(len(n) - len(clean) + 1))
        n = n[st:st + len(clean)]
    elif len(n) < len(clean):
        n = np.resize(n, len(clean))
    pn = float(np.mean(n ** 2))
    if pn == 0.0:
        return clean
    gain = np.sqrt(float(np.mean(clean ** 2)) / (pn * 10.0 ** (sample_snr(rng) / 10.0)))
    return clean + gain * n


def _random_crops(x, mask, rng, min_frac):
    """One shared random length per batch, independent random start per item."""
    if min_frac >= 1.0:
        return x, mask
    T = x.shape[1]
    n = int(rng.integers(max(1, int(T * min_frac)), T + 1))
    starts = rng.integers(0, T - n + 1, size=len(x))
    rows = starts[:, None] + np.arange(n)
    return np.take_along_axis(x, rows[..., None], axis=1), np.take_along_axis(mask, rows, axis=1)


def _cosine_lr(base, step, total, floor=0.05):
    return base * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * min(step, total) / max(total, 1))))


# student

def teacher_targets(teacher: EncoderModel, data: SplitData) -> np.ndarray:
    """(N, n_sp, D) teacher embeddings of every clean source (own crop window)."""
    feats = [featurize(data.active(i, k)).frames for i in range(len(data)) for k in range(data.n_sp)]
    emb = embed_batched(teacher, feats)
    return emb.reshape(len(data), data.n_sp, -1)


def train_student(cfg: ExperimentConfig, data: SplitData, teacher: EncoderModel, targets=None):
    """Permutation-invariant cosine distillation of the teacher into an n_sp-head student."""
    if data.n_sp != cfg.data.n_sp:
        raise ConfigError(f"dataset has n_sp={data.n_sp} but config asks for n_sp={cfg.data.n_sp}")
    tc = cfg.train
    if targets is None:
        targets = teacher_targets(teacher, data)
    student = make_student(teacher, data.n_sp, cfg.model.freeze_depth, seed=cfg.seed + 1,
                           copy_projection=cfg.model.student_copy_projection)
    feats = data.features()
    params = student.trainable()
    opt = dc.Adam(params, lr=tc.student_lr)
    rng = np.random.default_rng([cfg.seed, 103])
    history = []
    for step in range(tc.student_steps):
        idx = rng.choice(len(data), size=min(tc.student_batch, len(data)), replace=False)
        tgt = targets[idx]
        if tc.student_speed_range and rng.random() < tc.student_speed_prob:
            mixes, tgt_feats = [], []
            for i in idx:
                mix, srcs, spans = perturbed_mix(data, i, rng, tc.student_speed_range)
                mixes.append(featurize(mix).frames)
                tgt_feats.extend(featurize(x[a:b]).frames for x, (a, b) in zip(srcs, spans))
            X, M = student.prepare(mixes)
            tgt = embed_batched(teacher, tgt_feats).reshape(len(idx), data.n_sp, -1)
        else:
            X, M = student.prepare([feats[i] for i in idx])
        pred = student.forward(X, M)
        loss, _ = pit_cosine_loss_batch(pred, tgt)
        _step(loss, params, opt, tc.grad_clip)
        opt.state.lr = _cosine_lr(tc.student_lr, step + 1, tc.student_steps)
        history.append(loss.item())
        _log_progress("student", step, tc.student_steps, history, tc.log_every)
    return student, history


def student_candidates(student: EncoderModel, data: SplitData) -> np.ndarray:
    return embed_batched(student, data.features(), fn=student_forward)


def oracle_selection(candidates: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """(N, n_sp) index of the candidate chosen for each source by max cosine to its teacher reference."""
    return np.array([[select_target(candidates[i], targets[i, k])[0] for k in range(targets.shape[1])]
                     for i in range(len(targets))])


# extractor

def _pad_batch(arrays):
    L = max(len(a) for a in arrays)
    out = np.zeros((len(arrays), L))
    mask = np.zeros((len(arrays), L))
    for i, a in enumerate(arrays):
        out[i, :len(a)] = a
        mask[i, :len(a)] = 1.0
    return out, mask


def _target_crops(data, idx, tgt, n, rng):
    """Length-``n`` windows centred inside each chosen target's active span.

    Windows may reach past the span, so the extractor also sees stretches
    where its target is silent and must be suppressed.
    """
    mix, ref, mask = np.zeros((len(idx), n)), np.zeros((len(idx), n)), np.zeros((len(idx), n))
    for j, (i, k) in enumerate(zip(idx, tgt)):
        L = len(data.mixtures[i])
        m = min(n, L)
        centre = data.offsets[i][k] + int(rng.integers(min(data.crop_len, L - data.offsets[i][k])))
        st = int(np.clip(centre - m // 2, 0, L - m))
        mix[j, :m] = data.mixtures[i][st:st + m]
        ref[j, :m] = data.sources[i][k][st:st + m]
        mask[j, :m] = 1.0
    return mix, ref, mask


def _speed(x, rate):
    """``x(rate * t)`` on the original sample grid, zero past the end (pitch and formants scale by rate)."""
    n = np.arange(len(x))
    return np.interp(rate * n, n, x, right=0.0)


def perturbed_mix(data, i, rng, speed_range):
    """Re-mix entry ``i`` from independently speed-perturbed sources and its original noise.

    Returns (mixture, sources, spans) where ``spans[j]`` is the (start, stop)
    of source ``j``'s active window after perturbation.
    """
    L = len(data.mixtures[i])
    rates = np.exp(rng.uniform(math.log(speed_range[0]), math.log(speed_range[1]), size=data.n_sp))
    srcs = [data.source(i, j) for j in range(data.n_sp)]
    noise = data.mixture(i) - np.sum(srcs, axis=0)
    srcs = [_speed(x, r) for x, r in zip(srcs, rates)]
    spans = [(int(math.ceil(data.offsets[i][j] / r)), min(L, int((data.offsets[i][j] + data.crop_len) / r)))
             for j, r in enumerate(rates)]
    return np.sum(srcs, axis=0) + noise, srcs, spans


def _perturbed_item(data, i, k, n, rng, speed_range):
    """Perturbed (mixture window, target window, clean target span) centred on target ``k``."""
    mix, srcs, spans = perturbed_mix(data, i, rng, speed_range)
    a, b = spans[k]
    m = min(n, len(mix))
    st = int(np.clip(a + int(rng.integers(b - a)) - m // 2, 0, len(mix) - m))
    return mix[st:st + m], srcs[k][st:st + m], srcs[k][a:b]


def _perturbed_batch(data, idx, tgt, n, rng, speed_range, teacher, student):
    """Perturbed windows plus the student candidate that best matches each perturbed target."""
    items = [_perturbed_item(data, i, k, n, rng, speed_range) for i, k in zip(idx, tgt)]
    mix, mask = _pad_batch([it[0] for it in items])
    ref, _ = _pad_batch([it[1] for it in items])
    cands = student_forward(student, [featurize(it[0]).frames for it in items])
    refs = embed_batched(teacher, [featurize(it[2]).frames for it in items])
    cond = np.stack([cands[j, select_target(cands[j], refs[j])[0]] for j in range(len(items))])
    return mix, ref, mask, cond


def train_extractor(cfg: ExperimentConfig, data: SplitData, candidates: np.ndarray, targets: np.ndarray,
                    teacher: EncoderModel | None = None, student: EncoderModel | None = None):
    """Negative SI-SDR training of the FiLM extractor on teacher-matched candidates.

    With ``train.tse_speed_range`` set, each item is re-mixed from speed-perturbed
    sources (new pitch and formants, hence unseen voices) and conditioned on the
    student candidate selected against the teacher embedding of the perturbed
    target; this needs both encoders.
    """
    tc = cfg.train
    speed = tc.tse_speed_range
    if speed and (teacher is None or student is None):
        raise ConfigError("train.tse_speed_range needs the teacher and student encoders")
    model = ExtractorModel(ExtractorConfig(emb_dim=cfg.model.emb_dim, channels=cfg.model.extractor_channels,
                                           kernel=cfg.model.extractor_kernel, seed=cfg.seed))
    model.fit_normalizer([data.mixture(i) for i in range(0, len(data), max(1, len(data) // 200))])
    chosen = oracle_selection(candidates, targets)
    params = model.trainable()
    opt = dc.Adam(params, lr=tc.tse_lr)
    rng = np.random.default_rng([cfg.seed, 107])
    crop = int(round(tc.tse_crop_seconds * SAMPLE_RATE))
    history = []
    for step in range(tc.tse_steps):
        idx = rng.choice(len(data), size=min(tc.tse_batch, len(data)), replace=False)
        tgt = rng.integers(data.n_sp, size=len(idx))
        if speed and rng.random() < tc.tse_speed_prob:
            mix, ref, mask, cond = _perturbed_batch(data, idx, tgt, crop or len(data.mixtures[0]), rng, speed,
                                                    teacher, student)
        else:
            if crop > 0:
                mix, ref, mask = _target_crops(data, idx, tgt, crop, rng)
            else:
                mix, mask = _pad_batch([data.mixture(i) for i in idx])
                ref, _ = _pad_batch([data.source(i, k) for i, k in zip(idx, tgt)])
            cond = np.stack([candidates[i, chosen[i, k]] for i, k in zip(idx, tgt)])
        est = model.forward(mix, cond)
        loss = si_sdr_loss(est, ref, mask)
        _step(loss, params, opt, tc.grad_clip)
        opt.state.lr = _cosine_lr(tc.tse_lr, step + 1, tc.tse_steps)
        history.append(loss.item())
        _log_progress("tse", step, tc.tse_steps, history, tc.log_every)
    return model, history
