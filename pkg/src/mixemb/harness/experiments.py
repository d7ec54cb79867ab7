"""Experiment commands: each reads a materialized config and writes results under ``cfg.out``.

Layout below ``cfg.out``::

    data_sp{n}/      synthetic dataset (gen-data)
    teacher/         teacher encoder checkpoint + run.json
    student{n}/      n-head student checkpoint + run.json
    tse{n}/          extractor checkpoint + run.json
    results/         metric CSVs (one ``# config:`` header line) and JSON mirrors
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from ..encoder import (embed_batched, featurize, load_encoder, make_student, save_encoder,
                       teacher_forward)
from ..errors import ConfigError, DataError
from ..extraction import (align_gain_lag, cosine_margin, extract_batch, interp_embeddings, interp_signals,
                          load_extractor, save_extractor, select_target)
from ..metrics import CONVENTIONS, cluster_report, si_sdri, spherical_kmeans
from ..objectives import hungarian, si_sdr
from ..synthgen import build_dataset, cpu_workers
from . import pipeline as pl
from .config import ExperimentConfig

log = logging.getLogger("mixemb")

@dataclass
class RunRecord:
    command: str
    config: dict
    checkpoint_hash: str | None = None
    metrics: dict = field(default_factory=dict)
    duration_s: float = 0.0

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x).__name__)


def paths(cfg: ExperimentConfig, n_sp: int | None = None) -> dict:
    n = cfg.data.n_sp if n_sp is None else n_sp
    out = Path(cfg.out)
    return {"data": out / f"data_sp{n}", "teacher": out / "teacher", "student": out / f"student{n}",
            "tse": out / f"tse{n}", "results": out / "results"}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 10))
    return str(v)


def write_results(cfg: ExperimentConfig, name: str, rows: list, extra: dict | None = None) -> Path:
    """``results/<name>.csv`` (config and conventions header + rows) and a ``.json`` mirror."""
    out = paths(cfg)["results"]
    out.mkdir(parents=True, exist_ok=True)
    cols = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    buf = io.StringIO()
    buf.write("# config: " + cfg.to_json() + "\n")
    buf.write("# conventions: " + json.dumps(CONVENTIONS, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    csv_path = out / f"{name}.csv"
    csv_path.write_text(buf.getvalue())
    doc = {"config": cfg.to_dict(), "conventions": CONVENTIONS, "rows": rows, **(extra or {})}
    (out / f"{name}.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return csv_path


def _require(path: Path, what: str):
    if not (path / "meta.json").exists():
        raise DataError(f"{what} checkpoint not found (train it first)", path)
    return path


# commands

def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    data_dir = paths(cfg)["data"]
    t0 = time.perf_counter()
    manifests = build_dataset(cfg.data, data_dir, workers=cpu_workers(cfg.threads))
    log.info("dataset written in %.1fs", time.perf_counter() - t0)
    for split in ("train", "test"):
        print(manifests[split])
    return data_dir


def cmd_train_teacher(cfg: ExperimentConfig) -> RunRecord:
    p = paths(cfg)
    t0 = time.perf_counter()
    data = pl.load_split(p["data"], "single_train")
    model, _, history, speakers = pl.train_teacher(cfg, data)
    digest = save_encoder(model, p["teacher"], extra={"speakers": speakers})
    rec = RunRecord("train-teacher", cfg.to_dict(), digest,
                    {"loss_initial": history[0], "loss_final": float(np.mean(history[-50:])),
                     "n_classes": len(speakers), "ln_n_classes": math.log(len(speakers))},
                    time.perf_counter() - t0)
    _write_history(p["teacher"], history)
    rec.write(p["teacher"] / "run.json")
    return rec


def _write_history(ckpt_dir: Path, history):
    lines = ["step,loss"] + [f"{i},{_fmt(float(v))}" for i, v in enumerate(history)]
    (ckpt_dir / "loss.csv").write_text("\n".join(lines) + "\n")


def cmd_train_student(cfg: ExperimentConfig) -> RunRecord:
    p = paths(cfg)
    t0 = time.perf_counter()
    teacher = load_encoder(_require(p["teacher"], "teacher"))
    data = pl.load_split(p["data"], "train")
    student, history = pl.train_student(cfg, data, teacher)
    digest = save_encoder(student, p["student"])
    rec = RunRecord("train-student", cfg.to_dict(), digest,
                    {"loss_initial": history[0], "loss_final": float(np.mean(history[-50:]))},
                    time.perf_counter() - t0)
    _write_history(p["student"], history)
    rec.write(p["student"] / "run.json")
    return rec


def cmd_train_tse(cfg: ExperimentConfig) -> RunRecord:
    p = paths(cfg)
    t0 = time.perf_counter()
    teacher = load_encoder(_require(p["teacher"], "teacher"))
    student = load_encoder(_require(p["student"], "student"))
    data = pl.load_split(p["data"], "train")
    targets = pl.teacher_targets(teacher, data)
    candidates = pl.student_candidates(student, data)
    model, history = pl.train_extractor(cfg, data, candidates, targets, teacher, student)
    digest = save_extractor(model, p["tse"])
    rec = RunRecord("train-tse", cfg.to_dict(), digest,
                    {"loss_initial": history[0], "loss_final": float(np.mean(history[-50:]))},
                    time.perf_counter() - t0)
    _write_history(p["tse"], history)
    rec.write(p["tse"] / "run.json")
    return rec


# clustering

def matched_candidates(candidates, targets, speaker_ids):
    """Pool per-mixture candidates, labelling each by Hungarian match to the teacher references."""
    vecs, labels = [], []
    for i in range(len(candidates)):
        sim = candidates[i] @ targets[i].T
        a = hungarian(1.0 - sim)
        for head, k in enumerate(a.permutation):
            vecs.append(candidates[i, head])
            labels.append(speaker_ids[i][k])
    return np.array(vecs), labels


def frame_kmeans_vectors(data: pl.SplitData, seed: int, n_init: int = 3):
    """Baseline: per-mixture spherical k-means over log-mel frames.

    Cluster means of the raw frames are the candidate vectors; each is
    labelled by Hungarian match against the mean frame feature of every
    clean source.
    """
    vecs, labels = [], []
    feats = data.features()
    for i in range(len(data)):
        F = feats[i]
        mu = F.mean(axis=0)
        assign = spherical_kmeans(F - mu, data.n_sp, seed=seed + i, n_init=n_init)
        cents = np.stack([F[assign == c].mean(axis=0) if np.any(assign == c) else mu
                          for c in range(data.n_sp)])
        refs = np.stack([featurize(data.active(i, k)).frames.mean(axis=0) for k in range(data.n_sp)])
        a_ = (cents - mu) / np.maximum(np.linalg.norm(cents - mu, axis=1, keepdims=True), 1e-12)
        b_ = (refs - mu) / np.maximum(np.linalg.norm(refs - mu, axis=1, keepdims=True), 1e-12)
        match = hungarian(1.0 - a_ @ b_.T)
        for c, k in enumerate(match.permutation):
            vecs.append(cents[c])
            labels.append(data.speaker_ids[i][k])
    return np.array(vecs), labels


def _report_row(name, vecs, labels, cfg, n_sp):
    r = cluster_report(vecs, labels, seed=cfg.seed, n_init=cfg.eval.kmeans_restarts)
    row = {"model": name, "n_sp": n_sp, "n_vectors": len(labels), **r.row()}
    log.info("%s acc %.4f nmi %.4f ari %.4f sep %.4f", name, r.acc, r.nmi, r.ari, r.sep)
    return row


def cmd_eval_cluster(cfg: ExperimentConfig) -> list:
    p = paths(cfg)
    n = cfg.data.n_sp
    teacher = load_encoder(_require(p["teacher"], "teacher"))
    student = load_encoder(_require(p["student"], "student"))
    single = pl.load_split(p["data"], "single_test")
    test = pl.load_split(p["data"], "test")
    rows = []
    emb = embed_batched(teacher, single.features())
    rows.append(_report_row("teacher", emb, [s[0] for s in single.speaker_ids], cfg, 1))
    targets = pl.teacher_targets(teacher, test)
    vecs, labels = matched_candidates(targets, targets, test.speaker_ids)
    rows.append(_report_row("teacher-clean-sources", vecs, labels, cfg, n))
    vecs, labels = matched_candidates(pl.student_candidates(student, test), targets, test.speaker_ids)
    rows.append(_report_row("student", vecs, labels, cfg, n))
    vecs, labels = frame_kmeans_vectors(test, cfg.seed)
    rows.append(_report_row("kmeans-frames", vecs, labels, cfg, n))
    control = make_student(teacher, n, cfg.model.freeze_depth, seed=cfg.seed + 1)
    vecs, labels = matched_candidates(pl.student_candidates(control, test), targets, test.speaker_ids)
    rows.append(_report_row("untrained-heads", vecs, labels, cfg, n))
    write_results(cfg, f"cluster_sp{n}", rows)
    return rows


# extraction

@dataclass
class _TseContext:
    test: pl.SplitData
    teacher: object
    extractor: object
    candidates: np.ndarray
    targets: np.ndarray
    chosen: np.ndarray


def _tse_context(cfg, p, limit=None):
    teacher = load_encoder(_require(p["teacher"], "teacher"))
    student = load_encoder(_require(p["student"], "student"))
    extractor = load_extractor(_require(p["tse"], "extractor"))
    test = pl.load_split(p["data"], "test", limit=limit)
    targets = pl.teacher_targets(teacher, test)
    candidates = pl.student_candidates(student, test)
    chosen = pl.oracle_selection(candidates, targets)
    return _TseContext(test, teacher, extractor, candidates, targets, chosen)


def _stats(values):
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return {"count": 0, "mean": None, "std": None}
    return {"count": int(len(v)), "mean": float(math.fsum(v) / len(v)), "std": float(v.std())}


def _tse_items(ctx: _TseContext):
    """Every (mixture, target source) pair with correct- and wrong-candidate estimates."""
    test, n = ctx.test, ctx.test.n_sp
    pairs = [(i, k) for i in range(len(test)) for k in range(n)]
    mixes = [test.mixture(i) for i, _ in pairs]
    right = np.stack([ctx.candidates[i, ctx.chosen[i, k]] for i, k in pairs])
    wrong = np.stack([ctx.candidates[i, (ctx.chosen[i, k] + 1) % n] for i, k in pairs])
    est_right = extract_batch(ctx.extractor, mixes, right)
    est_wrong = extract_batch(ctx.extractor, mixes, wrong)
    items = []
    for (i, k), mix, er, ew in zip(pairs, mixes, est_right, est_wrong):
        ref = test.source(i, k)
        items.append({"id": test.ids[i], "target": k, "speaker": test.speaker_ids[i][k],
                      "si_sdr_mix": si_sdr(mix, ref), "si_sdr": si_sdr(er, ref),
                      "si_sdri": si_sdri(er, mix, ref), "si_sdr_wrong": si_sdr(ew, ref)})
    return items, est_right


def cmd_eval_tse(cfg: ExperimentConfig) -> list:
    p = paths(cfg)
    n = cfg.data.n_sp
    ctx = _tse_context(cfg, p)
    items, _ = _tse_items(ctx)
    wins = [it["si_sdr"] > it["si_sdr_wrong"] for it in items]
    mix_db = [it["si_sdr_mix"] for it in items]
    rows = [
        {"system": "unprocessed", "n_sp": n, "si_sdr": _stats(mix_db)["mean"], "si_sdri": 0.0,
         "si_sdri_std": 0.0, "count": len(items)},
        {"system": "film-extractor", "n_sp": n, "si_sdr": _stats([it["si_sdr"] for it in items])["mean"],
         "si_sdri": _stats([it["si_sdri"] for it in items])["mean"],
         "si_sdri_std": _stats([it["si_sdri"] for it in items])["std"], "count": len(items)},
        {"system": "wrong-candidate", "n_sp": n, "si_sdr": _stats([it["si_sdr_wrong"] for it in items])["mean"],
         "si_sdri": _stats([it["si_sdr_wrong"] - it["si_sdr_mix"] for it in items])["mean"],
         "si_sdri_std": _stats([it["si_sdr_wrong"] - it["si_sdr_mix"] for it in items])["std"],
         "count": len(items)},
    ]
    rows[1]["correct_beats_wrong"] = float(np.mean(wins))
    for r in rows:
        log.info("%s si_sdri %.3f", r["system"], r["si_sdri"])
    write_results(cfg, f"tse_sp{n}", rows)
    write_results(cfg, f"tse_items_sp{n}", items)
    return rows


def margin_buckets(margins, values, edges):
    lo, hi = edges
    names = [f"m<{lo}", f"{lo}<=m<={hi}", f"m>{hi}"]
    groups = {k: [] for k in names}
    for m, v in zip(margins, values):
        key = names[0] if m < lo else names[2] if m > hi else names[1]
        groups[key].append(v)
    rows = []
    for name in names:
        s = _stats(groups[name])
        rows.append({"bucket": name, "count": s["count"], "mean_si_sdri": s["mean"], "std_si_sdri": s["std"]})
    return rows


def cmd_margin(cfg: ExperimentConfig) -> list:
    """SI-SDRi bucketed by the candidate cosine margin against a held-out enrollment embedding."""
    p = paths(cfg)
    n = cfg.data.n_sp
    if n < 2:
        raise ConfigError("margin analysis needs n_sp >= 2")
    ctx = _tse_context(cfg, p)
    enroll = pl.load_enrollment(p["data"])
    ref_emb = {sid: teacher_forward(ctx.teacher, featurize(w).frames) for sid, w in sorted(enroll.items())}
    pairs = [(i, k) for i in range(len(ctx.test)) for k in range(n)]
    margins, conds = [], []
    for i, k in pairs:
        ref = ref_emb[ctx.test.speaker_ids[i][k]]
        margins.append(cosine_margin(ctx.candidates[i], ref))
        conds.append(ctx.candidates[i, select_target(ctx.candidates[i], ref)[0]])
    mixes = [ctx.test.mixture(i) for i, _ in pairs]
    ests = extract_batch(ctx.extractor, mixes, np.stack(conds))
    gains = [si_sdri(e, m, ctx.test.source(i, k)) for e, m, (i, k) in zip(ests, mixes, pairs)]
    rows = margin_buckets(margins, gains, cfg.eval.margin_edges)
    for r in rows:
        r["n_sp"] = n
    write_results(cfg, f"margin_sp{n}", rows)
    return rows


def crossover(alphas, curve1, curve2):
    """First alpha where curve1 - curve2 changes sign (linear interpolation), or None."""
    d = np.asarray(curve1) - np.asarray(curve2)
    for j in range(len(d) - 1):
        if d[j] == 0:
            return float(alphas[j])
        if d[j] * d[j + 1] < 0:
            return float(alphas[j] + (alphas[j + 1] - alphas[j]) * d[j] / (d[j] - d[j + 1]))
    return float(alphas[-1]) if d[-1] == 0 else None


def cmd_interp_embed(cfg: ExperimentConfig) -> list:
    p = paths(cfg)
    n = cfg.data.n_sp
    if n < 2:
        raise ConfigError("embedding interpolation needs n_sp >= 2")
    ctx = _tse_context(cfg, p)
    test = ctx.test
    mixes = [test.mixture(i) for i in range(len(test))]
    e1 = np.stack([ctx.candidates[i, ctx.chosen[i, 0]] for i in range(len(test))])
    e2 = np.stack([ctx.candidates[i, ctx.chosen[i, 1]] for i in range(len(test))])
    rows, curves = [], {"spk1": [], "spk2": []}
    for alpha in cfg.eval.alphas:
        cond = np.stack([interp_embeddings(a, b, alpha) for a, b in zip(e1, e2)])
        ests = extract_batch(ctx.extractor, mixes, cond)
        for k, name in enumerate(("spk1", "spk2")):
            vals = [si_sdr(e, test.source(i, k)) for i, e in enumerate(ests)]
            s = _stats(vals)
            curves[name].append(s["mean"])
            rows.append({"alpha": alpha, "target": name, "mean_si_sdr": s["mean"], "std_si_sdr": s["std"],
                         "count": s["count"]})
    cross = crossover(cfg.eval.alphas, curves["spk1"], curves["spk2"])
    write_results(cfg, f"interp_embed_sp{n}", rows, {"crossover_alpha": cross})
    return rows


def cmd_interp_signal(cfg: ExperimentConfig) -> list:
    """Teacher clustering of (1 - a) * clean + a * aligned extractor output, per source."""
    p = paths(cfg)
    n = cfg.data.n_sp
    ctx = _tse_context(cfg, p)
    test = ctx.test
    items, ests = _tse_items(ctx)
    pairs = [(i, k) for i in range(len(test)) for k in range(n)]
    clean, degraded = [], []
    for (i, k), est in zip(pairs, ests):
        ref = test.source(i, k)
        aligned, _, _ = align_gain_lag(est, ref, cfg.eval.max_lag)
        st = test.offsets[i][k]
        clean.append(ref[st:st + test.crop_len])
        degraded.append(aligned.samples[st:st + test.crop_len])
    labels = [test.speaker_ids[i][k] for i, k in pairs]
    rows = []
    for alpha in cfg.eval.alphas:
        feats = [featurize(interp_signals(c, d, alpha)).frames for c, d in zip(clean, degraded)]
        r = cluster_report(embed_batched(ctx.teacher, feats), labels, seed=cfg.seed,
                           n_init=cfg.eval.kmeans_restarts)
        rows.append({"alpha": alpha, "n_sp": n, **r.row()})
        log.info("alpha %.2f acc %.4f", alpha, r.acc)
    rho = float(spearmanr(cfg.eval.alphas, [r["acc"] for r in rows]).statistic) if len(rows) > 2 else None
    write_results(cfg, f"interp_signal_sp{n}", rows, {"spearman_acc_alpha": rho})
    return rows


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "train-tse": cmd_train_tse,
    "eval-cluster": cmd_eval_cluster,
    "eval-tse": cmd_eval_tse,
    "margin": cmd_margin,
    "interp-embed": cmd_interp_embed,
    "interp-signal": cmd_interp_signal,
}
