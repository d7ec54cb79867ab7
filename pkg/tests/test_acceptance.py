"""End-to-end acceptance checks.

Criteria 1-6 are oracle and property checks on the building blocks.
Criteria 7-13 run the default pipeline once per session (2- and 3-speaker
mixtures) through the CLI, then re-run every command to audit determinism.
Set MIXEMB_ACCEPTANCE_OUT to keep the run directory.
"""
import itertools
import json
import math
import os
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from conftest import record
from mixemb import diffcore as dc
from mixemb import encoder as en
from mixemb import extraction as ex
from mixemb.harness.cli import main
from mixemb.metrics import ari, clustering_accuracy, nmi, separation_score, silhouette
from mixemb.objectives import ArcFaceHead, arcface_loss, hungarian, pit_cosine_loss, si_sdr, si_sdr_loss
from test_metrics import acc_oracle, ari_oracle, nmi_oracle, partitions, sep_oracle, silhouette_oracle


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# 1-6: oracles and properties

def test_c01_hungarian_matches_brute_force():
    t0 = time.perf_counter()
    mismatches = 0
    for n in range(2, 8):
        perms = np.array(list(itertools.permutations(range(n))))
        rng = np.random.default_rng(n)
        for _ in range(1000):
            c = rng.random((n, n))
            a = hungarian(c)
            # vectorised totals shortlist the optimum, exact sums settle it
            totals = c[np.arange(n), perms].sum(axis=1)
            best = min(math.fsum(c[i, p[i]] for i in range(n)) for p in perms[totals <= totals.min() + 1e-9])
            mismatches += a.total_cost != best or math.fsum(c[i, a.permutation[i]] for i in range(n)) != best
    dt = time.perf_counter() - t0
    assert record(1, "assignment oracle", mismatches == 0 and dt < 10,
                  f"{mismatches} mismatches over 6000 matrices in {dt:.1f}s")


def test_c02_pit_invariance():
    worst_perm = worst_zero = 0.0
    for n in (2, 3):
        rng = np.random.default_rng(n)
        for _ in range(100):
            pred, tgt = rng.standard_normal((n, 8)), rng.standard_normal((n, 8))
            base = pit_cosine_loss(pred, tgt)[0].item()
            for s in itertools.permutations(range(n)):
                worst_perm = max(worst_perm, abs(pit_cosine_loss(pred, tgt[list(s)])[0].item() - base))
                worst_zero = max(worst_zero, abs(pit_cosine_loss(tgt[list(s)], tgt)[0].item()))
    ok = worst_perm <= 1e-12 and worst_zero <= 1e-12
    assert record(2, "PIT invariance", ok, f"max |dL| over permutations {worst_perm:.1e}, max L(perm) {worst_zero:.1e}")


def _suite_arcface(seed):
    rng = np.random.default_rng([seed, 5])
    head = ArcFaceHead(4, 6, seed=seed)
    labels = rng.integers(4, size=1)
    return dc.grad_check(lambda t: arcface_loss(dc.l2_normalize(t, axis=1), labels, head),
                         rng.standard_normal((1, 6)))


def _suite_asp(seed):
    rng = np.random.default_rng([seed, 3])
    w, b, v = rng.standard_normal((4, 3)), rng.standard_normal(3), rng.standard_normal(3)
    c = rng.standard_normal(8)
    x = rng.standard_normal((6, 4))
    return max(dc.grad_check(lambda t: dc.sum_(en.asp_pool(t, w, b, v) * c), x),
               dc.grad_check(lambda t: dc.sum_(en.asp_pool(x, t, b, v) * c), w))


def _suite_film(seed):
    rng = np.random.default_rng([seed, 1])
    x, g, b, c = (rng.standard_normal(s) for s in ((6, 4), 4, 4, (6, 4)))
    return max(dc.grad_check(lambda t: dc.sum_(dc.tanh(ex.film_apply(t, g, b)) * c), x),
               dc.grad_check(lambda t: dc.sum_(ex.film_apply(x, t, b) * c), g),
               dc.grad_check(lambda t: dc.sum_(ex.film_apply(x, g, t) * c), b))


def _suite_pit(seed):
    rng = np.random.default_rng([seed, 9])
    tgt = rng.standard_normal((3, 5))
    return dc.grad_check(lambda t: pit_cosine_loss(t, tgt)[0], rng.standard_normal((3, 5)))


def _suite_extractor(seed):
    rng = np.random.default_rng([seed, 7])
    m = ex.ExtractorModel(ex.ExtractorConfig(emb_dim=4, channels=6, kernel=3, seed=seed))
    m.params["film.1.w"].data = 0.3 * rng.standard_normal(m.params["film.1.w"].shape)
    mix = rng.standard_normal((2, 520))  # ten STFT frames
    ref = 0.6 * mix + 0.2 * rng.standard_normal((2, 520))
    cond = _unit(rng.standard_normal((2, 4)))
    errs = [dc.grad_check(lambda t: si_sdr_loss(m.forward(mix, t), ref), cond, eps=1e-5)]
    for name in ("film.0.w", "enc.0.b", "dec.1.b"):
        orig = m.params[name]

        def f(t):
            m.params[name] = t
            return si_sdr_loss(m.forward(mix, cond), ref)

        errs.append(dc.grad_check(f, orig.data.copy(), eps=1e-5))
        m.params[name] = orig
    return max(errs)


def test_c03_gradient_suite():
    suites = {"arcface": _suite_arcface, "asp_pool": _suite_asp, "film_apply": _suite_film,
              "pit_cosine": _suite_pit, "extractor": _suite_extractor}
    worst = {k: max(f(s) for s in range(10)) for k, f in suites.items()}
    ok = all(v < 1e-4 for v in worst.values())
    assert record(3, "gradient suite", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_c04_arcface_reductions():
    rng = np.random.default_rng(0)
    head = ArcFaceHead(5, 8, margin=0.0, seed=0)
    e = _unit(rng.standard_normal((6, 8)))
    labels = np.array([0, 1, 2, 3, 4, 0])
    logits = 30.0 * e @ _unit(head.weight.data).T
    ce = np.mean([np.log(np.exp(logits[i]).sum()) - logits[i, labels[i]] for i in range(6)])
    err0 = abs(arcface_loss(e, labels, head).item() - ce)
    head = ArcFaceHead(2, 2, seed=0)
    head.weight.data = np.eye(2)
    mpmath.mp.dps = 50
    exact = float(mpmath.log(1 + mpmath.exp(-30 * mpmath.cos(mpmath.mpf("0.5")))))
    rel = abs(arcface_loss(np.array([[1.0, 0.0]]), [0], head).item() - exact) / exact
    assert record(4, "ArcFace reductions", err0 <= 1e-10 and rel <= 1e-13,
                  f"m=0 error {err0:.1e}, closed-form relative error {rel:.1e}")


def test_c05_si_sdr_properties():
    rng = np.random.default_rng(1)
    scale_err = 0.0
    for _ in range(50):
        ref, est = rng.standard_normal(400), rng.standard_normal(400)
        base = si_sdr(est, ref)
        for a in (1e-3, 0.5, 7.0, 1e3):
            scale_err = max(scale_err, abs(si_sdr(a * est, ref) - base))
    t = np.arange(800)
    ref, est = np.sin(2 * np.pi * 5 * t / 800), np.cos(2 * np.pi * 5 * t / 800)
    ref, est = ref + est, ref - est  # orthogonal with equal power
    ortho = si_sdr(ref + est, ref)
    cap = si_sdr(ref, ref)
    ok = scale_err <= 1e-9 and abs(ortho) <= 1e-6 and cap == 120.0
    assert record(5, "SI-SDR properties", ok, f"scale drift {scale_err:.1e} dB, orthogonal {ortho:.1e} dB, "
                                               f"est=ref {cap} dB")


def test_c06_metric_oracles():
    bad = 0
    checked = 0
    for n in range(1, 9):
        parts = list(partitions(n))
        if n <= 5:
            pairs = itertools.product(parts, parts)
        else:
            rng = np.random.default_rng(n)
            partners = [parts[i] for i in rng.choice(len(parts), 3, replace=False)]
            partners += [tuple(range(n)), (0,) * n]
            pairs = ((a, b) for a in parts for b in partners)
        for a, b in pairs:
            checked += 1
            bad += clustering_accuracy(a, b) != acc_oracle(a, b)
            if n >= 2:
                bad += abs(ari(a, b) - ari_oracle(a, b)) > 1e-12 or abs(nmi(a, b) - nmi_oracle(a, b)) > 1e-12
    worked = (clustering_accuracy([0, 0, 0, 1], [0, 0, 1, 1]), nmi([0, 0, 1, 1], [0, 0, 0, 1]),
              ari([0, 0, 1, 1], [0, 0, 0, 1]))
    rng = np.random.default_rng(1)
    geo = 0.0
    for _ in range(100):
        n = int(rng.integers(4, 12))
        x = rng.standard_normal((n, 5))
        labels = list(rng.integers(0, 3, n))
        labels[0], labels[1] = 0, 1
        geo = max(geo, abs(silhouette(x, labels) - silhouette_oracle(x, labels)),
                  abs(separation_score(x, labels) - sep_oracle(x, labels)))
    ok = bad == 0 and worked[0] == 0.75 and abs(worked[1] - 0.3437) < 1e-4 and worked[2] == 0.0 and geo <= 1e-12
    assert record(6, "metric oracles", ok, f"{bad} mismatches over {checked} labeling pairs, worked example "
                                           f"({worked[0]}, {worked[1]:.4f}, {worked[2]}), geometry {geo:.1e}")


# 7-13: desk-scale pipeline

CHAIN2 = ["gen-data", "train-teacher", "train-student", "train-tse", "eval-cluster", "eval-tse", "margin",
          "interp-embed", "interp-signal"]
CHAIN3 = ["gen-data", "train-student", "train-tse", "eval-cluster", "eval-tse"]


def _cli(out, command, n_sp):
    threads = str(min(4, os.cpu_count() or 1))
    t0 = time.perf_counter()
    code = main([command, "--out", str(out), "--n-sp", str(n_sp), "--threads", threads])
    assert code == 0, f"{command} (n_sp={n_sp}) exited with {code}"
    return time.perf_counter() - t0


def _snapshot(out):
    files = sorted((out / "results").glob("*.csv"))
    state = {f.name: f.read_bytes() for f in files}
    for ck in ("teacher", "student2", "student3", "tse2", "tse3"):
        state[ck] = en.checkpoint_hash(out / ck)
    return state


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    out = Path(os.environ.get("MIXEMB_ACCEPTANCE_OUT") or tmp_path_factory.mktemp("acceptance"))
    timings = []
    for c in CHAIN2:
        timings.append((c, 2, _cli(out, c, 2)))
    for c in CHAIN3:
        timings.append((c, 3, _cli(out, c, 3)))
    first = _snapshot(out)
    total = sum(t for _, _, t in timings)
    return {"out": out, "timings": timings, "total": total, "first": first}


def _rows(out, name):
    return json.loads((out / "results" / f"{name}.json").read_text())


def _by(rows, key):
    return {r[key]: r for r in rows["rows"]}


def test_c07_teacher(pipeline):
    out = pipeline["out"]
    row = _by(_rows(out, "cluster_sp2"), "model")["teacher"]
    dur = json.loads((out / "teacher" / "run.json").read_text())["duration_s"]
    ok = row["acc"] >= 0.95 and row["sep"] >= 0.3 and dur <= 600
    assert record(7, "teacher desk-scale", ok, f"held-out acc {row['acc']:.4f}, sep {row['sep']:.3f}, "
                                               f"training {dur:.0f}s")


def test_c08_student_vs_baselines(pipeline):
    out = pipeline["out"]
    r2 = _by(_rows(out, "cluster_sp2"), "model")
    r3 = _by(_rows(out, "cluster_sp3"), "model")
    gap_km = r2["student"]["acc"] - r2["kmeans-frames"]["acc"]
    gap_ctl = r2["student"]["acc"] - r2["untrained-heads"]["acc"]
    gap3 = r3["student"]["acc"] - r3["kmeans-frames"]["acc"]
    ok = gap_km >= 0.30 and gap_ctl >= 0.20 and gap3 >= 0.25
    assert record(8, "student vs baselines", ok,
                  f"2-spk student {r2['student']['acc']:.4f} (k-means +{gap_km:.3f}, untrained +{gap_ctl:.3f}); "
                  f"3-spk student {r3['student']['acc']:.4f} (k-means +{gap3:.3f})")


def test_c09_extraction(pipeline):
    out = pipeline["out"]
    t2 = _by(_rows(out, "tse_sp2"), "system")["film-extractor"]
    t3 = _by(_rows(out, "tse_sp3"), "system")["film-extractor"]
    ok = t2["si_sdri"] > 5.0 and t3["si_sdri"] > 3.0 and t2["correct_beats_wrong"] >= 0.8
    assert record(9, "TSE desk-scale", ok,
                  f"SI-SDRi 2-spk {t2['si_sdri']:.2f} dB, 3-spk {t3['si_sdri']:.2f} dB; correct beats wrong "
                  f"{t2['correct_beats_wrong']:.3f} (3-spk {t3['correct_beats_wrong']:.3f})")


def test_c10_embedding_interpolation(pipeline):
    doc = _rows(pipeline["out"], "interp_embed_sp2")
    curve = {(r["target"], r["alpha"]): r["mean_si_sdr"] for r in doc["rows"]}
    d1 = curve[("spk1", 0.0)] - curve[("spk1", 1.0)]
    d2 = curve[("spk2", 1.0)] - curve[("spk2", 0.0)]
    cross = doc["crossover_alpha"]
    ok = d1 >= 5 and d2 >= 5 and cross is not None and 0.3 < cross < 0.7
    cross_txt = "none" if cross is None else f"{cross:.3f}"
    assert record(10, "embedding interpolation", ok,
                  f"spk1 drop {d1:.2f} dB, spk2 rise {d2:.2f} dB, crossover alpha {cross_txt}")


def test_c11_signal_interpolation(pipeline):
    doc = _rows(pipeline["out"], "interp_signal_sp2")
    acc = {r["alpha"]: r["acc"] for r in doc["rows"]}
    rho = doc["spearman_acc_alpha"]
    drop = acc[0.0] - acc[1.0]
    ok = rho is not None and rho <= -0.8 and drop >= 0.10
    assert record(11, "signal interpolation", ok,
                  f"Spearman(acc, alpha) {rho:.3f}, acc {acc[0.0]:.4f} -> {acc[1.0]:.4f}")


def test_c12_margin_analysis(pipeline):
    rows = _rows(pipeline["out"], "margin_sp2")["rows"]
    low, high = rows[0], rows[-1]
    ok = low["count"] > 0 and high["count"] > 0 and high["mean_si_sdri"] >= low["mean_si_sdri"]
    detail = ", ".join(f"{r['bucket']}: n={r['count']} mean "
                       + ("n/a" if r["mean_si_sdri"] is None else f"{r['mean_si_sdri']:.2f}") for r in rows)
    assert record(12, "margin analysis", ok, detail)


def test_c13_determinism_and_budget(pipeline):
    out = pipeline["out"]
    for c in CHAIN2:
        _cli(out, c, 2)
    for c in CHAIN3:
        _cli(out, c, 3)
    second = _snapshot(out)
    first = pipeline["first"]
    diff = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    total = pipeline["total"]
    ok = not diff and total <= 30 * 60
    per = ", ".join(f"{c}/{n}:{t:.0f}s" for c, n, t in pipeline["timings"])
    assert record(13, "determinism and budget", ok,
                  f"{len(first)} artifacts re-run, differing: {diff or 'none'}; pipeline {total / 60:.1f} min on "
                  f"{os.cpu_count()} core(s) [{per}]")
