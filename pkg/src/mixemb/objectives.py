"""Training objectives and the assignment solver.

* ArcFace additive-angular-margin softmax for the single-speaker teacher.
* Hungarian (Kuhn-Munkres) minimum-cost assignment.
* Permutation-invariant cosine distillation loss for the student.
* SI-SDR, both as a metric (numpy) and as a differentiable training loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import NonFiniteError, RangeError, ShapeError

SI_SDR_CAP = 120.0
ACOS_GUARD = 1e-7


@dataclass(frozen=True)
class Assignment:
    permutation: tuple  # permutation[i] = target index matched to prediction i
    total_cost: float


# ArcFace

class ArcFaceHead:
    """K class centres on the unit sphere plus scale ``s`` and angular margin ``m``."""

    def __init__(self, n_classes: int, dim: int, scale=30.0, margin=0.5, seed=0):
        if scale <= 0:
            raise RangeError(f"ArcFace scale must be positive, got {scale}")
        if not 0.0 <= margin < math.pi / 2:
            raise RangeError(f"ArcFace margin {margin} outside [0, pi/2)")
        rng = np.random.default_rng([seed, 43])
        self.weight = Tensor(rng.standard_normal((n_classes, dim)), requires_grad=True)
        self.scale = float(scale)
        self.margin = float(margin)

    @property
    def n_classes(self):
        return self.weight.shape[0]

    def class_weights(self) -> Tensor:
        return dc.l2_normalize(self.weight, axis=1)

    def params(self):
        return {"arcface.weight": self.weight}


def _margin_cos(cos: Tensor, margin: float) -> Tensor:
    """cos(acos(c) + m), elementwise.

    The value uses c clipped to [-1, 1] (exact at the ends); the derivative is
    evaluated with c clamped to [-1 + 1e-7, 1 - 1e-7] so it stays bounded.
    """
    c = np.clip(cos.data, -1.0, 1.0)
    cm, sm = math.cos(margin), math.sin(margin)
    sin_t = np.sqrt(np.maximum((1.0 - c) * (1.0 + c), 0.0))
    value = c * cm - sin_t * sm
    cg = np.clip(c, -1.0 + ACOS_GUARD, 1.0 - ACOS_GUARD)
    deriv = cm + cg * sm / np.sqrt((1.0 - cg) * (1.0 + cg))
    return dc.make_op("margin_cos", value, (cos,), lambda g: (g * deriv,))


def arcface_logits(embeddings, labels, head: ArcFaceHead) -> Tensor:
    emb = dc.as_tensor(embeddings)
    labels = np.asarray(labels, dtype=int)
    if emb.ndim != 2 or emb.shape[1] != head.weight.shape[1]:
        raise ShapeError("arcface_loss", emb.shape, head.weight.shape)
    if labels.shape != (emb.shape[0],):
        raise ShapeError("arcface_loss", emb.shape, labels.shape, detail="one label per embedding")
    if np.any(labels < 0) or np.any(labels >= head.n_classes):
        raise RangeError(f"arcface_loss: labels must lie in [0, {head.n_classes})")
    cos = dc.matmul(emb, dc.swapaxes(head.class_weights(), 0, 1))
    if np.any(np.abs(cos.data) > 1.0 + 1e-9):
        raise NonFiniteError("arcface_loss: |cos| exceeds 1; embeddings must be unit norm")
    onehot = np.zeros(cos.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    phi = _margin_cos(cos, head.margin)
    return (phi * onehot + cos * (1.0 - onehot)) * head.scale, onehot


def arcface_loss(embeddings, labels, head: ArcFaceHead) -> Tensor:
    """Mean cross-entropy over s*cos(theta_y + m) (target) and s*cos(theta_j) (others)."""
    logits, onehot = arcface_logits(embeddings, labels, head)
    logp = dc.log_softmax(logits, axis=1)
    return -dc.sum_(logp * onehot) * (1.0 / onehot.shape[0])


# Hungarian assignment

def _hungarian_core(c):
    """Shortest-augmenting-path Hungarian method; returns (row->col, u, v)."""
    n = len(c)
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = c[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = [0] * n
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    return perm, u[1:], v[1:]


def _has_perfect_matching(adj, rows, cols):
    match = {}

    def augment(r, seen):
        for cidx in adj[r]:
            if cidx in cols and cidx not in seen:
                seen.add(cidx)
                if cidx not in match or augment(match[cidx], seen):
                    match[cidx] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def _lexicographic_optimum(c, u, v):
    """Smallest optimal permutation in lexicographic order.

    Every perfect matching on zero-reduced-cost edges is optimal
    (complementary slackness), so greedily pick the smallest tight column
    that still leaves a perfect matching for the remaining rows.
    """
    n = len(c)
    scale = max(1.0, max(abs(x) for row in c for x in row))
    tol = 1e-11 * scale
    adj = [[j for j in range(n) if c[i][j] - u[i] - v[j] <= tol] for i in range(n)]
    free = set(range(n))
    perm = []
    for i in range(n):
        for j in adj[i]:
            if j in free and _has_perfect_matching(adj, range(i + 1, n), free - {j}):
                perm.append(j)
                free.discard(j)
                break
        else:
            return None
    return perm


def _total(c, perm):
    return math.fsum(c[i][j] for i, j in enumerate(perm))


def hungarian(cost) -> Assignment:
    """Minimum-cost perfect matching of a square cost matrix."""
    arr = np.asarray(cost, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ShapeError("hungarian", arr.shape, detail="cost matrix must be square")
    if arr.shape[0] == 0:
        raise ShapeError("hungarian", arr.shape, detail="cost matrix must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("hungarian: cost matrix has non-finite entries")
    c = arr.tolist()
    perm, u, v = _hungarian_core(c)
    best = _total(c, perm)
    lex = _lexicographic_optimum(c, u, v)
    if lex is not None and _total(c, lex) <= best:
        perm, best = lex, _total(c, lex)
    return Assignment(tuple(perm), best)


# permutation-invariant cosine distillation

def _as_set(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def pit_cosine_loss(pred, targets):
    """Hungarian-matched mean (1 - cosine) between a predicted and a target embedding set.

    The matching is computed on the forward values and held fixed for the
    backward pass.  Returns ``(loss, assignment)``.
    """
    pred, targets = _as_set(pred), _as_set(targets)
    if pred.ndim != 2 or targets.ndim != 2 or pred.shape != targets.shape:
        raise ShapeError("pit_cosine_loss", pred.shape, targets.shape)
    pn = pred.data / np.linalg.norm(pred.data, axis=1, keepdims=True)
    tn = targets.data / np.linalg.norm(targets.data, axis=1, keepdims=True)
    assignment = hungarian(1.0 - pn @ tn.T)
    idx = np.asarray(assignment.permutation)
    cos = dc.cosine_similarity(pred, targets[idx], axis=1)
    return dc.mean(1.0 - cos), assignment


def pit_cosine_loss_batch(pred: Tensor, targets: np.ndarray):
    """Batched :func:`pit_cosine_loss` for (B, n, D) inputs; returns (mean loss, assignments)."""
    if pred.ndim != 3 or pred.shape != np.shape(targets):
        raise ShapeError("pit_cosine_loss", pred.shape, np.shape(targets))
    targets = np.asarray(targets, dtype=np.float64)
    pn = pred.data / np.linalg.norm(pred.data, axis=2, keepdims=True)
    tn = targets / np.linalg.norm(targets, axis=2, keepdims=True)
    costs = 1.0 - np.einsum("bid,bjd->bij", pn, tn)
    assignments = [hungarian(c) for c in costs]
    matched = np.stack([tn[b, list(a.permutation)] for b, a in enumerate(assignments)])
    cos = dc.cosine_similarity(pred, matched, axis=2)
    return dc.mean(1.0 - cos), assignments


# SI-SDR

def si_sdr(est, ref) -> float:
    """Scale-invariant SDR in dB, capped at +/-120 dB."""
    est = np.asarray(getattr(est, "samples", est), dtype=np.float64)
    ref = np.asarray(getattr(ref, "samples", ref), dtype=np.float64)
    if est.shape != ref.shape:
        raise ShapeError("si_sdr", est.shape, ref.shape)
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise RangeError("si_sdr: reference is all zeros")
    alpha = float(est @ ref) / ref_energy
    target = alpha * ref
    err = est - target
    t_energy = float(target @ target)
    if t_energy == 0.0:
        return -SI_SDR_CAP
    e_energy = max(float(err @ err), 1e-12 * t_energy)
    return float(np.clip(10.0 * np.log10(t_energy / e_energy), -SI_SDR_CAP, SI_SDR_CAP))


def si_sdr_loss(est: Tensor, ref: np.ndarray, mask: np.ndarray | None = None, eps=1e-8) -> Tensor:
    """Negative mean SI-SDR over a (B, L) batch; ``mask`` zeroes padding samples."""
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ShapeError("si_sdr_loss", est.shape, ref.shape)
    if mask is not None:
        est = est * mask
        ref = ref * mask
    ref_energy = (ref * ref).sum(axis=1, keepdims=True) + eps
    alpha = dc.sum_(est * ref, axis=1, keepdims=True) / ref_energy
    target = alpha * ref
    err = est - target
    ratio = (dc.sum_(target * target, axis=1) + eps) / (dc.sum_(err * err, axis=1) + eps)
    return -dc.mean(dc.log(ratio)) * (10.0 / math.log(10.0))
