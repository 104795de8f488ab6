"""Objectives for representation learning and head refinement.

Covers the temperature-softened KL baseline, hard L1 logit distillation on
synthetic data, the local cross-entropy for new classes, angle-wise relational
distillation with learnable transforms, the adaptive scale factors combining
them, and the class-balanced global cross-entropy used while refining the head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

EDGE_EPS = 1e-8         # floor on edge norms before division
DEGENERATE_EPS = 1e-6   # edges shorter than this void the triplet


def kd_baseline(old_logits: torch.Tensor, new_logits: torch.Tensor, tau: float) -> torch.Tensor:
    """Batch-mean KL between temperature-softened teacher and student logits."""
    if old_logits.shape != new_logits.shape:
        raise ValueError(f"shape mismatch: {tuple(old_logits.shape)} vs {tuple(new_logits.shape)}")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    log_q = F.log_softmax(new_logits / tau, dim=1)
    p = F.softmax(old_logits / tau, dim=1)
    return F.kl_div(log_q, p, reduction="batchmean")


def hkd_loss(teacher_old_logits: torch.Tensor, student_old_logits: torch.Tensor,
             n_old_classes: int) -> torch.Tensor:
    """L1 distance between teacher and student old-class logits.

    Summed over the batch and divided by batch_size * n_old_classes, i.e. the
    mean absolute elementwise difference.
    """
    expected = (teacher_old_logits.shape[0], n_old_classes)
    if tuple(teacher_old_logits.shape) != expected or tuple(student_old_logits.shape) != expected:
        raise ValueError(
            f"expected both logit tensors shaped {expected}, got "
            f"{tuple(teacher_old_logits.shape)} and {tuple(student_old_logits.shape)}")
    return (teacher_old_logits - student_old_logits).abs().mean()


def lce_loss(new_logits_local: torch.Tensor, local_labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over the new task's classifiers only.

    Labels must already be remapped to [0, n_new); old classifier rows never
    appear here, so they receive no gradient from this loss.
    """
    n_local = new_logits_local.shape[1]
    if local_labels.numel() and (local_labels.min() < 0 or local_labels.max() >= n_local):
        raise ValueError(f"labels must lie in [0, {n_local})")
    return F.cross_entropy(new_logits_local, local_labels)


def angle_cos(r_a: torch.Tensor, r_b: torch.Tensor, r_c: torch.Tensor,
              eps: float = EDGE_EPS) -> torch.Tensor:
    """Cosine of the angle at r_b formed by the edges to r_a and r_c.

    Edge norms are floored by eps so degenerate inputs yield a finite value
    while every longer edge divides by its exact norm, keeping the angle
    unchanged under similarity transforms; the result is clamped to [-1, 1].
    """
    e_ab = (r_a - r_b) / (r_a - r_b).norm().clamp(min=eps)
    e_cb = (r_c - r_b) / (r_c - r_b).norm().clamp(min=eps)
    return torch.clamp((e_ab * e_cb).sum(), -1.0, 1.0)


def _unit_edges(points: torch.Tensor, eps: float):
    # diff[i, j] = p_i - p_j
    diff = points.unsqueeze(1) - points.unsqueeze(0)
    norms = diff.norm(dim=-1)
    return diff / norms.unsqueeze(-1).clamp(min=eps), norms


def _angle_table(unit: torch.Tensor) -> torch.Tensor:
    # table[b, a, c] = <e^{ab}, e^{cb}>
    per_center = unit.transpose(0, 1)
    return torch.clamp(per_center @ per_center.transpose(1, 2), -1.0, 1.0)


def _distinct_triplet_count(n: int) -> int:
    return n * (n - 1) * (n - 2)


def relational_angle_loss(
    teacher_points: torch.Tensor,
    student_points: torch.Tensor,
    max_triplets: int | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean |cos angle difference| over triplets of two matched point sets.

    Enumerates ordered triplets (a, b, c) with pairwise-distinct indices and
    averages the absolute difference between teacher and student angle
    cosines, the angle being taken at the middle point b. Triplets containing
    an edge shorter than DEGENERATE_EPS in either set contribute zero but
    still count toward the denominator.

    With ``max_triplets=None`` batches of at most 32 points are enumerated in
    full and larger ones are uniformly subsampled to 100k triplets; an integer
    caps the enumeration explicitly. Subsampling draws from ``generator``.
    """
    if teacher_points.shape[0] != student_points.shape[0]:
        raise ValueError("teacher and student batches must have the same size")
    n = teacher_points.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 samples to form a triplet, got {n}")

    total = _distinct_triplet_count(n)
    cap = max_triplets
    if cap is None:
        cap = total if n <= 32 else 100_000

    t_unit, t_norms = _unit_edges(teacher_points, EDGE_EPS)
    s_unit, s_norms = _unit_edges(student_points, EDGE_EPS)
    valid_edge = (t_norms >= DEGENERATE_EPS) & (s_norms >= DEGENERATE_EPS)

    if total <= cap:
        # tables and masks below are all indexed [b, a, c]
        diffs = (_angle_table(t_unit) - _angle_table(s_unit)).abs()
        idx = torch.arange(n, device=teacher_points.device)
        b = idx.view(-1, 1, 1)
        a = idx.view(1, -1, 1)
        c = idx.view(1, 1, -1)
        distinct = (a != b) & (c != b) & (a != c)
        ok = distinct & valid_edge[a, b] & valid_edge[c, b]
        return (diffs * ok).sum() / total

    a, b, c = _sample_distinct_triplets(n, cap, generator, teacher_points.device)
    t_cos = torch.clamp((t_unit[a, b] * t_unit[c, b]).sum(-1), -1.0, 1.0)
    s_cos = torch.clamp((s_unit[a, b] * s_unit[c, b]).sum(-1), -1.0, 1.0)
    ok = valid_edge[a, b] & valid_edge[c, b]
    return ((t_cos - s_cos).abs() * ok).sum() / a.shape[0]


def _sample_distinct_triplets(n, count, generator, device):
    draws = torch.randint(0, n, (3, int(count * 1.2) + 16), generator=generator, device=device)
    a, b, c = draws
    keep = (a != b) & (b != c) & (a != c)
    a, b, c = a[keep], b[keep], c[keep]
    if a.shape[0] > count:
        a, b, c = a[:count], b[:count], c[:count]
    return a, b, c


class RelationTransforms(nn.Module):
    """Learnable affine maps lifting teacher/student features to 2d.

    ``phi`` transforms old-model features, ``psi`` transforms current-model
    features. Both are trained jointly with representation learning and are
    re-created fresh at the start of every phase.
    """

    def __init__(self, embed_dim: int, generator: torch.Generator | None = None,
                 init_std: float = 0.02):
        super().__init__()
        self.phi = nn.Linear(embed_dim, 2 * embed_dim)
        self.psi = nn.Linear(embed_dim, 2 * embed_dim)
        with torch.no_grad():
            for layer in (self.phi, self.psi):
                layer.weight.normal_(0.0, init_std, generator=generator)
                layer.bias.zero_()


def rkd_loss(
    new_batch: torch.Tensor,
    old_model,
    current_model,
    transforms: RelationTransforms,
    max_triplets: int | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Angle-wise relational distillation on a batch of new-task images.

    Teacher points are phi(old features), student points psi(current
    features). Gradients reach the current model and both transforms; the old
    model is read without a graph so nothing flows into it.
    """
    if new_batch.shape[0] < 3:
        raise ValueError(f"batch of at least 3 required, got {new_batch.shape[0]}")
    teacher_points = transforms.phi(old_model.features(new_batch))
    student_points = transforms.psi(current_model.features(new_batch))
    return relational_angle_loss(teacher_points, student_points,
                                 max_triplets=max_triplets, generator=generator)


@dataclass(frozen=True)
class ScaleFactors:
    """Base loss weights and their phase-adapted effective values."""

    lambda_lce: float
    lambda_hkd: float
    lambda_rkd: float
    alpha: float
    beta: float
    effective_lce: float
    effective_hkd: float
    effective_rkd: float


def adaptive_factors(n_prev_classes: int, n_new_classes: int,
                     bases: tuple[float, float, float]) -> ScaleFactors:
    """Phase-adapted loss weights.

    alpha = log2(n_new / 2 + 1) models how much new knowledge arrives and
    beta = sqrt(n_prev / n_new) how hard the old knowledge is to preserve.
    The local CE weight is divided by beta and compensated by 1/alpha; the
    two distillation weights are multiplied by alpha * beta.
    """
    if n_prev_classes < 1:
        raise ValueError(f"need at least one previous class, got {n_prev_classes}")
    if n_new_classes < 2:
        raise ValueError(f"incremental tasks need at least 2 classes, got {n_new_classes}")
    lam_lce, lam_hkd, lam_rkd = bases
    alpha = math.log2(n_new_classes / 2 + 1)
    beta = math.sqrt(n_prev_classes / n_new_classes)
    return ScaleFactors(
        lambda_lce=lam_lce,
        lambda_hkd=lam_hkd,
        lambda_rkd=lam_rkd,
        alpha=alpha,
        beta=beta,
        effective_lce=(1 + 1 / alpha) / beta * lam_lce,
        effective_hkd=alpha * beta * lam_hkd,
        effective_rkd=alpha * beta * lam_rkd,
    )


def rrl_loss(lce: torch.Tensor, hkd: torch.Tensor | None, rkd: torch.Tensor | None,
             factors: ScaleFactors | None) -> torch.Tensor:
    """Weighted sum of the three representation-learning components.

    In the first phase (``factors=None``) there is nothing to distill and the
    loss reduces to the classification term alone.
    """
    if factors is None:
        return lce
    total = factors.effective_lce * lce
    if hkd is not None:
        total = total + factors.effective_hkd * hkd
    if rkd is not None:
        total = total + factors.effective_rkd * rkd
    return total


def gce_loss(all_logits: torch.Tensor, global_labels: torch.Tensor,
             class_counters: torch.Tensor) -> torch.Tensor:
    """Class-balanced global cross-entropy for head refinement.

    Each sample's CE is weighted by w_y / sum_j w_j where w_y is the
    reciprocal of class y's presented-sample count; classes not yet presented
    have zero weight in the normalization.
    """
    counters = class_counters.to(dtype=all_logits.dtype)
    if counters.numel() != all_logits.shape[1]:
        raise ValueError(
            f"counter length {counters.numel()} does not match {all_logits.shape[1]} classes")
    if (counters[global_labels] <= 0).any():
        raise RuntimeError("zero counter for a class present in the batch")
    w = torch.where(counters > 0, 1.0 / counters.clamp(min=1e-38), torch.zeros_like(counters))
    per_sample = F.cross_entropy(all_logits, global_labels, reduction="none")
    return (w[global_labels] / w.sum() * per_sample).mean()
