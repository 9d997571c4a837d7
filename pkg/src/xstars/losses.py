"""Differentiable training objectives: self-distillation and cross-sensor alignment.

Everything here is a pure function of its tensor inputs (float32 or float64,
autograd-friendly). The only mutable piece of the objective, the teacher
center, is owned by the training loop and passed in explicitly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import Tensor

from .errors import ClampWarning, NumericsError, ParameterError, ShapeError

# Floor applied to probabilities before any logarithm in the alignment loss.
LOG_CLAMP_EPS = 1e-8

# Norms below this are treated as zero embeddings (cosine undefined).
ZERO_NORM_EPS = 1e-12


def _sum_tolerance(t: Tensor) -> float:
    return 1e-6 if t.dtype == torch.float64 else 1e-4


@dataclass
class ProbabilityVector:
    """One or more categorical distributions over K entries (last axis)."""

    values: Tensor

    def validate(self) -> "ProbabilityVector":
        v = self.values
        tol = _sum_tolerance(v)
        with torch.no_grad():
            if (v < 0).any() or (v > 1 + tol).any():
                raise NumericsError("probability entries outside [0, 1]")
            err = (v.sum(dim=-1) - 1.0).abs().max().item()
        if err > tol:
            raise NumericsError(f"probability rows deviate from sum 1 by {err:.3e}")
        return self


@dataclass
class SimilarityMatrices:
    """Row-stochastic cross-batch matching probabilities for a sensor pair.

    ``pA[i, j]`` is the probability that item i of sensor A matches item j of
    sensor B; ``pB`` has the roles swapped. ``token_count`` is 0 in
    global-token mode, otherwise the number of patch tokens averaged over.
    """

    pA: Tensor
    pB: Tensor
    tau: float
    token_count: int = 0

    @property
    def batch_size(self) -> int:
        return self.pA.shape[0]


@dataclass
class TargetMatrix:
    """Smoothed pairing targets: diagonal 1 - alpha, off-diagonal alpha/(N-1)."""

    values: Tensor
    alpha: float


@dataclass(frozen=True)
class LossWeights:
    """Relative weighting of the alignment term against self-distillation."""

    lambda_: float
    dino_weight: float = field(default=1.0, init=False)

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lambda_}")


@dataclass
class ClampStats:
    """Counts probability entries clamped before the log (surfaced in logs)."""

    count: int = 0

    def add(self, n: int) -> None:
        self.count += n


def dino_sharpen(logits: Tensor, temperature: float, center: Optional[Tensor] = None) -> ProbabilityVector:
    """Temperature-sharpened softmax; the teacher branch also subtracts a center.

    Accepts a single K-vector or a batch (..., K).
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    if center is not None:
        if center.shape[-1] != logits.shape[-1]:
            raise ShapeError(
                f"center length {center.shape[-1]} does not match logits length {logits.shape[-1]}"
            )
        logits = logits - center
    return ProbabilityVector(torch.softmax(logits / temperature, dim=-1))


def _cross_entropy(target: Tensor, pred: Tensor) -> Tensor:
    # xlogy keeps the 0 * log(0) = 0 convention exact for one-hot targets
    return -torch.special.xlogy(target, pred).sum(dim=-1).mean()


def dino_loss(
    student_outputs: Sequence[ProbabilityVector],
    teacher_outputs: Sequence[ProbabilityVector],
) -> Tensor:
    """Mean cross-entropy over (teacher global view g, student view v) pairs, v != g.

    ``student_outputs`` covers every view; its first ``len(teacher_outputs)``
    entries are the global views, index-aligned with the teacher list.
    Gradients flow through the student side only (teacher values are used as
    constants; callers produce them under no_grad).
    """
    if not student_outputs or not teacher_outputs:
        raise ParameterError("dino_loss requires non-empty student and teacher view lists")
    if len(teacher_outputs) > len(student_outputs):
        raise ParameterError(
            f"{len(teacher_outputs)} teacher views but only {len(student_outputs)} student views"
        )
    for p in (*student_outputs, *teacher_outputs):
        p.validate()

    terms = []
    for g, teacher in enumerate(teacher_outputs):
        t = teacher.values.detach()
        for v, student in enumerate(student_outputs):
            if v == g:
                continue
            terms.append(_cross_entropy(t, student.values))
    return torch.stack(terms).mean()


def update_center(center: Tensor, teacher_batch_outputs: Tensor, momentum: float) -> Tensor:
    """EMA of the batch-mean teacher output; runs outside the gradient path."""
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"center momentum must be in [0, 1], got {momentum}")
    out = teacher_batch_outputs
    if out.shape[-1] != center.shape[-1]:
        raise ShapeError(
            f"teacher outputs have width {out.shape[-1]}, center has width {center.shape[-1]}"
        )
    with torch.no_grad():
        batch_mean = out.reshape(-1, out.shape[-1]).mean(dim=0)
        return momentum * center + (1.0 - momentum) * batch_mean


def _normalize_rows(v: Tensor, sensor: str) -> Tensor:
    norms = v.norm(dim=-1)
    bad = norms < ZERO_NORM_EPS
    if bad.any():
        idx = bad.nonzero()[0].tolist()
        raise NumericsError(f"zero-norm embedding in sensor {sensor} at index {idx}")
    return v / norms.unsqueeze(-1)


def msad_probabilities_global(vA: Tensor, vB: Tensor, tau: float) -> SimilarityMatrices:
    """Cross-batch matching probabilities from cosine similarity of global embeddings.

    ``pA`` row i is a softmax over sensor-B items, ``pB`` the reverse.
    """
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    if vA.ndim != 2 or vB.ndim != 2 or vA.shape != vB.shape:
        raise ShapeError(f"expected matching N x D embedding matrices, got {tuple(vA.shape)} and {tuple(vB.shape)}")
    a = _normalize_rows(vA, "A")
    b = _normalize_rows(vB, "B")
    cos = a @ b.transpose(0, 1)  # cos[i, j] = cos(vA_i, vB_j)
    pA = torch.softmax(cos / tau, dim=1)
    pB = torch.softmax(cos.transpose(0, 1) / tau, dim=1)
    return SimilarityMatrices(pA=pA, pB=pB, tau=tau, token_count=0)


def msad_probabilities_patchwise(tokensA: Tensor, tokensB: Tensor, tau: float) -> SimilarityMatrices:
    """Patchwise matching probabilities: per-token softmax, then mean over tokens.

    The mean (rather than a sum) keeps each row a probability distribution and
    makes the loss scale independent of the token count.
    """
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    if tokensA.ndim != 3 or tokensB.ndim != 3:
        raise ShapeError("expected N x T x D token arrays")
    if tokensA.shape != tokensB.shape:
        raise ShapeError(
            f"token arrays disagree: {tuple(tokensA.shape)} vs {tuple(tokensB.shape)}"
        )
    norms_a = tokensA.norm(dim=-1)
    norms_b = tokensB.norm(dim=-1)
    for name, norms in (("A", norms_a), ("B", norms_b)):
        bad = norms < ZERO_NORM_EPS
        if bad.any():
            i, t = bad.nonzero()[0].tolist()
            raise NumericsError(f"zero-norm token in sensor {name} at item {i}, token {t}")
    a = tokensA / norms_a.unsqueeze(-1)
    b = tokensB / norms_b.unsqueeze(-1)
    # cos[t, i, j] = cos(vA_i[t], vB_j[t])
    cos = torch.einsum("itd,jtd->tij", a, b)
    pA = torch.softmax(cos / tau, dim=2).mean(dim=0)
    pB = torch.softmax(cos.transpose(1, 2) / tau, dim=2).mean(dim=0)
    return SimilarityMatrices(pA=pA, pB=pB, tau=tau, token_count=tokensA.shape[1])


def smooth_targets(n: int, alpha: float, dtype: torch.dtype = torch.float64) -> TargetMatrix:
    """Pairing targets with mass alpha spread uniformly over the N-1 negatives."""
    if not 0.0 <= alpha < 1.0:
        raise ParameterError(f"alpha must be in [0, 1), got {alpha}")
    if n < 1:
        raise ParameterError(f"batch size must be >= 1, got {n}")
    if alpha > 0 and n == 1:
        raise ParameterError("smoothing with alpha > 0 requires a batch of at least 2")
    off = alpha / (n - 1) if n > 1 else 0.0
    values = torch.full((n, n), off, dtype=dtype)
    values.fill_diagonal_(1.0 - alpha)
    return TargetMatrix(values=values, alpha=alpha)


def msad_loss(
    sim: SimilarityMatrices,
    targets: TargetMatrix,
    clamp_stats: Optional[ClampStats] = None,
) -> Tensor:
    """Symmetric cross-entropy of both directional matching matrices against the targets."""
    n = sim.batch_size
    if targets.values.shape != (n, n):
        raise ShapeError(
            f"targets are {tuple(targets.values.shape)} but similarities have batch size {n}"
        )
    t = targets.values.to(dtype=sim.pA.dtype, device=sim.pA.device)

    with torch.no_grad():
        clamped = int((sim.pA < LOG_CLAMP_EPS).sum() + (sim.pB < LOG_CLAMP_EPS).sum())
    if clamped:
        if clamp_stats is not None:
            clamp_stats.add(clamped)
        warnings.warn(
            f"{clamped} probability entries clamped at {LOG_CLAMP_EPS} before log",
            ClampWarning,
            stacklevel=2,
        )
    pa = sim.pA.clamp_min(LOG_CLAMP_EPS)
    pb = sim.pB.clamp_min(LOG_CLAMP_EPS)
    total = torch.special.xlogy(t, pa).sum() + torch.special.xlogy(t, pb).sum()
    return -total / (2 * n)


def xstars_loss(dino: Tensor | float, msad: Tensor | float, weights: LossWeights) -> Tensor | float:
    """Combined objective: self-distillation plus lambda times the alignment term."""
    return weights.dino_weight * dino + weights.lambda_ * msad
