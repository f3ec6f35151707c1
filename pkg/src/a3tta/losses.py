"""Loss terms over probability maps of shape (B, C, H, W).

Every log is base 2 and every probability is clamped to [PROB_FLOOR, 1]
before the log. The clamp is not renormalized. Each term is computed per
image and then averaged over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

PROB_FLOOR = 1e-7


def _as_batch(p: torch.Tensor) -> torch.Tensor:
    if p.dim() == 3:
        return p.unsqueeze(0)
    if p.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) or (C, H, W) probability map, got {tuple(p.shape)}")
    return p


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"probability maps differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def log2_clamped(p: torch.Tensor) -> torch.Tensor:
    return torch.log2(p.clamp(PROB_FLOOR, 1.0))


def pixel_entropy(p: torch.Tensor) -> torch.Tensor:
    """Per-pixel entropy in bits, shape (B, H, W) (or (H, W) for a single map)."""
    return -(p * log2_clamped(p)).sum(dim=-3)


def normalized_cross_entropy(target: torch.Tensor, pred: torch.Tensor,
                             reduce: bool = True) -> torch.Tensor:
    """-(1 / (N log2 C)) sum_n sum_c target * log2(pred), per image or batch-mean."""
    target, pred = _as_batch(target), _as_batch(pred)
    _check_pair(target, pred)
    c = pred.shape[1]
    n = pred.shape[2] * pred.shape[3]
    per_image = -(target * log2_clamped(pred)).sum(dim=(1, 2, 3)) / (n * math.log2(c))
    return per_image.mean() if reduce else per_image


def semantic_loss(p_target: torch.Tensor, p_pred: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    return normalized_cross_entropy(p_target, p_pred, reduce)


def teacher_divergence(p_teacher: torch.Tensor, p_student: torch.Tensor,
                       reduce: bool = True) -> torch.Tensor:
    return normalized_cross_entropy(p_teacher, p_student, reduce)


def ema_rate(divergence) -> float:
    """Teacher update rate: the divergence clamped into [0, 1]."""
    return min(max(float(divergence), 0.0), 1.0)


def boundary_entropy_loss(p_refined: torch.Tensor, p_pred: torch.Tensor,
                          reduce: bool = True) -> torch.Tensor:
    p_refined, p_pred = _as_batch(p_refined), _as_batch(p_pred)
    _check_pair(p_refined, p_pred)
    diff = (pixel_entropy(p_pred) - pixel_entropy(p_refined)).abs()
    per_image = diff.mean(dim=(1, 2))
    return per_image.mean() if reduce else per_image


def mean_entropy(p: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    """Mean pixel entropy in bits (the TENT-style objective)."""
    per_image = pixel_entropy(_as_batch(p)).mean(dim=(1, 2))
    return per_image.mean() if reduce else per_image


@dataclass
class LossBreakdown:
    sem: float
    be: float
    mt: float
    total: float
    beta: float
    gamma: float
    sem_weight: float = 1.0
    total_tensor: torch.Tensor | None = None

    def as_record(self) -> dict:
        return {"sem": self.sem, "be": self.be, "mt": self.mt, "total": self.total,
                "beta": self.beta, "gamma": self.gamma, "sem_weight": self.sem_weight}


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def total_loss(sem, be, mt, beta: float = 5.0, gamma: float = 1.0,
               sem_weight: float = 1.0) -> LossBreakdown:
    """sem + beta * be + gamma * mt; tensors keep their graph in ``total_tensor``."""
    total = sem_weight * sem + beta * be + gamma * mt
    return LossBreakdown(sem=_scalar(sem), be=_scalar(be), mt=_scalar(mt), total=_scalar(total),
                         beta=beta, gamma=gamma, sem_weight=sem_weight,
                         total_tensor=total if isinstance(total, torch.Tensor) else None)


def adaptation_loss(p_student: torch.Tensor, p_refined: torch.Tensor, p_teacher: torch.Tensor,
                    beta: float = 5.0, gamma: float = 1.0, sem_weight: float = 1.0) -> LossBreakdown:
    """Batch-mean total loss; refined and teacher maps are treated as constants."""
    p_refined = p_refined.detach()
    p_teacher = p_teacher.detach()
    sem = semantic_loss(p_refined, p_student)
    be = boundary_entropy_loss(p_refined, p_student)
    mt = teacher_divergence(p_teacher, p_student)
    return total_loss(sem, be, mt, beta, gamma, sem_weight)
