"""Feature-alignment refinement of pseudo labels.

A bottleneck feature is matched to its most similar banked anchor, blended
with it in proportion to their (non-negative) cosine similarity, standardized
with the anchor's own mean and standard deviation and decoded with the image's
original skip tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .anchorbank import AnchorBank, cosine_matrix
from .segmodel import EncodeResult, SegModel, frozen_bn_stats

EPSILON = 1e-5


@dataclass
class FusionResult:
    lam: torch.Tensor          # (B,)
    fused: torch.Tensor        # (B, D)
    normalized: torch.Tensor   # (B, D)
    anchor_index: torch.Tensor  # (B,) long
    anchor_score: list[float] | None = None

    def trace(self) -> list[dict]:
        scores = self.anchor_score or [None] * len(self.anchor_index)
        return [{"lambda": float(l), "anchor_index": int(i), "anchor_score": s}
                for l, i, s in zip(self.lam, self.anchor_index, scores)]


def retrieve_anchor(bank_features: torch.Tensor, z: torch.Tensor):
    """Most cosine-similar row of ``bank_features`` for each query; ties go to the lowest index.

    ``z`` may be one vector (D,) or a batch (B, D). Returns ``(anchors, indices)``.
    """
    if bank_features.shape[0] == 0:
        raise ValueError("cannot retrieve from an empty bank")
    single = z.dim() == 1
    zb = z.unsqueeze(0) if single else z
    sims = cosine_matrix(zb, bank_features.to(zb.dtype))
    idx = sims.argmax(dim=1)  # first maximal index on ties
    anchors = bank_features.to(zb.dtype)[idx]
    return (anchors[0], idx[0]) if single else (anchors, idx)


def fuse(z: torch.Tensor, z_anchor: torch.Tensor):
    """Return ``(z_star, lam)`` with lam = max(0, cos(z, z_anchor))."""
    single = z.dim() == 1
    zb = z.unsqueeze(0) if single else z
    ab = z_anchor.unsqueeze(0) if z_anchor.dim() == 1 else z_anchor
    if zb.shape != ab.shape:
        raise ValueError(f"feature shapes differ: {tuple(zb.shape)} vs {tuple(ab.shape)}")
    lam = torch.diagonal(cosine_matrix(zb, ab)).clamp_min(0.0)
    z_star = torch.lerp(zb, ab, lam[:, None])
    lo, hi = torch.minimum(zb, ab), torch.maximum(zb, ab)
    z_star = torch.minimum(torch.maximum(z_star, lo), hi)
    return (z_star[0], lam[0]) if single else (z_star, lam)


def anchor_normalize(z_star: torch.Tensor, z_anchor: torch.Tensor, eps: float = EPSILON) -> torch.Tensor:
    """(z_star - mean(z_anchor)) / (std(z_anchor) + eps), population std over all D entries."""
    if z_star.shape != z_anchor.shape:
        raise ValueError(f"feature shapes differ: {tuple(z_star.shape)} vs {tuple(z_anchor.shape)}")
    if z_star.shape[-1] < 2:
        raise ValueError("anchor normalization needs at least 2 feature entries")
    mu = z_anchor.mean(dim=-1, keepdim=True)
    sigma = z_anchor.std(dim=-1, unbiased=False, keepdim=True)
    return (z_star - mu) / (sigma + eps)


@torch.no_grad()
def refine_pseudo_label(model: SegModel, encoded: EncodeResult, bank: AnchorBank,
                        eps: float = EPSILON):
    """Decode the anchor-aligned bottleneck with the original skips.

    Returns ``(p_refined, FusionResult)``, or ``None`` when the bank is empty so
    the caller can fall back. The output never carries gradient.
    """
    if len(bank) == 0:
        return None
    encoded = encoded.detach()
    z = encoded.flat
    feats = bank.features().to(z.dtype)
    anchors, idx = retrieve_anchor(feats, z)
    z_star, lam = fuse(z, anchors)
    z_hat = anchor_normalize(z_star, anchors, eps)
    with frozen_bn_stats(model):
        p_refined = model.decode(z_hat.reshape(encoded.bottleneck.shape), encoded.skips)
    scores = [bank.entries[int(i)].score for i in idx]
    return p_refined, FusionResult(lam, z_star, z_hat, idx, scores)
