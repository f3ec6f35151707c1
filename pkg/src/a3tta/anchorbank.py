"""Prediction-compactness scores and the fixed-capacity anchor feature bank."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import PROB_FLOOR, pixel_entropy
from .segmodel import ConfigurationError, SegModel, frozen_bn_stats


def _as_batch(p: torch.Tensor) -> torch.Tensor:
    return p.unsqueeze(0) if p.dim() == 3 else p


def compute_ccd(p: torch.Tensor) -> torch.Tensor:
    """Class Compact Density of each map in a (B, C, H, W) or (C, H, W) batch.

    The C x C class-similarity matrix p p^T is softmaxed down each column and
    the base-2 entropy summed over all C*C entries. Lower means more compact.
    For realistic pixel counts the similarity entries run into the hundreds
    and the columns saturate, so the value is assembled in log space (see
    :func:`ccd_log2`) and may legitimately underflow to 0.
    """
    return torch.exp2(ccd_log2(p))


def ccd_log2(p: torch.Tensor) -> torch.Tensor:
    """log2 of :func:`compute_ccd`, evaluated without underflow.

    Strictly increasing in the CCD value, so ranking by it reproduces every
    CCD comparison, but it stays finite when the raw score underflows to 0.
    """
    single = p.dim() == 3
    p = _as_batch(p).detach().to(torch.float64)
    b, c = p.shape[:2]
    if c < 2:
        raise ValueError("CCD needs at least two classes")
    flat = p.reshape(b, c, -1)
    sim = flat @ flat.transpose(1, 2)
    logq = torch.log_softmax(sim, dim=1)
    # -log q for each entry; the column maximum needs log1p of the tail mass
    shifted = sim - sim.max(dim=1, keepdim=True).values
    is_max = shifted == 0
    first_max = is_max & (is_max.cumsum(dim=1) == 1)
    others = shifted.masked_fill(first_max, -math.inf)
    log_tail = torch.logsumexp(others, dim=1, keepdim=True)  # log sum_{i != max} e^(M_i - M_max)
    tail = torch.exp(log_tail)
    log_neglogq_max = torch.where(log_tail < -30, log_tail,
                                  torch.log(torch.log1p(tail).clamp_min(1e-300)))
    neglogq = (-logq).clamp_min(1e-300)
    log_neglogq = torch.where(first_max, log_neglogq_max.expand_as(logq), torch.log(neglogq))
    logq = torch.where(first_max, -torch.exp(log_neglogq_max).expand_as(logq), logq)
    # S ln2 = sum q (-ln q) = sum exp(ln q + ln(-ln q))
    terms = (logq + log_neglogq).reshape(b, -1)
    log_s = (torch.logsumexp(terms, dim=1) - math.log(math.log(2.0))) / math.log(2.0)
    return log_s[0] if single else log_s


def entropy_filter_score(p: torch.Tensor) -> torch.Tensor:
    """Mean base-2 pixel entropy of each map (ablation alternative to CCD)."""
    single = p.dim() == 3
    scores = pixel_entropy(_as_batch(p).detach().to(torch.float64)).mean(dim=(1, 2))
    return scores[0] if single else scores


@torch.no_grad()
def mc_dropout_score(model: SegModel, images: torch.Tensor, passes: int = 10,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean pixel entropy of the mean prediction over ``passes`` dropout samples."""
    if passes < 2:
        raise ValueError("mc_dropout_score needs at least 2 passes")
    if model.config.dropout is None:
        raise ConfigurationError("model has no dropout layer configured")
    enc = model.encode(images)
    total = None
    was = model.mc_dropout
    model.mc_dropout = True
    try:
        with frozen_bn_stats(model), _fork_rng(generator):
            for _ in range(passes):
                p = model.decode(enc.bottleneck, enc.skips)
                total = p if total is None else total + p
    finally:
        model.mc_dropout = was
    return entropy_filter_score(total / passes)


class _fork_rng:
    """Draw dropout masks from ``generator`` without disturbing the global RNG."""

    def __init__(self, generator):
        self.generator = generator

    def __enter__(self):
        if self.generator is None:
            return
        self._state = torch.get_rng_state()
        torch.set_rng_state(self.generator.get_state())

    def __exit__(self, *exc):
        if self.generator is None:
            return
        self.generator.set_state(torch.get_rng_state())
        torch.set_rng_state(self._state)


class Decision(enum.Enum):
    INSERTED_FILL = "inserted_fill"
    INSERTED_REPLACE = "inserted_replace"
    REJECTED = "rejected"


@dataclass
class InsertDecision:
    kind: Decision
    evicted_index: int | None = None

    def as_record(self) -> dict:
        return {"kind": self.kind.value, "evicted_index": self.evicted_index}


@dataclass
class AnchorEntry:
    feature: torch.Tensor
    score: float
    insertion_step: int
    image: torch.Tensor | None = None


@dataclass
class AnchorBank:
    """Capacity-L store of (feature, score) pairs that keeps the L lowest scores.

    While filling, the lower half (rounded up) of each batch goes straight in.
    Once full, a candidate replaces the current maximum only if its score is
    strictly lower; ties on the maximum evict the oldest entry.
    """

    capacity: int
    entries: list[AnchorEntry] = field(default_factory=list)
    fill_complete: bool = False

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("bank capacity must be >= 0")

    def __len__(self):
        return len(self.entries)

    @property
    def scores(self) -> list[float]:
        return [e.score for e in self.entries]

    @property
    def max_score(self) -> float:
        return max(self.scores) if self.entries else math.inf

    def features(self) -> torch.Tensor:
        return torch.stack([e.feature for e in self.entries])

    def _argmax_oldest(self) -> int:
        s_max = self.max_score
        ties = [i for i, e in enumerate(self.entries) if e.score == s_max]
        return min(ties, key=lambda i: (self.entries[i].insertion_step, i))

    def update(self, batch, step: int = 0) -> list[InsertDecision]:
        """Offer a batch of ``(feature, score)`` or ``(feature, score, image)`` items.

        Returns one decision per item, in input order.
        """
        items = list(batch)
        if not items:
            raise ValueError("bank update needs a nonempty batch")
        scores = [float(it[1]) for it in items]
        if not all(math.isfinite(s) for s in scores):
            raise ValueError("bank scores must be finite")
        decisions = [InsertDecision(Decision.REJECTED) for _ in items]
        order = sorted(range(len(items)), key=lambda i: scores[i])

        def make(i):
            feat = items[i][0].detach().reshape(-1).clone()
            if not torch.isfinite(feat).all():
                return None
            img = items[i][2].detach().clone() if len(items[i]) > 2 and items[i][2] is not None else None
            return AnchorEntry(feat, scores[i], step, img)

        if self.capacity == 0:
            self.fill_complete = True
            return decisions

        if not self.fill_complete:
            room = self.capacity - len(self.entries)
            quota = min(math.ceil(len(items) / 2), room)
            for i in order:
                if quota == 0:
                    break
                entry = make(i)
                if entry is None:
                    continue
                self.entries.append(entry)
                decisions[i] = InsertDecision(Decision.INSERTED_FILL)
                quota -= 1
            if len(self.entries) >= self.capacity:
                self.fill_complete = True
            return decisions

        for i in order:
            if not scores[i] < self.max_score:
                continue
            entry = make(i)
            if entry is None:
                continue
            slot = self._argmax_oldest()
            self.entries[slot] = entry
            decisions[i] = InsertDecision(Decision.INSERTED_REPLACE, slot)
        return decisions

    def reset(self):
        self.entries.clear()
        self.fill_complete = False

    @torch.no_grad()
    def refresh_features(self, model: SegModel):
        """Re-encode stored images with the current model (stale-feature option)."""
        imgs = [e.image for e in self.entries]
        if not imgs or any(i is None for i in imgs):
            return
        with frozen_bn_stats(model):
            feats = model.encode(torch.stack(imgs)).flat
        for e, f in zip(self.entries, feats):
            e.feature = f.clone()

    def export_snapshot(self, prefix, metadata: dict | None = None) -> tuple[Path, Path]:
        """Write ``<prefix>.npy`` (rows: D features + score) and ``<prefix>.json``."""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        if self.entries:
            mat = np.concatenate(
                [self.features().cpu().numpy().astype(np.float64),
                 np.asarray(self.scores, dtype=np.float64)[:, None]], axis=1)
        else:
            mat = np.zeros((0, 0))
        npy, meta = prefix.with_suffix(".npy"), prefix.with_suffix(".json")
        np.save(npy, mat)
        record = {"capacity": self.capacity, "size": len(self.entries),
                  "fill_complete": self.fill_complete,
                  "insertion_steps": [e.insertion_step for e in self.entries],
                  "layout": "rows=entries; columns=flattened channel-major feature then score"}
        record.update(metadata or {})
        meta.write_text(json.dumps(record, indent=2))
        return npy, meta


def bank_update(bank: AnchorBank, batch_entries, step: int = 0) -> list[InsertDecision]:
    return bank.update(batch_entries, step)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity; any pair involving a zero vector scores 0."""
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    an = torch.where(na > 0, a / na.clamp_min(1e-300), torch.zeros_like(a))
    bn = torch.where(nb > 0, b / nb.clamp_min(1e-300), torch.zeros_like(b))
    return (an @ bn.T).clamp(-1.0, 1.0)


def bank_redundancy_index(bank: AnchorBank | torch.Tensor) -> float:
    """Mean cosine similarity over all unordered pairs of stored features."""
    feats = bank.features() if isinstance(bank, AnchorBank) else bank
    n = feats.shape[0] if feats.dim() == 2 else 0
    if n < 2:
        raise ValueError("BRI is undefined for fewer than 2 entries")
    sims = cosine_matrix(feats.to(torch.float64), feats.to(torch.float64))
    iu = torch.triu_indices(n, n, offset=1)
    return float(sims[iu[0], iu[1]].mean())
