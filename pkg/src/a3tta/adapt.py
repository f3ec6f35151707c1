"""Streaming test-time adaptation engine.

One pass over the target stream and one gradient step per arriving batch:

1. student forward (batch BN statistics) gives probabilities and bottlenecks
2. every image is scored for compactness
3. the anchor bank is offered the batch
4. each bottleneck is aligned to its nearest anchor and decoded to a refined label
5. the teacher predicts the same batch
6. semantic + boundary-entropy + teacher losses, averaged over the batch
7. one Adam step on the student
8. the teacher moves toward the student at the clamped teacher-divergence rate
9. the updated student predicts the batch again; these are the outputs
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .alignment import EPSILON, refine_pseudo_label
from .anchorbank import (AnchorBank, Decision, InsertDecision, bank_redundancy_index, ccd_log2,
                         entropy_filter_score, mc_dropout_score)
from .metrics import MetricRecord, aggregate, evaluate_image
from .segmodel import AdamOptimizer, SegModel, blend_into, frozen_bn_stats, load_checkpoint

logger = logging.getLogger(__name__)

FILTER_MODES = ("ccd", "entropy", "mc_dropout")
EMA_MODES = ("adaptive", "fixed")
BN_MODES = ("batch", "running")


@dataclass
class AdaptationConfig:
    bank_capacity: int = 40
    beta: float = 5.0
    gamma: float = 1.0
    sem_weight: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 10
    epsilon: float = EPSILON
    filter_mode: str = "ccd"
    ema_mode: str = "adaptive"
    ema_alpha: float = 0.99
    refresh_bank_features: bool = False
    student_bn_mode: str = "batch"
    teacher_bn_mode: str = "running"
    mc_passes: int = 10
    reset_bank_between_domains: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.bank_capacity < 0:
            raise ValueError("bank_capacity must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.beta < 0 or self.gamma < 0 or self.sem_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.filter_mode not in FILTER_MODES:
            raise ValueError(f"filter_mode must be one of {FILTER_MODES}")
        if self.ema_mode not in EMA_MODES:
            raise ValueError(f"ema_mode must be one of {EMA_MODES}")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in [0, 1]")
        for mode in (self.student_bn_mode, self.teacher_bn_mode):
            if mode not in BN_MODES:
                raise ValueError(f"BN mode must be one of {BN_MODES}")


@dataclass
class BatchResult:
    step: int
    predictions: np.ndarray
    losses: L.LossBreakdown | None
    scores: list[float]
    decisions: list[InsertDecision]
    ema_rate: float | None
    bri: float | None
    fusion: list[dict] = field(default_factory=list)
    stepped: bool = True
    wall_ms: float = 0.0

    def log_record(self) -> dict:
        return {
            "step": self.step,
            "scores": self.scores,
            "decisions": [d.as_record() for d in self.decisions],
            "fusion": self.fusion,
            "losses": self.losses.as_record() if self.losses else None,
            "ema_rate": self.ema_rate,
            "bri": self.bri,
            "stepped": self.stepped,
            "wall_ms": self.wall_ms,
        }


def _set_bn_mode(model: SegModel, mode: str):
    model.train(mode == "batch")


class AdaptationState:
    """Student, EMA teacher, anchor bank and optimizer carried across the stream."""

    def __init__(self, source: SegModel, config: AdaptationConfig):
        self.config = config
        self.source_config = source.config
        torch.manual_seed(config.seed)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.student = copy.deepcopy(source)
        self.teacher = copy.deepcopy(source)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        _set_bn_mode(self.student, config.student_bn_mode)
        _set_bn_mode(self.teacher, config.teacher_bn_mode)
        self.bank = AnchorBank(config.bank_capacity)
        self.optimizer = AdamOptimizer(self.student.parameters(), lr=config.learning_rate)
        self.step = 0
        self.incidents: list[dict] = []

    def adapt_batch(self, images) -> BatchResult:
        return adapt_batch(self, images)

    @property
    def model(self) -> SegModel:
        return self.student


def init_adaptation(source, config: AdaptationConfig | None = None) -> AdaptationState:
    """Fresh state from a model or a checkpoint path: student = teacher = source."""
    config = config or AdaptationConfig()
    if not isinstance(source, SegModel):
        source, _ = load_checkpoint(source)
    return AdaptationState(source, config)


def _score(state: AdaptationState, probs: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
    mode = state.config.filter_mode
    if mode == "ccd":
        return ccd_log2(probs)
    if mode == "entropy":
        return entropy_filter_score(probs)
    return mc_dropout_score(state.student, images, state.config.mc_passes, state.generator)


def adapt_batch(state: AdaptationState, images) -> BatchResult:
    cfg = state.config
    t0 = time.perf_counter()
    student, teacher = state.student, state.teacher
    dtype = next(student.parameters()).dtype
    x = torch.as_tensor(np.asarray(images), dtype=dtype)
    state.step += 1
    step = state.step

    if cfg.refresh_bank_features and len(state.bank):
        state.bank.refresh_features(student)

    # (1) student forward
    enc = student.encode(x)
    probs = student.decode(enc.bottleneck, enc.skips)
    # (2) compactness scores
    scores = _score(state, probs.detach(), x)
    # (3) bank maintenance
    feats = enc.flat.detach()
    keep_img = cfg.refresh_bank_features
    # corrupted images never reach the bank; the non-finite loss below handles them
    ok = [i for i in range(len(x))
          if math.isfinite(float(scores[i])) and bool(torch.isfinite(feats[i]).all())]
    decisions = [InsertDecision(Decision.REJECTED) for _ in range(len(x))]
    if ok:
        offered = state.bank.update(
            [(feats[i], float(scores[i]), x[i] if keep_img else None) for i in ok], step)
        for i, d in zip(ok, offered):
            decisions[i] = d
    # (4) feature-alignment refinement; falls back to the prediction itself
    refined = refine_pseudo_label(student, enc, state.bank, cfg.epsilon)
    if refined is None:
        p_refined, fusion = probs.detach(), []
    else:
        p_refined, fres = refined
        fusion = fres.trace()
    # (5) teacher forward
    with torch.no_grad(), frozen_bn_stats(teacher):
        p_teacher = teacher(x)
    # (6) losses
    breakdown = L.adaptation_loss(probs, p_refined, p_teacher, cfg.beta, cfg.gamma, cfg.sem_weight)
    stepped = True
    rate = None
    if not math.isfinite(breakdown.total):
        stepped = False
        state.incidents.append({"step": step, "reason": "non-finite loss"})
        logger.warning("step %d: non-finite loss, update skipped", step)
        preds = probs.detach().argmax(1).numpy().astype(np.uint8)
    else:
        # (7) student update
        state.optimizer.zero_grad()
        breakdown.total_tensor.backward()
        stepped = state.optimizer.step()
        # (8) teacher update
        if stepped:
            rate = L.ema_rate(breakdown.mt) if cfg.ema_mode == "adaptive" else 1.0 - cfg.ema_alpha
            blend_into(teacher, student, rate)
        # (9) final predictions from the updated student
        with torch.no_grad(), frozen_bn_stats(student):
            preds = student(x).argmax(1).numpy().astype(np.uint8)
    breakdown.total_tensor = None
    bri = bank_redundancy_index(state.bank) if len(state.bank) >= 2 else None
    return BatchResult(step=step, predictions=preds, losses=breakdown,
                       scores=[float(s) for s in scores], decisions=decisions,
                       ema_rate=rate, bri=bri, fusion=fusion, stepped=stepped,
                       wall_ms=1000 * (time.perf_counter() - t0))


@dataclass
class RunReport:
    records: list[MetricRecord]
    table: list[dict]
    n_batches: int
    complete: bool = True
    log: list[dict] = field(default_factory=list)
    predictions: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([r.mean_dice for r in self.records])) if self.records else float("nan")


def run_stream(adapter, dataset, log_path=None, round_: int = 0, domain: str | None = None,
               spacing=None) -> RunReport:
    """Feed ``dataset`` through ``adapter.adapt_batch`` once, in order.

    ``adapter`` is an :class:`AdaptationState` or any baseline exposing
    ``adapt_batch`` and a ``config.batch_size``.
    """
    domain = domain or dataset.domain
    bs = adapter.config.batch_size
    records, log, preds = [], [], {}
    num_classes = adapter.model.num_classes
    fh = open(log_path, "a") if log_path else None
    complete = True
    n_batches = 0
    try:
        for start in range(0, len(dataset), bs):
            imgs = dataset.images[start:start + bs]
            masks = dataset.masks[start:start + bs]
            ids = dataset.ids[start:start + bs]
            try:
                res = adapter.adapt_batch(imgs)
            except OSError:
                complete = False
                logger.exception("I/O failure at batch %d", n_batches)
                break
            n_batches += 1
            rec = res.log_record()
            rec.update({"domain": domain, "round": round_, "image_ids": list(ids)})
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            for j, (p, g, ident) in enumerate(zip(res.predictions, masks, ids)):
                sp = (1.0, 1.0) if dataset.spacing is None else tuple(dataset.spacing[start + j])
                records.append(evaluate_image(p, g, num_classes, ident, domain, sp, round_))
                preds[ident] = p
    finally:
        if fh:
            fh.close()
    table = aggregate(records, ("domain",)) if records else []
    return RunReport(records, table, n_batches, complete, log, preds)


@dataclass
class ContinualReport:
    reports: list[RunReport]
    table: list[dict]

    def round_mean_dice(self, round_: int) -> float:
        vals = [r.mean_dice for r in self.reports if r.records and r.records[0].round == round_]
        return float(np.mean(vals))


def run_continual(adapter, domain_streams, rounds: int = 2, log_path=None) -> ContinualReport:
    """Adapt through the domains in order, ``rounds`` times, carrying all state."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    reports = []
    for r in range(rounds):
        for ds in domain_streams:
            if getattr(adapter.config, "reset_bank_between_domains", False) and hasattr(adapter, "bank"):
                adapter.bank.reset()
            reports.append(run_stream(adapter, ds, log_path, round_=r + 1))
    records = [rec for rep in reports for rec in rep.records]
    return ContinualReport(reports, aggregate(records, ("round", "domain")))


def config_to_dict(cfg: AdaptationConfig) -> dict:
    return asdict(cfg)


def save_state_summary(state: AdaptationState, path):
    Path(path).write_text(json.dumps({"step": state.step, "incidents": state.incidents,
                                      "bank_size": len(state.bank),
                                      "skipped_steps": state.optimizer.skipped_steps}, indent=2))
