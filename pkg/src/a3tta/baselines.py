"""Simplified reference TTA methods sharing the adaptation engine's interface.

Every adapter exposes ``adapt_batch(images) -> BatchResult``, ``config.batch_size``
and ``model`` so :func:`a3tta.adapt.run_stream` can drive any of them.
"""
from __future__ import annotations

import copy
import dataclasses
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .adapt import AdaptationConfig, AdaptationState, BatchResult, adapt_batch
from .losses import mean_entropy
from .segmodel import AdamOptimizer, ConfigurationError, SegModel, frozen_bn_stats

BASELINE_KINDS = ("source_only", "ptbn_like", "tent_like", "fixed_mt")
TRAINABLE_SUBSETS = ("bn_affine", "all")


@dataclass
class BaselineSpec:
    kind: str
    alpha: float = 0.99
    learning_rate: float = 1e-4
    trainable: str = "bn_affine"
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"kind must be one of {BASELINE_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.trainable not in TRAINABLE_SUBSETS:
            raise ValueError(f"trainable must be one of {TRAINABLE_SUBSETS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _as_input(model: nn.Module, batch) -> torch.Tensor:
    return torch.as_tensor(np.asarray(batch), dtype=next(model.parameters()).dtype)


def _labels(probs: torch.Tensor) -> np.ndarray:
    return probs.argmax(1).numpy().astype(np.uint8)


def _bn_modules(model: nn.Module) -> list[nn.Module]:
    return [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


@torch.no_grad()
def source_only_predict(model: SegModel, batch) -> np.ndarray:
    """Plain inference with the stored BN statistics; the model is left untouched."""
    was = model.training
    model.eval()
    try:
        return _labels(model(_as_input(model, batch)))
    finally:
        model.train(was)


@torch.no_grad()
def ptbn_like_adapt(model: SegModel, batch) -> np.ndarray:
    """Inference normalizing with the current batch statistics instead of the stored ones."""
    if not _bn_modules(model):
        raise ConfigurationError("ptbn_like needs a model with batch-normalization layers")
    was = model.training
    model.train()
    try:
        with frozen_bn_stats(model):
            return _labels(model(_as_input(model, batch)))
    finally:
        model.train(was)


class TentState:
    """Model copy whose trainable subset is tuned by entropy minimization."""

    def __init__(self, source: SegModel, spec: BaselineSpec):
        self.config = spec
        torch.manual_seed(spec.seed)
        self.model = copy.deepcopy(source)
        self.model.train()
        if spec.trainable == "bn_affine":
            bn_params = {id(p) for m in _bn_modules(self.model) for p in m.parameters()}
            params = []
            for p in self.model.parameters():
                trainable = id(p) in bn_params
                p.requires_grad_(trainable)
                if trainable:
                    params.append(p)
        else:
            params = list(self.model.parameters())
        if not params:
            raise ConfigurationError("tent_like found no trainable parameters")
        self.optimizer = AdamOptimizer(params, lr=spec.learning_rate)
        self.step = 0

    def adapt_batch(self, images) -> BatchResult:
        return tent_like_adapt(self, images)


def tent_like_adapt(state: TentState, batch) -> BatchResult:
    """One Adam step on the mean pixel entropy, then predict with the updated model."""
    t0 = time.perf_counter()
    model = state.model
    x = _as_input(model, batch)
    state.step += 1
    loss = mean_entropy(model(x))
    state.optimizer.zero_grad()
    loss.backward()
    stepped = state.optimizer.step()
    with torch.no_grad(), frozen_bn_stats(model):
        preds = _labels(model(x))
    return BatchResult(step=state.step, predictions=preds, losses=None, scores=[], decisions=[],
                       ema_rate=None, bri=None, stepped=stepped,
                       wall_ms=1000 * (time.perf_counter() - t0))


class _InferenceAdapter:
    """Stateless baseline wrapped so the stream runner can drive it."""

    def __init__(self, source: SegModel, spec: BaselineSpec, fn):
        self.config = spec
        self.model = source
        self._fn = fn
        self.step = 0

    def adapt_batch(self, images) -> BatchResult:
        t0 = time.perf_counter()
        self.step += 1
        preds = self._fn(self.model, images)
        return BatchResult(step=self.step, predictions=preds, losses=None, scores=[],
                           decisions=[], ema_rate=None, bri=None, stepped=False,
                           wall_ms=1000 * (time.perf_counter() - t0))


def fixed_mt_config(spec: BaselineSpec, base: AdaptationConfig | None = None) -> AdaptationConfig:
    """The adaptation engine reduced to a plain mean teacher: no bank, teacher loss only."""
    base = base or AdaptationConfig()
    return dataclasses.replace(base, bank_capacity=0, beta=0.0, sem_weight=0.0,
                               ema_mode="fixed", ema_alpha=spec.alpha,
                               batch_size=spec.batch_size, seed=spec.seed)


def fixed_mt_adapt(state: AdaptationState, batch) -> BatchResult:
    return adapt_batch(state, batch)


def make_baseline(spec: BaselineSpec, source: SegModel, base: AdaptationConfig | None = None):
    """Build an adapter for ``spec``; ``base`` supplies shared engine settings for fixed_mt."""
    if spec.kind == "source_only":
        return _InferenceAdapter(source, spec, source_only_predict)
    if spec.kind == "ptbn_like":
        if not _bn_modules(source):
            raise ConfigurationError("ptbn_like needs a model with batch-normalization layers")
        return _InferenceAdapter(source, spec, ptbn_like_adapt)
    if spec.kind == "tent_like":
        return TentState(source, spec)
    return AdaptationState(source, fixed_mt_config(spec, base))
