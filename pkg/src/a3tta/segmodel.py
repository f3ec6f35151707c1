"""Small U-Net style segmentation network split into encoder and decoder.

The network is written so the bottleneck can be pulled out, edited and
decoded again with the original skip tensors. Parameter snapshots, convex
blending and an Adam wrapper that refuses non-finite gradients live here too.
"""
from __future__ import annotations

import contextlib
import io
import logging
import struct
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"A3TTACKPT\x00"
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Raised when tensors or files do not match the configured architecture."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 4
    base_width: int = 16
    bottleneck_channels: int = 32
    levels: int = 3
    image_size: int = 64
    dropout: float | None = 0.1
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.image_size % (2 ** self.levels):
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by 2**levels={2 ** self.levels}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")

    @property
    def widths(self) -> list[int]:
        # [b, 2b, 2b, ...]: keeps the net cheap at depth
        return [self.base_width * min(2 ** i, 2) for i in range(self.levels)]

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // (2 ** self.levels)

    @property
    def feature_dim(self) -> int:
        return self.bottleneck_channels * self.bottleneck_size ** 2


def conv_block(in_ch: int, out_ch: int, momentum: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch, momentum=momentum),
        nn.LeakyReLU(0.01),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch, momentum=momentum),
        nn.LeakyReLU(0.01),
    )


class UpBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, momentum: float):
        super().__init__()
        self.reduce = nn.Conv2d(in_ch, skip_ch, 1)
        self.block = conv_block(2 * skip_ch, out_ch, momentum)

    def forward(self, x, skip):
        x = F.interpolate(self.reduce(x), scale_factor=2, mode="bilinear", align_corners=False)
        return self.block(torch.cat([skip, x], dim=1))


@dataclass
class EncodeResult:
    """Bottleneck tensor (B, C_f, h_f, w_f) and the skip tensors, shallow first."""

    bottleneck: torch.Tensor
    skips: list[torch.Tensor] = field(default_factory=list)

    @property
    def flat(self) -> torch.Tensor:
        # channel-major flattening; decode() reverses it with the same layout
        return self.bottleneck.reshape(self.bottleneck.shape[0], -1)

    def detach(self) -> "EncodeResult":
        return EncodeResult(self.bottleneck.detach(), [s.detach() for s in self.skips])


class SegModel(nn.Module):
    """f = g(h(x)): ``encode`` is h, ``decode`` is g, ``forward`` returns softmax maps."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        widths = cfg.widths
        self.encoders = nn.ModuleList()
        in_ch = cfg.in_channels
        for w in widths:
            self.encoders.append(conv_block(in_ch, w, cfg.bn_momentum))
            in_ch = w
        self.bottleneck = conv_block(in_ch, cfg.bottleneck_channels, cfg.bn_momentum)
        self.decoders = nn.ModuleList()
        in_ch = cfg.bottleneck_channels
        for w in reversed(widths):
            self.decoders.append(UpBlock(in_ch, w, w, cfg.bn_momentum))
            in_ch = w
        self.head = nn.Conv2d(in_ch, cfg.num_classes, 1)
        # dropout is only sampled when mc_dropout is switched on
        self.mc_dropout = False

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def _check_image(self, x: torch.Tensor):
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ConfigurationError(
                f"expected image batch (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> EncodeResult:
        self._check_image(x)
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return EncodeResult(self.bottleneck(x), skips)

    def decode(self, bottleneck: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        cfg = self.config
        s = cfg.bottleneck_size
        if bottleneck.dim() == 2:
            bottleneck = bottleneck.reshape(bottleneck.shape[0], cfg.bottleneck_channels, s, s)
        if tuple(bottleneck.shape[1:]) != (cfg.bottleneck_channels, s, s):
            raise ConfigurationError(
                f"expected bottleneck (B, {cfg.bottleneck_channels}, {s}, {s}), "
                f"got {tuple(bottleneck.shape)}")
        if len(skips) != len(self.decoders):
            raise ConfigurationError(f"expected {len(self.decoders)} skips, got {len(skips)}")
        x = bottleneck
        if self.mc_dropout:
            if cfg.dropout is None:
                raise ConfigurationError("model was built without dropout")
            x = F.dropout(x, p=cfg.dropout, training=True)
        for dec, skip in zip(self.decoders, reversed(skips)):
            if skip.shape[0] != x.shape[0] or skip.shape[-1] != 2 * x.shape[-1]:
                raise ConfigurationError(
                    f"skip shape {tuple(skip.shape)} does not match decoder input {tuple(x.shape)}")
            x = dec(x, skip)
        return torch.softmax(self.head(x), dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        enc = self.encode(x)
        return self.decode(enc.bottleneck, enc.skips)

    def bn_layers(self) -> list[nn.BatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, nn.BatchNorm2d)]


def encode(model: SegModel, images: torch.Tensor) -> EncodeResult:
    return model.encode(images)


def decode(model: SegModel, bottleneck: torch.Tensor, skips) -> torch.Tensor:
    return model.decode(bottleneck, skips)


@contextlib.contextmanager
def frozen_bn_stats(model: nn.Module):
    """Run forwards in the current mode without touching BN running statistics.

    A momentum of 0 makes the running-stat update an exact no-op, so train-mode
    forwards still normalize with batch statistics.
    """
    bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [(m.momentum, m.num_batches_tracked.clone()) for m in bns]
    for m in bns:
        m.momentum = 0.0
    try:
        yield model
    finally:
        for m, (mom, nbt) in zip(bns, saved):
            m.momentum = mom
            m.num_batches_tracked.copy_(nbt)


class ParameterSet:
    """Ordered named tensors covering every learnable weight of a model."""

    def __init__(self, tensors: dict[str, torch.Tensor]):
        self.tensors = dict(tensors)

    @classmethod
    def from_model(cls, model: nn.Module, clone: bool = True) -> "ParameterSet":
        return cls({n: (p.detach().clone() if clone else p.detach())
                    for n, p in model.named_parameters()})

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def flat(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in self.tensors.values()])

    def load_into(self, model: nn.Module):
        with torch.no_grad():
            for n, p in model.named_parameters():
                p.copy_(self.tensors[n])

    def _check_compatible(self, other: "ParameterSet"):
        if self.names() != other.names():
            raise ConfigurationError("parameter sets have different names or ordering")
        for n, t in self.tensors.items():
            if t.shape != other.tensors[n].shape:
                raise ConfigurationError(
                    f"shape mismatch for {n}: {tuple(t.shape)} vs {tuple(other.tensors[n].shape)}")


def _lerp_between(a: torch.Tensor, b: torch.Tensor, rate: float) -> torch.Tensor:
    out = torch.lerp(a, b, rate)
    # rounding must not push the blend outside [min(a,b), max(a,b)]
    return torch.minimum(torch.maximum(out, torch.minimum(a, b)), torch.maximum(a, b))


def _check_rate(rate: float):
    if not (0.0 <= rate <= 1.0):
        raise ValueError(f"blend rate must lie in [0, 1], got {rate}")


def blend_parameters(a: ParameterSet, b: ParameterSet, rate: float) -> ParameterSet:
    """Return (1 - rate) * a + rate * b elementwise."""
    rate = float(rate)
    _check_rate(rate)
    a._check_compatible(b)
    return ParameterSet({n: _lerp_between(t, b.tensors[n], rate) for n, t in a.tensors.items()})


@torch.no_grad()
def blend_into(target: nn.Module, source: nn.Module, rate: float, include_buffers: bool = True):
    """In-place ``target <- (1 - rate) * target + rate * source``.

    Float buffers (BN running statistics) follow the same blend when
    ``include_buffers`` is set so an EMA teacher tracks the student's statistics.
    """
    rate = float(rate)
    _check_rate(rate)
    for (n, pt), (_, ps) in zip(target.named_parameters(), source.named_parameters()):
        pt.copy_(_lerp_between(pt, ps, rate))
    if include_buffers:
        for bt, bs in zip(target.buffers(), source.buffers()):
            if bt.is_floating_point():
                bt.copy_(_lerp_between(bt, bs, rate))


class AdamOptimizer:
    """torch Adam that skips a step when any gradient is non-finite."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params]
        self.inner = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)
        self.skipped_steps = 0
        self.steps = 0

    def zero_grad(self):
        self.inner.zero_grad(set_to_none=True)

    def step(self, gradients: list[torch.Tensor] | None = None) -> bool:
        if gradients is not None:
            if len(gradients) != len(self.params):
                raise ConfigurationError(
                    f"got {len(gradients)} gradients for {len(self.params)} parameters")
            for p, g in zip(self.params, gradients):
                if g is not None and g.shape != p.shape:
                    raise ConfigurationError(f"gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
                p.grad = None if g is None else g.detach().clone()
        grads = [p.grad for p in self.params if p.grad is not None]
        if any(not torch.isfinite(g).all() for g in grads):
            self.skipped_steps += 1
            logger.warning("non-finite gradient, optimizer step skipped (%d so far)", self.skipped_steps)
            self.zero_grad()
            return False
        self.inner.step()
        self.steps += 1
        return True

    def state_dict(self) -> dict:
        return {"inner": self.inner.state_dict(), "skipped_steps": self.skipped_steps,
                "steps": self.steps}

    def load_state_dict(self, state: dict):
        self.inner.load_state_dict(state["inner"])
        self.skipped_steps = state["skipped_steps"]
        self.steps = state["steps"]


def optimizer_step(model: nn.Module, gradients: list[torch.Tensor], optimizer: AdamOptimizer) -> bool:
    """Apply one Adam update to ``model`` from explicit gradients."""
    if optimizer.params != list(model.parameters()):
        raise ConfigurationError("optimizer was not built over this model's parameters")
    return optimizer.step(gradients)


def gradient_of_loss(model: SegModel, images: torch.Tensor, refined: torch.Tensor,
                     teacher_probs: torch.Tensor, beta: float = 5.0, gamma: float = 1.0,
                     sem_weight: float = 1.0):
    """Gradient of the total adaptation loss with respect to the student weights.

    ``refined`` and ``teacher_probs`` are constants: only the student's own
    prediction carries gradient.
    """
    from .losses import adaptation_loss

    probs = model(images)
    breakdown = adaptation_loss(probs, refined.detach(), teacher_probs.detach(),
                                beta=beta, gamma=gamma, sem_weight=sem_weight)
    grads = torch.autograd.grad(breakdown.total_tensor, list(model.parameters()),
                                allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(model.parameters(), grads)]
    return grads, breakdown


def save_checkpoint(path, model: SegModel, optimizer: AdamOptimizer | None = None,
                    extra: dict | None = None):
    payload = {
        "model_config": asdict(model.config),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(buf.getvalue())


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Return ``(model, payload)``; raises ConfigurationError on a foreign file."""
    with open(path, "rb") as fh:
        head = fh.read(len(CHECKPOINT_MAGIC))
        if head != CHECKPOINT_MAGIC:
            raise ConfigurationError(f"{path} is not an a3tta checkpoint")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        payload = torch.load(io.BytesIO(fh.read()), weights_only=True)
    config = ModelConfig(**payload["model_config"])
    if expected is not None and expected != config:
        raise ConfigurationError(f"checkpoint architecture {config} does not match {expected}")
    model = SegModel(config)
    model.load_state_dict(payload["state_dict"])
    return model, payload


def state_hash(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
