"""Source-domain pretraining with a soft Dice loss."""
from __future__ import annotations

import copy
import logging
import time

import numpy as np
import torch
import torch.nn.functional as F

from .data import SegDataset
from .metrics import dice
from .segmodel import ModelConfig, SegModel

logger = logging.getLogger(__name__)


def soft_dice_loss(probs: torch.Tensor, masks: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """1 - mean soft Dice over all classes."""
    onehot = F.one_hot(masks.long(), probs.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * onehot).sum(dim=(0, 2, 3))
    denom = probs.sum(dim=(0, 2, 3)) + onehot.sum(dim=(0, 2, 3))
    return 1.0 - ((2 * inter + eps) / (denom + eps)).mean()


@torch.no_grad()
def predict(model: SegModel, images, batch_size: int = 32) -> np.ndarray:
    """Eval-mode argmax label maps."""
    was_training = model.training
    model.eval()
    out = []
    x = torch.as_tensor(np.asarray(images), dtype=next(model.parameters()).dtype)
    for s in range(0, len(x), batch_size):
        out.append(model(x[s:s + batch_size]).argmax(1).numpy().astype(np.uint8))
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,), np.uint8)


def mean_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    return float(np.mean([[dice(p, g, c) for c in range(1, num_classes)] for p, g in zip(pred, gt)]))


def pretrain_source(train: SegDataset, val: SegDataset, config: ModelConfig | None = None,
                    epochs: int = 50, lr: float = 1e-3, batch_size: int = 10, seed: int = 0):
    """Train on ``train`` and return ``(best_model, history)``, best by validation Dice."""
    config = config or ModelConfig()
    torch.manual_seed(seed)
    model = SegModel(config)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    x_all = torch.as_tensor(train.images)
    y_all = torch.as_tensor(train.masks)
    best, best_dice, history = None, -1.0, []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(train))
        losses = []
        for s in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[s:s + batch_size])
            if len(idx) < 2:
                continue  # BN needs more than one sample
            loss = soft_dice_loss(model(x_all[idx]), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_dice = mean_dice(predict(model, val.images), val.masks, config.num_classes)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_dice": val_dice,
                        "seconds": time.perf_counter() - t0})
        logger.info("epoch %d loss %.4f val dice %.4f", epoch, history[-1]["loss"], val_dice)
        if val_dice > best_dice:
            best_dice, best = val_dice, copy.deepcopy(model.state_dict())
    model.load_state_dict(best)
    model.eval()
    return model, history
