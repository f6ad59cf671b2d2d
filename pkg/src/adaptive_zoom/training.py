"""Losses, schedule and update loop for the two branches, with the backbone held frozen."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .pseudo_labels import IGNORE
from .sequence import Span
from .transformer import DTYPE, HiddenStates

PROB_EPS = 1e-12


class ZeroValidTokens(ValueError):
    """Every label in the batch is ignore, so there is nothing to learn from."""


class FrozenBackboneViolation(RuntimeError):
    pass


@dataclass
class TrainConfig:
    peak_lr: float = 1e-4
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.98)
    warmup_frac: float = 0.03
    epochs: int = 1
    batch_size: int = 128
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.peak_lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup fraction must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class LossReport:
    loss: float
    valid_token_count: int
    grad_norm: float = float("nan")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to 0 at ``total_steps``."""
    warmup = max(1, math.ceil(cfg.warmup_frac * total_steps)) if cfg.warmup_frac > 0 else 0
    if step < warmup:
        return cfg.peak_lr * step / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def selective_bce(pred_logits: Sequence[torch.Tensor], labels: Sequence) -> tuple[torch.Tensor, LossReport]:
    """Mean BCE over the non-ignore cells of every turn.

    Ignore cells are dropped before the loss, so they get exactly zero
    gradient. An item whose cells are all ignore contributes a zero loss and a
    zero count.
    """
    logits, targets = [], []
    for pred, lab in zip(pred_logits, labels, strict=True):
        lab = torch.as_tensor(np.asarray(lab), dtype=torch.long)
        if tuple(pred.shape) != tuple(lab.shape):
            raise ValueError(f"prediction {tuple(pred.shape)} and label {tuple(lab.shape)} shapes differ")
        keep = lab != IGNORE
        logits.append(pred[keep])
        targets.append(lab[keep].to(pred.dtype))
    logits_all = torch.cat(logits) if logits else torch.zeros(0, dtype=DTYPE)
    count = int(logits_all.numel())
    if count == 0:
        zero = sum((p.sum() * 0.0 for p in pred_logits), torch.zeros((), dtype=DTYPE))
        return zero, LossReport(0.0, 0)
    loss = F.binary_cross_entropy_with_logits(logits_all, torch.cat(targets), reduction="mean")
    return loss, LossReport(float(loss.detach()), count)


def batch_selective_bce(
    batch_logits: Sequence[Sequence[torch.Tensor]], batch_labels: Sequence[Sequence]
) -> tuple[torch.Tensor, LossReport]:
    """Selective BCE pooled over all valid cells of a batch of (multi-turn) items."""
    flat_pred = [p for item in batch_logits for p in item]
    flat_lab = [lab for item in batch_labels for lab in item]
    loss, report = selective_bce(flat_pred, flat_lab)
    if report.valid_token_count == 0:
        raise ZeroValidTokens("every cell in the batch is labeled ignore")
    return loss, report


def gate_bce(y_pred, y_label):
    """``-y ln p - (1 - y) ln(1 - p)`` with ``p`` clamped to [eps, 1 - eps]; works on floats and tensors."""
    if isinstance(y_pred, torch.Tensor):
        p = y_pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
        y = torch.as_tensor(y_label, dtype=p.dtype)
        return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))
    p = min(max(float(y_pred), PROB_EPS), 1.0 - PROB_EPS)
    return -(y_label * math.log(p) + (1 - y_label) * math.log1p(-p))


# -- batching -----------------------------------------------------------------


@dataclass
class TapBatch:
    """End-padded layer-B taps with per-item terminal indices and visual spans."""

    x: torch.Tensor  # (b, n, d)
    positions: torch.Tensor  # (b, n, 3)
    terminal: torch.Tensor  # (b,)
    visual: list[Span]


def collate_taps(taps: Sequence[HiddenStates]) -> TapBatch:
    n = max(t.activations.shape[0] for t in taps)
    d = taps[0].activations.shape[1]
    x = torch.zeros(len(taps), n, d, dtype=DTYPE)
    pos = torch.zeros(len(taps), n, 3, dtype=DTYPE)
    terminal, visual = [], []
    for i, tap in enumerate(taps):
        m = tap.activations.shape[0]
        x[i, :m] = tap.activations
        pos[i, :m] = tap.positions
        seq = tap.sequence
        terminal.append(seq.terminal_index())
        visual.append(seq.spans_of("visual")[0])
    return TapBatch(x, pos, torch.tensor(terminal, dtype=torch.long), visual)


def rpn_loss(rpn, batch: TapBatch, labels: Sequence) -> tuple[torch.Tensor, LossReport]:
    maps = rpn.logits_batch(batch.x, batch.positions, batch.terminal, batch.visual)
    return batch_selective_bce([[m] for m in maps], [[lab] for lab in labels])


def gate_loss(gate, batch: TapBatch, labels: Sequence[int]) -> tuple[torch.Tensor, LossReport]:
    logits = gate.logits_batch(batch.x, batch.positions, batch.terminal)
    y = torch.as_tensor(list(labels), dtype=DTYPE)
    loss = gate_bce(torch.sigmoid(logits), y).mean()
    return loss, LossReport(float(loss.detach()), len(y))


# -- updates ------------------------------------------------------------------


def weights_digest(module: nn.Module) -> str:
    """SHA-256 over the raw bytes of every tensor in the state dict, in key order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class TrainLog:
    HEADER = ("step", "lr", "loss", "valid_token_count", "grad_norm")

    def __init__(self, path: str | Path | None = None):
        self.rows: list[tuple] = []
        self.path = Path(path) if path else None
        if self.path:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.HEADER)

    def append(self, step: int, lr: float, report: LossReport) -> None:
        row = (step, lr, report.loss, report.valid_token_count, report.grad_norm)
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)


class BranchTrainer:
    """AdamW on one branch's parameters with warmup-cosine LR and gradient clipping.

    The backbone is switched to ``requires_grad=False`` and checked after every
    backward pass; a gradient reaching it is a contract violation.
    """

    def __init__(self, branch: nn.Module, backbone: nn.Module, cfg: TrainConfig, total_steps: int, log_path=None):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.branch, self.backbone, self.cfg = branch, backbone, cfg
        self.total_steps = total_steps
        backbone.requires_grad_(False)
        self.params = [p for p in branch.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(
            self.params, lr=0.0, betas=cfg.betas, weight_decay=cfg.weight_decay
        )
        self.step_index = 0
        self.log = TrainLog(log_path)

    def step(self, loss_fn: Callable[[], tuple[torch.Tensor, LossReport]]) -> LossReport:
        lr = lr_at(self.step_index, self.total_steps, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        loss, report = loss_fn()
        loss.backward()
        if any(p.grad is not None for p in self.backbone.parameters()):
            raise FrozenBackboneViolation("a gradient reached the backbone")
        report.grad_norm = float(torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip))
        self.optimizer.step()
        self.log.append(self.step_index, lr, report)
        self.step_index += 1
        return report


def train_step(trainer: BranchTrainer, loss_fn) -> LossReport:
    return trainer.step(loss_fn)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-5,
    num_samples: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error of autograd vs. central differences over sampled parameter entries."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(num_samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for f in flat.tolist():
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            view = params[k].view(-1)
            i = f - offsets[k]
            orig = view[i].item()
            view[i] = orig + epsilon
            up = float(loss_fn())
            view[i] = orig - epsilon
            down = float(loss_fn())
            view[i] = orig
            numeric = (up - down) / (2 * epsilon)
            analytic = float(grads[k].view(-1)[i])
            worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-8))
    return worst
