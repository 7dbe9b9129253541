"""Refinement training loop: four objectives per batch, one AdamW step, early stopping."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import PairedSample, Vocabulary, tokenize_batch
from .encoders import DualEncoder
from .objectives import LOSS_NAMES, LossBundle, as_float, compute_losses, total_loss

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "split", "itc", "itm", "mlm", "gm", "total")


@dataclass
class RefineConfig:
    lr: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 0.05
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    freeze_vision: bool = False
    losses: tuple[str, ...] = LOSS_NAMES
    min_delta: float = 1e-6

    def __post_init__(self):
        self.losses = tuple(self.losses)
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so ITM has negatives")
        if not self.losses or set(self.losses) - set(LOSS_NAMES):
            raise ValueError(f"losses must be a nonempty subset of {LOSS_NAMES}")


@dataclass
class PairedData:
    images: torch.Tensor  # [N, C, H, W]
    ids: torch.Tensor  # [N, L]
    valid: torch.Tensor  # [N, L] bool
    labels: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.images.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[PairedSample], vocab: Vocabulary, max_len: int) -> "PairedData":
        ids, valid = tokenize_batch([s.report for s in samples], vocab, max_len)
        return cls(
            images=torch.as_tensor(np.stack([s.image for s in samples]), dtype=torch.float32),
            ids=torch.as_tensor(ids),
            valid=torch.as_tensor(valid),
            labels=torch.as_tensor([s.class_label for s in samples]),
        )

    def batch(self, index) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        index = torch.as_tensor(index)
        valid = self.valid[index]
        # trailing all-pad columns never influence valid positions
        L = int(valid.sum(1).max())
        return self.images[index], self.ids[index, :L], valid[:, :L]


class EarlyStopping:
    """Stop once the monitored value has not improved for ``patience`` epochs.

    Improvement means ``value < best - min_delta``.
    """

    def __init__(self, patience: int = 3, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = 0
        self.epochs_since_improvement = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best - self.min_delta:
            self.best, self.best_epoch = value, epoch
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = float("inf")
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    stopped_early: bool = False


@dataclass
class RefineResult:
    model: DualEncoder
    log: list[dict] = field(default_factory=list)
    state: TrainState = field(default_factory=TrainState)


def _batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a trailing batch of one has no ITM negatives: fold it into the previous one
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def make_optimizer(model: DualEncoder, cfg: RefineConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        # biases, norm gains and the temperature are 1-D / scalar
        (decay if p.ndim >= 2 else no_decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr,
    )


@torch.no_grad()
def evaluate_losses(model: DualEncoder, data: PairedData, losses: Sequence[str] = LOSS_NAMES,
                    batch_size: int = 32, seed: int = 0) -> LossBundle:
    """Mean losses over ``data``; deterministic for a given model, data and seed."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    if len(data) < 2 and "itm" in losses:
        raise ValueError("ITM evaluation needs at least two pairs")
    was_training = model.training
    model.eval()
    rng = np.random.default_rng([seed, 0x5EED])
    sums = dict.fromkeys(LOSS_NAMES, 0.0)
    for idx in _batches(len(data), batch_size, np.arange(len(data))):
        bundle = compute_losses(model, *data.batch(idx), rng=rng, losses=losses)
        for k in LOSS_NAMES:
            sums[k] += as_float(getattr(bundle, k)) * len(idx)
    model.train(was_training)
    n = float(len(data))
    return LossBundle(*(sums[k] / n for k in LOSS_NAMES))


def refine(model: DualEncoder, train: PairedData, val: PairedData, cfg: RefineConfig,
           log_path: Optional[str | Path] = None) -> RefineResult:
    """Refine ``model`` in place and return it with the best-validation weights restored."""
    if len(train) < 2 or len(val) == 0:
        raise ValueError("train split needs >= 2 pairs and val split must be nonempty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if cfg.freeze_vision:
        for p in model.vision.parameters():
            p.requires_grad_(False)
    opt = make_optimizer(model, cfg)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    state = TrainState()
    best_weights = copy.deepcopy(model.state_dict())
    rows: list[dict] = []

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        t0 = time.time()
        sums = dict.fromkeys(LOSS_NAMES, 0.0)
        for idx in _batches(len(train), cfg.batch_size, rng.permutation(len(train))):
            bundle = compute_losses(model, *train.batch(idx), rng=rng, losses=cfg.losses)
            loss = total_loss(bundle)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            model.clamp_temperature()
            for k in LOSS_NAMES:
                sums[k] += as_float(getattr(bundle, k)) * len(idx)
        train_bundle = LossBundle(*(sums[k] / len(train) for k in LOSS_NAMES))
        val_bundle = evaluate_losses(model, val, cfg.losses, cfg.batch_size, seed=cfg.seed)
        val_total = val_bundle.as_floats()["total"]
        for split_name, b in (("train", train_bundle), ("val", val_bundle)):
            rows.append({"epoch": epoch, "split": split_name, **b.as_floats()})
        logger.info("epoch %d  train %.4f  val %.4f  (%.1fs)", epoch, train_bundle.as_floats()["total"], val_total,
                    time.time() - t0)

        stop = stopper.update(epoch, val_total)
        if stopper.best_epoch == epoch:
            best_weights = copy.deepcopy(model.state_dict())
        state.epoch = epoch
        state.best_val_loss = stopper.best
        state.best_epoch = stopper.best_epoch
        state.epochs_since_improvement = stopper.epochs_since_improvement
        if stop:
            state.stopped_early = True
            break

    model.load_state_dict(best_weights)
    if log_path is not None:
        write_log(rows, log_path)
    return RefineResult(model=model, log=rows, state=state)


def write_log(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
