"""Cross-attention saliency maps: which image patches the report tokens attend to."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch

from .corpus import Vocabulary, tokenize
from .encoders import DualEncoder


@dataclass
class SaliencyMap:
    grid: np.ndarray  # [g, g] in [0, 1]
    upsampled: np.ndarray  # [H, W]

    def overlay(self, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
        return overlay(image, self.upsampled, alpha)


@torch.no_grad()
def capture_cross_attention(model: DualEncoder, image, ids, valid) -> np.ndarray:
    """Cross-attention probabilities of one (image, report) pair.

    Returns ``[depth, heads, L_text, N_patches]``; rows are softmax outputs.
    """
    was_training = model.training
    model.eval()
    image = torch.as_tensor(image, dtype=torch.float32)
    if image.dim() == 3:
        image = image[None]
    ids = torch.as_tensor(ids, dtype=torch.long).reshape(1, -1)
    valid = torch.as_tensor(valid, dtype=torch.bool).reshape(1, -1)
    vis = model.vision(image)
    out = model.text(ids, valid, mode="cross_bidirectional", visual_tokens=vis.tokens, capture=True)
    model.train(was_training)
    return torch.stack([a[0] for a in out.attn_maps]).double().numpy()


def query_rows(ids: Sequence[int], valid: Sequence[bool], query: Union[str, int], special_ids=(0, 1, 2)) -> np.ndarray:
    ids = np.asarray(ids)
    content = np.asarray(valid, dtype=bool) & ~np.isin(ids, special_ids)
    if query == "all":
        if not content.any():
            raise ValueError("report has no content tokens")
        return np.flatnonzero(content)
    q = int(query)
    if not 0 <= q < len(ids) or not content[q]:
        raise ValueError(f"query position {q} is not a content token (CLS/SEP/PAD cannot be queried)")
    return np.array([q])


def rollout(stack: np.ndarray, rows: Sequence[int], image_size: int | None = None) -> SaliencyMap:
    """Mean over heads, layers and the selected query rows, min-max scaled to [0, 1].

    A constant map has no informative range and is returned as all zeros.
    """
    stack = np.asarray(stack, dtype=np.float64)
    per_patch = stack.mean(axis=(0, 1))[np.asarray(rows)].mean(axis=0)
    lo, hi = per_patch.min(), per_patch.max()
    scaled = np.zeros_like(per_patch) if hi - lo <= 0 else (per_patch - lo) / (hi - lo)
    g = int(round(np.sqrt(len(scaled))))
    if g * g != len(scaled):
        raise ValueError(f"{len(scaled)} patches do not form a square grid")
    grid = scaled.reshape(g, g)
    size = image_size or g
    if size % g:
        raise ValueError("image size must be a multiple of the patch grid")
    factor = size // g
    return SaliencyMap(grid=grid, upsampled=np.kron(grid, np.ones((factor, factor))))


def overlay(image: np.ndarray, saliency: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend a red-yellow heat map over a grayscale or RGB image; returns uint8 RGB."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else img.mean(axis=0)
    base = np.repeat(np.clip(img, 0, 1)[..., None], 3, axis=2)
    s = np.clip(saliency, 0, 1)
    heat = np.stack([np.clip(2 * s, 0, 1), np.clip(2 * s - 1, 0, 1), np.zeros_like(s)], axis=2)
    return np.round(255 * ((1 - alpha * s[..., None]) * base + alpha * s[..., None] * heat)).astype(np.uint8)


def explain(model: DualEncoder, image: np.ndarray, report: str, vocab: Vocabulary,
            query: Union[str, int] = "all") -> SaliencyMap:
    ids, valid = tokenize(report, vocab, model.cfg.text.max_len)
    stack = capture_cross_attention(model, image, ids, valid)
    return rollout(stack, query_rows(ids, valid, query, special_ids=(vocab.cls_id, vocab.sep_id, vocab.pad_id)),
                   model.cfg.vision.image_size)


def localization_hit(saliency: SaliencyMap, mask: np.ndarray) -> bool:
    """True when mean saliency inside the lesion mask exceeds the mean outside it."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any() or mask.all():
        raise ValueError("mask must contain both lesion and background pixels")
    return bool(saliency.upsampled[mask].mean() > saliency.upsampled[~mask].mean())


def write_saliency_csv(grid: np.ndarray, path: str | Path) -> None:
    with open(path, "w") as fh:
        for row in grid:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
