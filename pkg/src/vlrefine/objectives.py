"""The four refinement losses (ITC, ITM, MLM, GM), masking plans and hard negatives."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import DualEncoder

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100
LOSS_NAMES = ("itc", "itm", "mlm", "gm")


class ContractViolation(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# ITC
# --------------------------------------------------------------------------


def _check_unit_rows(x: torch.Tensor, name: str) -> None:
    norms = x.detach().norm(dim=-1)
    if bool(((norms - 1).abs() > 1e-3).any()):
        raise ContractViolation(f"{name} rows must be unit norm (max deviation {float((norms - 1).abs().max()):.3g})")


def similarity_matrix(img_emb: torch.Tensor, txt_emb: torch.Tensor) -> torch.Tensor:
    """Cosine similarities of unit rows; entry (i, j) pairs image i with report j."""
    return img_emb @ txt_emb.t()


def itc_loss(img_emb: torch.Tensor, txt_emb: torch.Tensor, temperature) -> torch.Tensor:
    """Symmetric InfoNCE: mean of image->text and text->image cross-entropy."""
    if img_emb.shape[0] < 1 or img_emb.shape != txt_emb.shape:
        raise ContractViolation("image and text embeddings must be non-empty and the same shape")
    _check_unit_rows(img_emb, "image embedding")
    _check_unit_rows(txt_emb, "text embedding")
    logits = similarity_matrix(img_emb, txt_emb) / temperature
    targets = torch.arange(logits.shape[0], device=logits.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.t(), targets))


# --------------------------------------------------------------------------
# Hard negatives and ITM
# --------------------------------------------------------------------------


def negative_probabilities(sim_row: np.ndarray, self_index: int, temperature: float) -> np.ndarray:
    """Softmax of ``sim_row / temperature`` over all indices except ``self_index``."""
    sim_row = np.asarray(sim_row, dtype=np.float64)
    if sim_row.shape[0] < 2:
        raise ValueError("cannot sample a negative from a batch of one")
    logits = sim_row / temperature
    logits[self_index] = -np.inf
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def sample_hard_negative(sim_row, self_index: int, rng: np.random.Generator, temperature: float = 1.0) -> int:
    p = negative_probabilities(sim_row, self_index, temperature)
    return int(rng.choice(len(p), p=p))


def sample_negatives(sims: Optional[np.ndarray], rng: np.random.Generator, temperature: float = 1.0,
                     batch_size: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """One hard-negative report per image and one hard-negative image per report.

    With ``sims=None`` negatives are drawn uniformly (used when ITC is not
    trained and similarities carry no signal).
    """
    B = batch_size if sims is None else sims.shape[0]
    if B < 2:
        raise ValueError("cannot sample a negative from a batch of one")
    if sims is None:
        sims = np.zeros((B, B))
        temperature = 1.0
    neg_txt = np.array([sample_hard_negative(sims[i], i, rng, temperature) for i in range(B)])
    neg_img = np.array([sample_hard_negative(sims[:, j], j, rng, temperature) for j in range(B)])
    return neg_txt, neg_img


def build_itm_examples(neg_txt: Sequence[int], neg_img: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Image index, report index and match label (1 = true pair) for the 3B ITM examples."""
    B = len(neg_txt)
    pos = np.arange(B)
    img_idx = np.concatenate([pos, pos, np.asarray(neg_img)])
    txt_idx = np.concatenate([pos, np.asarray(neg_txt), pos])
    labels = np.concatenate([np.ones(B, dtype=np.int64), np.zeros(2 * B, dtype=np.int64)])
    return img_idx, txt_idx, labels


def itm_loss(model: DualEncoder, visual_tokens: torch.Tensor, ids: torch.Tensor, valid: torch.Tensor,
             rng: Optional[np.random.Generator] = None, sims: Optional[torch.Tensor] = None,
             negatives: Optional[tuple[Sequence[int], Sequence[int]]] = None) -> torch.Tensor:
    """Binary match/no-match cross-entropy over positives and swapped hard negatives.

    Negatives come from ``negatives`` when given, otherwise they are sampled
    with ``rng`` from ``sims`` (uniformly if ``sims`` is None).
    """
    B = ids.shape[0]
    if B < 2:
        logger.warning("ITM skipped: batch of one has no negatives")
        return visual_tokens.sum() * 0.0
    if negatives is None:
        if rng is None:
            raise ValueError("need an rng to sample negatives")
        temperature = float(model.temperature.detach())
        sim_np = None if sims is None else sims.detach().double().cpu().numpy()
        negatives = sample_negatives(sim_np, rng, temperature, batch_size=B)
    img_idx, txt_idx, labels = build_itm_examples(*negatives)
    img_idx, txt_idx = torch.as_tensor(img_idx), torch.as_tensor(txt_idx)
    out = model.text(ids[txt_idx], valid[txt_idx], mode="cross_bidirectional", visual_tokens=visual_tokens[img_idx])
    logits = model.itm_head(out.cls)
    return F.cross_entropy(logits, torch.as_tensor(labels, device=logits.device))


# --------------------------------------------------------------------------
# Masking
# --------------------------------------------------------------------------


@dataclass
class MaskPlan:
    positions: torch.Tensor  # [B, L] bool, predicted positions
    replaced_ids: torch.Tensor  # [B, L] model input ids
    labels: torch.Tensor  # [B, L] original ids at positions, IGNORE_INDEX elsewhere


def mask_count(n_maskable: int, rate: float) -> int:
    # Python round() is half-to-even; counts use half-up
    return max(1, int(math.floor(rate * n_maskable + 0.5)))


def maskable_positions(ids: torch.Tensor, valid: torch.Tensor, special_ids: Sequence[int] = (0, 1, 2)) -> torch.Tensor:
    special = torch.zeros_like(ids, dtype=torch.bool)
    for s in special_ids:
        special |= ids == s
    return valid & ~special


def _select(ids, valid, rate, rng, special_ids) -> torch.Tensor:
    maskable = maskable_positions(ids, valid, special_ids).cpu().numpy()
    chosen = np.zeros_like(maskable)
    for b in range(maskable.shape[0]):
        cand = np.flatnonzero(maskable[b])
        if len(cand) == 0:
            raise ContractViolation(f"report {b} has no maskable (non-special) tokens")
        pick = rng.choice(cand, size=mask_count(len(cand), rate), replace=False)
        chosen[b, pick] = True
    return torch.as_tensor(chosen, device=ids.device)


def mlm_mask(ids: torch.Tensor, valid: torch.Tensor, rng: np.random.Generator, rate: float = 0.15,
             mask_id: int = 3, special_ids: Sequence[int] = (0, 1, 2)) -> MaskPlan:
    positions = _select(ids, valid, rate, rng, special_ids)
    return MaskPlan(
        positions=positions,
        replaced_ids=torch.where(positions, torch.full_like(ids, mask_id), ids),
        labels=torch.where(positions, ids, torch.full_like(ids, IGNORE_INDEX)),
    )


def gm_mask(ids: torch.Tensor, valid: torch.Tensor, rng: np.random.Generator, rate: float = 0.6,
            special_ids: Sequence[int] = (0, 1, 2)) -> MaskPlan:
    # targets only: the causal mask already hides each target from its own context
    positions = _select(ids, valid, rate, rng, special_ids)
    return MaskPlan(
        positions=positions,
        replaced_ids=ids.clone(),
        labels=torch.where(positions, ids, torch.full_like(ids, IGNORE_INDEX)),
    )


# --------------------------------------------------------------------------
# MLM / GM
# --------------------------------------------------------------------------


def _check_plan(plan: MaskPlan) -> None:
    if not bool(plan.positions.any()):
        raise ContractViolation("mask plan selects no positions")


def mlm_loss(model: DualEncoder, visual_tokens: torch.Tensor, valid: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
    """Cross-entropy at masked positions of a bidirectional cross-modal forward."""
    _check_plan(plan)
    out = model.text(plan.replaced_ids, valid, mode="cross_bidirectional", visual_tokens=visual_tokens)
    logits = model.lm_logits(out.tokens[plan.positions])
    return F.cross_entropy(logits, plan.labels[plan.positions])


def gm_loss(model: DualEncoder, visual_tokens: torch.Tensor, valid: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
    """Next-token cross-entropy under causal masking: position t-1 predicts target token t."""
    _check_plan(plan)
    if bool(plan.positions[:, 0].any()):
        raise ContractViolation("position 0 cannot be a generation target")
    out = model.text(plan.replaced_ids, valid, mode="cross_causal", visual_tokens=visual_tokens)
    targets = plan.positions[:, 1:]
    logits = model.lm_logits(out.tokens[:, :-1][targets])
    return F.cross_entropy(logits, plan.labels[:, 1:][targets])


# --------------------------------------------------------------------------
# Sum
# --------------------------------------------------------------------------


def as_float(value) -> float:
    """Python float of a scalar tensor or number, without touching autograd."""
    return value.detach().item() if isinstance(value, torch.Tensor) else float(value)


@dataclass
class LossBundle:
    itc: torch.Tensor | float
    itm: torch.Tensor | float
    mlm: torch.Tensor | float
    gm: torch.Tensor | float

    @property
    def total(self):
        return total_loss(self)

    def as_floats(self) -> dict[str, float]:
        total_loss(self)  # finiteness check
        vals = {k: as_float(getattr(self, k)) for k in LOSS_NAMES}
        vals["total"] = sum(vals.values())
        return vals


def total_loss(bundle: LossBundle):
    """Unweighted sum itc + itm + mlm + gm; refuses non-finite components."""
    parts = [bundle.itc, bundle.itm, bundle.mlm, bundle.gm]
    values = [as_float(p) for p in parts]
    for name, v in zip(LOSS_NAMES, values):
        if not math.isfinite(v):
            detail = ", ".join(f"{n}={p:.6g}" for n, p in zip(LOSS_NAMES, values))
            raise DivergenceError(f"non-finite {name} loss ({detail})")
    return bundle.itc + bundle.itm + bundle.mlm + bundle.gm


def compute_losses(model: DualEncoder, images: torch.Tensor, ids: torch.Tensor, valid: torch.Tensor,
                   rng: np.random.Generator, losses: Sequence[str] = LOSS_NAMES) -> LossBundle:
    """Four forwards over one batch; excluded losses are exactly zero and carry no graph.

    Random draws are made in a fixed order (ITM negatives, MLM mask, GM
    targets) so a run is reproducible from the rng state alone.
    """
    unknown = set(losses) - set(LOSS_NAMES)
    if unknown or not losses:
        raise ValueError(f"loss subset must be a nonempty subset of {LOSS_NAMES}, got {list(losses)}")
    obj = model.cfg.objectives
    zero = torch.zeros((), dtype=images.dtype)
    vis = model.vision(images)
    bundle = LossBundle(zero, zero, zero, zero)

    sims = None
    if "itc" in losses:
        img_emb = model.image_proj(vis.cls)
        txt = model.text(ids, valid, mode="unimodal")
        txt_emb = model.text_proj(txt.cls)
        bundle.itc = itc_loss(img_emb, txt_emb, model.temperature)
        sims = similarity_matrix(img_emb, txt_emb).detach()
    if "itm" in losses:
        bundle.itm = itm_loss(model, vis.tokens, ids, valid, rng=rng, sims=sims)
    if "mlm" in losses:
        plan = mlm_mask(ids, valid, rng, rate=obj.mlm_rate)
        bundle.mlm = mlm_loss(model, vis.tokens, valid, plan)
    if "gm" in losses:
        plan = gm_mask(ids, valid, rng, rate=obj.gm_rate)
        bundle.gm = gm_loss(model, vis.tokens, valid, plan)
    return bundle
