"""Gradient-alignment surrogate weights and the joint debiased objective.

Each augmented view m gets a raw score

    w_m = <grad_theta topk_clip_loss, grad_theta ctr_loss(view m)>

over a subset theta of image-encoder parameters. Scores are clamped at zero
and normalized to a distribution, or to the zero vector when nothing
survives the clamp. The weights then scale the per-view contrastive losses
as constants next to the ordinary CLIP loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, grad_vector
from .data import PairedBatch
from .losses import clip_loss, ctr_loss, topk_clip_loss
from .model import DualEncoder

VARIANTS = ("alignment", "table1-norm")


@dataclass
class WeightVector:
    weights: np.ndarray  # W_m, non-negative, sums to 1 or 0
    raw: np.ndarray  # w_m
    clamped: np.ndarray  # max(w_m, 0)
    normalizer: float  # sum(clamped) + guard

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    def summary(self) -> dict[str, float]:
        w = self.weights
        nz = w[w > 0]
        return {
            "w_max": float(w.max()) if w.size else 0.0,
            "w_entropy": float(-(nz * np.log(nz)).sum()),
            "w_zero_frac": float(np.mean(w == 0)) if w.size else 1.0,
        }


def normalize_weights(raw) -> WeightVector:
    """Clamp raw alignments at zero and normalize; all-zero input maps to all-zero weights."""
    raw = np.asarray(raw, dtype=np.float64)
    clamped = np.maximum(raw, 0.0)
    mass = clamped.sum()
    normalizer = mass + (1.0 if mass == 0 else 0.0)
    return WeightVector(clamped / normalizer, raw, clamped, float(normalizer))


def _check_finite(vec: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(vec)):
        raise FloatingPointError(f"non-finite gradient for {what}")
    return vec


def alignment_scores(
    batch: PairedBatch,
    model: DualEncoder,
    k: int,
    grad_scope: str = "final",
    variant: str = "alignment",
    granularity: str = "example",
) -> tuple[np.ndarray, np.ndarray]:
    """Raw per-view scores and the top-k CLIP gradient they were aligned with.

    ``variant="alignment"`` dots each view's contrastive-loss gradient with the
    top-k CLIP gradient; ``variant="table1-norm"`` uses the view gradient's norm.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown weight variant {variant!r}; expected one of {VARIANTS}")
    names = model.scope_names(grad_scope)
    if not names:
        raise ValueError("empty parameter scope")
    model.params.track()
    tau = model.tau_node()
    z_views = model.encode_image(batch.views)
    ctr = ctr_loss(z_views, batch.pairing, tau)

    g0 = None
    if variant == "alignment":
        z_img = model.encode_image(batch.images)
        z_txt = model.encode_text(batch.texts)
        top = topk_clip_loss(z_img, z_txt, tau, k, granularity=granularity, views=z_views)
        g0 = _check_finite(grad_vector(top, model.params, names), "the top-k CLIP loss")

    raw = np.empty(len(batch.views))
    for m in range(len(batch.views)):
        gm = _check_finite(grad_vector(ctr[m], model.params, names), f"view {m}")
        raw[m] = g0 @ gm if g0 is not None else np.linalg.norm(gm)
    return raw, g0


def alignment_weights(
    batch: PairedBatch,
    model: DualEncoder,
    k: int,
    grad_scope: str = "final",
    variant: str = "alignment",
    granularity: str = "example",
) -> WeightVector:
    raw, _ = alignment_scores(batch, model, k, grad_scope, variant, granularity)
    return normalize_weights(raw)


@dataclass
class Objective:
    total: Node
    clip: Node
    weighted_ctr: Node | None
    weights: WeightVector | None


def debiased_objective(
    batch: PairedBatch,
    model: DualEncoder,
    k: int,
    beta: float = 1.0,
    mode: str = "debiased",
    weights: WeightVector | np.ndarray | None = None,
    grad_scope: str = "final",
    variant: str = "alignment",
    granularity: str = "example",
) -> Objective:
    """CLIP loss, plus ``beta * sum_m W_m * ctr_m`` in debiased mode.

    Weights are computed first (or taken from ``weights``) and enter the graph
    as constants. Parameters are re-tracked, so the returned graph is fresh.
    """
    if mode not in ("clip", "debiased"):
        raise ValueError(f"unknown mode {mode!r}; expected 'clip' or 'debiased'")
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if mode == "debiased" and weights is None:
        weights = alignment_weights(batch, model, k, grad_scope, variant, granularity)

    model.params.track()
    tau = model.tau_node()
    z_img = model.encode_image(batch.images)
    z_txt = model.encode_text(batch.texts)
    clip = clip_loss(z_img, z_txt, tau).total
    if mode == "clip":
        return Objective(clip, clip, None, None)

    w = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, dtype=np.float64)
    ctr = ctr_loss(model.encode_image(batch.views), batch.pairing, tau)
    weighted = ad.sum(ad.mul(ctr, ad.constant(w)))
    total = clip + ad.scale(weighted, beta)
    wv = weights if isinstance(weights, WeightVector) else None
    return Objective(total, clip, weighted, wv)
