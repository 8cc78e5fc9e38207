"""Contrastive objectives on embedding nodes and their average-top-k relaxations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node


@dataclass
class LossBreakdown:
    total: Node
    i2t: Node  # per-example image-to-text losses, shape (B,)
    t2i: Node  # per-example text-to-image losses, shape (B,)

    def per_example(self) -> Node:
        """Per-pair loss 0.5 * (i2t + t2i); its mean equals ``total``."""
        return ad.scale(self.i2t + self.t2i, 0.5)


def _inverse_tau(tau) -> Node:
    if isinstance(tau, Node):
        return ad.reciprocal(tau)
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return ad.constant(1.0 / float(tau))


def clip_loss(z_img: Node, z_txt: Node, tau) -> LossBreakdown:
    """Symmetric image-text InfoNCE over a batch of matched, unit-norm rows.

    ``tau`` may be a float or a scalar node (then it receives a gradient).
    """
    z_img, z_txt = ad.as_node(z_img), ad.as_node(z_txt)
    if z_img.value.ndim != 2 or z_img.shape != z_txt.shape:
        raise ValueError(f"clip_loss: incompatible shapes {z_img.shape} and {z_txt.shape}")
    b = z_img.shape[0]
    if b == 0:
        raise ValueError("clip_loss: empty batch")
    logits = ad.mul(z_img @ z_txt.T, _inverse_tau(tau))
    diag = ad.pick(logits, np.arange(b), np.arange(b))
    i2t = ad.logsumexp(logits, axis=1) - diag
    t2i = ad.logsumexp(logits, axis=0) - diag
    total = ad.scale(ad.sum(i2t) + ad.sum(t2i), 1.0 / (2 * b))
    return LossBreakdown(total, i2t, t2i)


def check_pairing(pairing, n_views: int) -> np.ndarray:
    pairing = np.asarray(pairing, dtype=np.intp)
    idx = np.arange(n_views)
    if pairing.shape != (n_views,) or pairing.min(initial=0) < 0 or pairing.max(initial=0) >= n_views:
        raise ValueError(f"pairing must map each of {n_views} views to a view index")
    if np.any(pairing == idx):
        bad = idx[pairing == idx].tolist()
        raise ValueError(f"pairing has fixed points at views {bad}")
    if np.any(pairing[pairing] != idx):
        raise ValueError("pairing must be an involution (pair(pair(i)) == i)")
    return pairing


def ctr_loss(views: Node, pairing, tau) -> Node:
    """Per-view image-pair contrastive loss (NT-Xent), shape (2B,).

    View i's positive is ``pairing[i]``; the denominator runs over every other
    view in the batch.
    """
    views = ad.as_node(views)
    n = views.shape[0]
    pairing = check_pairing(pairing, n)
    sims = ad.mul(views @ views.T, _inverse_tau(tau))
    positives = ad.pick(sims, np.arange(n), pairing)
    return ad.logsumexp(sims, axis=1, mask=np.eye(n, dtype=bool)) - positives


def kth_largest(values: np.ndarray, k: int) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    if not 1 <= k <= values.size:
        raise ValueError(f"k must be in [1, {values.size}], got {k}")
    return float(np.sort(values)[::-1][k - 1])


def topk_relax(losses: Node, k: int) -> Node:
    """Average of the k largest losses written as (1/k) * sum([l - lam]_+) + lam.

    ``lam`` is the k-th largest entry. Which entry that is gets decided on the
    detached values (stable order among ties); its value stays in the graph,
    so the gradient is that of the top-k mean: 1/k on each of the k largest.
    """
    losses = ad.as_node(losses)
    values = losses.value.ravel()
    if losses.value.ndim != 1 or not 1 <= k <= values.size:
        raise ValueError(f"k must be in [1, {values.size}] for a loss vector, got {k}")
    kth = int(np.argsort(-values, kind="stable")[k - 1])
    lam = ad.index_scalar(losses, kth)
    hinge = ad.relu(ad.add(losses, ad.neg(lam)))
    return ad.add(ad.scale(ad.sum(hinge), 1.0 / k), lam)


def per_view_clip_losses(views: Node, z_txt: Node, tau) -> Node:
    """CLIP loss of each augmented view against its pair's text, shape (2B,).

    The 2B views are split into their two augmentation halves; each half forms
    a B x B CLIP problem with the shared text embeddings.
    """
    n = views.shape[0]
    b = z_txt.shape[0]
    if n != 2 * b:
        raise ValueError(f"expected {2 * b} views for {b} texts, got {n}")
    halves = []
    for start in (0, b):
        rows = ad.constant(np.eye(n)[start:start + b])
        halves.append(clip_loss(rows @ views, z_txt, tau).per_example())
    return ad.concat_rows(halves)


def topk_clip_loss(z_img: Node, z_txt: Node, tau, k: int, granularity: str = "example", views: Node | None = None) -> Node:
    """Average-top-k of per-pair CLIP losses.

    ``granularity="example"`` ranks the B values 0.5 * (i2t + t2i).
    ``granularity="view"`` ranks 2B per-view CLIP losses and needs ``views``.
    """
    if granularity == "example":
        per_item = clip_loss(z_img, z_txt, tau).per_example()
    elif granularity == "view":
        if views is None:
            raise ValueError("view granularity needs the augmented view embeddings")
        per_item = per_view_clip_losses(views, z_txt, tau)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    return topk_relax(per_item, k)
