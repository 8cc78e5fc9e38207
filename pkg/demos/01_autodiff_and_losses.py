"""
Gradients through the contrastive losses
========================================

A tiny tape records every operation; ``backward`` walks it in reverse.
Here we check one gradient against finite differences, then look at how the
average-top-k relaxation focuses on the hardest pairs.
"""

import numpy as np

from debiased_clip import autodiff as ad
from debiased_clip.losses import clip_loss, ctr_loss, topk_clip_loss, topk_relax

rng = np.random.default_rng(0)

# %%
# A four-pair batch of unit embeddings. The image side is a leaf we can
# differentiate with respect to.
raw = rng.standard_normal((4, 3))
leaf = ad.Node(raw)
z_img = ad.l2norm_rows(leaf)
z_txt = ad.l2norm_rows(ad.constant(rng.standard_normal((4, 3))))

loss = clip_loss(z_img, z_txt, tau=0.1)
ad.backward(loss.total)
print("CLIP loss:", loss.total.value)
print("per-pair losses:", loss.per_example().value)

# Central differences on one coordinate
eps = 1e-5
bumped = raw.copy()
bumped[0, 0] += eps
up = clip_loss(ad.l2norm_rows(ad.constant(bumped)), z_txt, 0.1).total.value
bumped[0, 0] -= 2 * eps
down = clip_loss(ad.l2norm_rows(ad.constant(bumped)), z_txt, 0.1).total.value
print("analytic", leaf.grad[0, 0], "numeric", (up - down) / (2 * eps))

# %%
# The top-k relaxation (1/k) sum [l - lam]_+ + lam is the mean of the k
# largest values. With k = B it is the ordinary mean.
values = np.array([0.3, 2.0, 1.1, 0.7])
for k in (1, 2, 4):
    print(f"k={k}: relaxed {topk_relax(ad.constant(values), k).value:.3f}",
          f"sorted mean {np.sort(values)[::-1][:k].mean():.3f}")
print("top-2 CLIP:", topk_clip_loss(z_img, z_txt, 0.1, k=2).value)

# %%
# The image-pair contrastive loss needs 2B views and a pairing that sends
# each view to its partner.
views = ad.l2norm_rows(ad.constant(rng.standard_normal((8, 3))))
pairing = (np.arange(8) + 4) % 8
print("per-view NT-Xent:", np.round(ctr_loss(views, pairing, 0.5).value, 3))
