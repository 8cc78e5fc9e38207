"""
Reweighting views by gradient alignment
=======================================

Each augmented view gets a raw score: the dot product between the gradient of
the top-k CLIP loss and the gradient of that view's contrastive loss, both
taken over the image encoder's final layer. Negative scores are clamped and the
rest normalized, so weights sit on the simplex (or are all zero).
"""

import numpy as np

from debiased_clip import (
    DualEncoder,
    EncoderConfig,
    bias_preset,
    debiased_objective,
    gen_synthetic,
    make_batch,
    strip_attributes,
)
from debiased_clip.reweight import alignment_scores, normalize_weights

spec = bias_preset(n=64, seed=0)
# The training side only ever sees ids, features and labels
train_set = strip_attributes(gen_synthetic(spec))
model = DualEncoder(EncoderConfig(p=spec.p, q=spec.q, d=8))

rng = np.random.default_rng(0)
batch = make_batch(train_set, np.arange(8), strength=0.5, rng=rng)

raw, _ = alignment_scores(batch, model, k=4)
weights = normalize_weights(raw)
print("raw alignments:", np.round(raw, 4))
print("weights:       ", np.round(weights.weights, 3))
print("summary:", weights.summary())

# %%
# Scaling every raw score by the same positive constant changes nothing.
print(np.allclose(normalize_weights(raw * 1e3).weights, weights.weights))

# %%
# The joint objective adds beta * sum W_m ctr_m to the CLIP loss, with W held
# fixed during the backward pass.
obj = debiased_objective(batch, model, k=4, beta=1.0, weights=weights)
print("total", obj.total.value, "clip", obj.clip.value, "weighted ctr", obj.weighted_ctr.value)
