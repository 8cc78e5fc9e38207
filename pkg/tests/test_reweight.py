import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debiased_clip import autodiff as ad
from debiased_clip.autodiff import ParamStore, backward, zero_grad
from debiased_clip.data import PairedBatch
from debiased_clip.losses import clip_loss, ctr_loss, topk_clip_loss
from debiased_clip.model import DualEncoder, EncoderConfig
from debiased_clip.reweight import (
    alignment_scores,
    alignment_weights,
    debiased_objective,
    normalize_weights,
)

from conftest import central_diff


def tiny_batch(rng, b=2, p=3, q=3):
    images = rng.standard_normal((b, p))
    views = np.concatenate([images + 0.3 * rng.standard_normal((b, p)),
                            images + 0.3 * rng.standard_normal((b, p))])
    return PairedBatch(images, views, rng.standard_normal((b, q)), np.arange(b) % 2,
                       (np.arange(2 * b) + b) % (2 * b))


class TestNormalization:
    def test_worked_example(self):
        np.testing.assert_allclose(normalize_weights([2.0, -1.0, 3.0, 0.0]).weights, [0.4, 0, 0.6, 0])

    def test_all_negative_is_zero_vector(self):
        w = normalize_weights([-1.0, -2.0, -0.5])
        np.testing.assert_array_equal(w.weights, 0.0)
        assert w.total == 0.0 and w.normalizer == 1.0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=16), st.floats(1e-3, 1e3))
    def test_simplex_or_zero_and_scale_free(self, raw, c):
        w = normalize_weights(raw)
        assert np.all(w.weights >= 0)
        assert np.all(w.weights[np.asarray(raw) <= 0] == 0)
        if np.any(np.asarray(raw) > 0):
            assert w.total == pytest.approx(1.0, abs=1e-12)
        else:
            assert w.total == 0.0
        np.testing.assert_allclose(normalize_weights(np.asarray(raw) * c).weights, w.weights, atol=1e-12)


class TestAlignmentScores:
    @pytest.mark.parametrize("seed", range(3))
    def test_each_score_vs_finite_difference_gradients(self, seed):
        rng = np.random.default_rng(seed)
        model = DualEncoder(EncoderConfig(p=3, q=3, d=2, seed=seed))
        batch = tiny_batch(rng)
        k = 1
        raw, _ = alignment_scores(batch, model, k, grad_scope="final")
        names = model.scope_names("final")

        def with_scope(vec):
            store = model.params.copy()
            pos = 0
            for n in sorted(names):
                size = store[n].size
                store[n] = vec[pos:pos + size].reshape(store[n].shape)
                pos += size
            return DualEncoder(model.config, store)

        def topk_at(vec):
            m = with_scope(vec)
            m.params.track()
            return float(topk_clip_loss(m.encode_image(batch.images), m.encode_text(batch.texts),
                                        m.tau_node(), k).value)

        def ctr_at(vec, view):
            m = with_scope(vec)
            m.params.track()
            return float(ctr_loss(m.encode_image(batch.views), batch.pairing, m.tau_node()).value[view])

        theta = model.params.flatten(names)
        g0 = central_diff(topk_at, theta)
        for view in range(4):
            gm = central_diff(lambda v: ctr_at(v, view), theta)
            expected = g0 @ gm
            assert abs(raw[view] - expected) <= 1e-3 * max(abs(expected), 1e-8)

    def test_scale_covariance(self, rng):
        """Scaling the contrastive loss by c scales each w_m by c and leaves W unchanged."""
        model = DualEncoder(EncoderConfig(p=3, q=3, d=2, seed=4))
        batch = tiny_batch(rng, b=3)
        raw, g0 = alignment_scores(batch, model, 2)
        c = 3.5
        model.params.track()
        ctr = ctr_loss(model.encode_image(batch.views), batch.pairing, model.tau_node())
        names = model.scope_names()
        scaled = np.array([g0 @ ad.grad_vector(ad.scale(ctr[m], c), model.params, names)
                           for m in range(6)])
        np.testing.assert_allclose(scaled, c * raw, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(normalize_weights(scaled).weights, normalize_weights(raw).weights, atol=1e-12)

    def test_norm_variant_is_nonnegative(self, rng):
        model = DualEncoder(EncoderConfig(p=3, q=3, d=2))
        w = alignment_weights(tiny_batch(rng, b=3), model, 2, variant="table1-norm")
        assert np.all(w.raw >= 0) and w.total == pytest.approx(1.0)

    def test_scope_all_uses_more_parameters(self, rng):
        model = DualEncoder(EncoderConfig(p=3, q=3, d=2))
        batch = tiny_batch(rng, b=3)
        a, _ = alignment_scores(batch, model, 2, grad_scope="final")
        b, _ = alignment_scores(batch, model, 2, grad_scope="all")
        assert not np.allclose(a, b)

    def test_bad_scope_and_variant(self, rng):
        model = DualEncoder(EncoderConfig(p=3, q=3, d=2))
        with pytest.raises(ValueError):
            alignment_weights(tiny_batch(rng), model, 1, grad_scope="text")
        with pytest.raises(ValueError):
            alignment_weights(tiny_batch(rng), model, 1, variant="nope")

    def test_non_finite_gradient_names_view(self, rng):
        model = DualEncoder(EncoderConfig(p=3, q=3, d=2))
        batch = tiny_batch(rng)
        batch.views[2, 0] = np.nan
        with np.errstate(invalid="ignore"), pytest.raises((FloatingPointError, ValueError)):
            alignment_weights(batch, model, 1)

    def test_check_finite_message(self):
        from debiased_clip.reweight import _check_finite

        with pytest.raises(FloatingPointError, match="view 3"):
            _check_finite(np.array([1.0, np.nan]), "view 3")


class TestDebiasedObjective:
    def test_beta_zero_matches_clip_only(self, rng):
        model = DualEncoder(EncoderConfig(p=3, q=3, d=2, seed=2))
        batch = tiny_batch(rng, b=3)

        def loss_and_grads(**kw):
            obj = debiased_objective(batch, model, 2, **kw)
            zero_grad(obj.total)
            backward(obj.total)
            return obj.total.value, {n: model.params.node(n).grad.copy() for n in model.params.names}

        v0, g0 = loss_and_grads(mode="clip")
        v1, g1 = loss_and_grads(mode="debiased", beta=0.0)
        assert v0 == v1
        for n in g0:
            assert g0[n].tobytes() == g1[n].tobytes()

    def test_zero_weights_match_clip_only(self, rng):
        model = DualEncoder(EncoderConfig(p=3, q=3, d=2, seed=2))
        batch = tiny_batch(rng, b=3)
        zero = normalize_weights(-np.ones(6))
        a = debiased_objective(batch, model, 2, beta=2.0, weights=zero).total.value
        assert a == debiased_objective(batch, model, 2, mode="clip").total.value

    def test_straight_line_total(self, rng):
        model = DualEncoder(EncoderConfig(p=3, q=3, d=2, seed=5))
        batch = tiny_batch(rng, b=2)
        beta = 0.7
        obj = debiased_objective(batch, model, 1, beta=beta)
        w = obj.weights.weights
        zi, zt = model.embed_images(batch.images), model.embed_texts(batch.texts)
        zv = model.embed_images(batch.views)
        tau = model.tau
        b = 2
        clip = 0.0
        for i in range(b):
            pos = np.exp(zi[i] @ zt[i] / tau)
            clip -= np.log(pos / sum(np.exp(zi[i] @ zt[j] / tau) for j in range(b)))
            clip -= np.log(pos / sum(np.exp(zi[j] @ zt[i] / tau) for j in range(b)))
        clip /= 2 * b
        ctr = []
        for i in range(4):
            num = np.exp(zv[i] @ zv[batch.pairing[i]] / tau)
            den = sum(np.exp(zv[i] @ zv[m] / tau) for m in range(4) if m != i)
            ctr.append(-np.log(num / den))
        assert abs(obj.total.value - (clip + beta * float(np.dot(w, ctr)))) < 1e-10

    def test_weights_are_constants(self, rng):
        """One SGD step with detached weights equals a manual update built from fixed W."""
        model = DualEncoder(EncoderConfig(p=3, q=3, d=2, seed=6))
        batch = tiny_batch(rng, b=3)
        obj = debiased_objective(batch, model, 2, beta=1.0)
        zero_grad(obj.total)
        backward(obj.total)
        implementation = {n: model.params.node(n).grad.copy() for n in model.params.names}

        w = obj.weights.weights
        model.params.track()
        tau = model.tau_node()
        clip = clip_loss(model.encode_image(batch.images), model.encode_text(batch.texts), tau).total
        ctr = ctr_loss(model.encode_image(batch.views), batch.pairing, tau)
        manual_root = clip
        for m in range(6):
            manual_root = manual_root + ad.scale(ctr[m], float(w[m]))
        backward(manual_root)
        for n in model.params.names:
            np.testing.assert_allclose(implementation[n], model.params.node(n).grad, rtol=1e-12, atol=1e-14)

    def test_negative_beta_rejected(self, rng):
        model = DualEncoder(EncoderConfig(p=3, q=3, d=2))
        with pytest.raises(ValueError):
            debiased_objective(tiny_batch(rng), model, 1, beta=-1.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_vs_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        model = DualEncoder(EncoderConfig(p=3, q=3, d=2, seed=seed))
        batch = tiny_batch(rng, b=3)
        weights = alignment_weights(batch, model, 2)
        obj = debiased_objective(batch, model, 2, beta=1.5, weights=weights)
        zero_grad(obj.total)
        backward(obj.total)
        analytic = np.concatenate([model.params.node(n).grad.ravel() for n in model.params.names])

        def f(vec):
            m = DualEncoder(model.config, model.params.unflatten(vec))
            return float(debiased_objective(batch, m, 2, beta=1.5, weights=weights).total.value)

        numeric = central_diff(f, model.params.flatten())
        err = np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-6))
        assert err < 1e-4
