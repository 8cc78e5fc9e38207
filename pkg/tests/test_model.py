import numpy as np
import pytest

from debiased_clip import autodiff as ad
from debiased_clip.autodiff import ParamStore, grad_vector
from debiased_clip.model import (
    DualEncoder,
    EncoderConfig,
    PromptSet,
    load_checkpoint,
    predict_from_embeddings,
    read_checkpoint_header,
    save_checkpoint,
    zero_shot_predict,
)

from conftest import central_diff, max_rel_err


def identity_encoder(d):
    cfg = EncoderConfig(p=d, q=d, d=d, depth=1)
    params = ParamStore({"image.W0": np.eye(d), "image.b0": np.zeros(d),
                         "text.W0": np.eye(d), "text.b0": np.zeros(d), "log_tau": np.log(0.07)})
    return DualEncoder(cfg, params)


class TestEncoders:
    def test_identity_image_passthrough(self, rng):
        x = rng.standard_normal(4)
        np.testing.assert_array_equal(identity_encoder(4).encode_image(x, normalize=False).value[0], x)

    def test_identity_text_passthrough(self, rng):
        t = rng.standard_normal((2, 4))
        np.testing.assert_array_equal(identity_encoder(4).encode_text(t, normalize=False).value, t)

    def test_batch_shape(self, rng):
        model = DualEncoder(EncoderConfig(p=5, q=3, d=4))
        assert model.encode_image(rng.standard_normal((3, 5))).shape == (3, 4)
        assert model.encode_text(rng.standard_normal((3, 3))).shape == (3, 4)

    def test_embeddings_unit_norm(self, rng):
        z = DualEncoder(EncoderConfig(p=5, q=3, d=4)).embed_images(rng.standard_normal((6, 5)))
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0)

    def test_dimension_mismatch_names_expected(self, rng):
        model = DualEncoder(EncoderConfig(p=5, q=3, d=4))
        with pytest.raises(ValueError, match="expected input dimension 5"):
            model.encode_image(rng.standard_normal((2, 4)))
        with pytest.raises(ValueError, match="expected input dimension 3"):
            model.encode_text(rng.standard_normal((2, 4)))

    def test_tau_positive_and_initialized(self):
        model = DualEncoder(EncoderConfig(p=2, q=2, d=2))
        assert model.tau == pytest.approx(0.07)
        model.params["log_tau"] = np.array(-50.0)
        assert model.tau > 0

    def test_init_bounds_and_seed(self):
        a = DualEncoder(EncoderConfig(p=6, q=3, d=4, seed=3))
        b = DualEncoder(EncoderConfig(p=6, q=3, d=4, seed=3))
        assert a.params.same_as(b.params)
        assert np.abs(a.params["image.W0"]).max() <= 1 / np.sqrt(6)
        assert a.params["image.W0"].shape == (6, 8)  # hidden = 2d

    @pytest.mark.parametrize("tower", ["image", "text"])
    def test_gradient_vs_finite_differences(self, tower, rng):
        model = DualEncoder(EncoderConfig(p=4, q=3, d=3, seed=1))
        x = rng.standard_normal((3, 4 if tower == "image" else 3))
        encode = model.encode_image if tower == "image" else model.encode_text
        names = model.tower_names(tower)

        model.params.track()
        analytic = grad_vector(ad.sum(encode(x)), model.params, names)

        def f(vec):
            store = model.params.copy()
            pos = 0
            for n in sorted(names):
                size = store[n].size
                store[n] = vec[pos:pos + size].reshape(store[n].shape)
                pos += size
            return float(ad.sum(DualEncoder(model.config, store)._tower(tower, x, True)).value)

        numeric = central_diff(f, model.params.flatten(names))
        assert max_rel_err(analytic, numeric) < 1e-4

    def test_determinism(self, rng):
        model = DualEncoder(EncoderConfig(p=4, q=3, d=3))
        x = rng.standard_normal((5, 4))
        assert model.embed_images(x).tobytes() == model.embed_images(x).tobytes()


class TestZeroShot:
    def test_aligned_with_prompt_zero(self):
        prompts = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert predict_from_embeddings(np.array([[1.0, 0.0]]), prompts).predictions[0] == 0

    def test_scale_invariance(self, rng):
        prompts = rng.standard_normal((2, 4))
        z = rng.standard_normal((1, 4))
        a = predict_from_embeddings(z, prompts).predictions
        np.testing.assert_array_equal(a, predict_from_embeddings(10 * z, prompts).predictions)

    def test_three_prompts_brute_force(self):
        prompts = np.array([[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [0.0, 0.0, 1.0]])
        z = np.array([[0.5, 0.9, 0.1]])
        cos = [float(z[0] @ p / (np.linalg.norm(z) * np.linalg.norm(p))) for p in prompts]
        best = max(range(3), key=lambda j: (cos[j], -j))
        res = predict_from_embeddings(z, prompts)
        assert res.predictions[0] == best
        np.testing.assert_allclose(res.cosines[0], cos)
        assert res.scores is None

    def test_ties_go_to_lowest_id(self):
        prompts = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert predict_from_embeddings(np.array([[1.0, 1.0]]), prompts, class_ids=[5, 2]).predictions[0] == 2

    def test_binary_score_is_logistic_margin(self):
        res = predict_from_embeddings(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [1.0, 0.0]]), tau=0.5)
        assert res.scores[0] == pytest.approx(1 / (1 + np.exp(-2.0)))

    def test_degenerate_embedding(self):
        with pytest.raises(ValueError, match="degenerate embedding"):
            predict_from_embeddings(np.zeros((1, 2)), np.eye(2))

    def test_cosines_bounded(self, rng):
        res = predict_from_embeddings(rng.standard_normal((20, 3)), rng.standard_normal((2, 3)))
        assert np.all(np.abs(res.cosines) <= 1.0)

    def test_prompt_set_validation(self):
        with pytest.raises(ValueError):
            PromptSet(np.eye(2)[:1])
        with pytest.raises(ValueError):
            PromptSet(np.eye(2), np.array([1, 1]))

    def test_model_level_prediction(self, rng):
        model = DualEncoder(EncoderConfig(p=4, q=3, d=3))
        res = zero_shot_predict(model, rng.standard_normal((6, 4)), PromptSet(rng.standard_normal((2, 3))))
        assert res.predictions.shape == (6,) and np.all((res.scores > 0) & (res.scores < 1))


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        model = DualEncoder(EncoderConfig(p=4, q=3, d=3, seed=9))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, meta={"note": "x"})
        back = load_checkpoint(path)
        assert back.params.same_as(model.params)
        assert back.config == model.config
        header = read_checkpoint_header(path)
        assert header["seed"] == 9 and header["config_hash"] == model.config.digest()

    def test_layout(self, tmp_path):
        import json
        import struct

        model = DualEncoder(EncoderConfig(p=2, q=2, d=2, depth=1))
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        assert raw[:8] == b"DBCLIPCK"
        version, length = struct.unpack("<IQ", raw[8:20])
        header = json.loads(raw[20:20 + length])
        assert version == 1
        data = np.frombuffer(raw[20 + length:], dtype="<f8")
        assert data.size == model.params.size
        first = header["params"][0]
        np.testing.assert_array_equal(data[:first["count"]].reshape(first["shape"]), model.params[first["name"]])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"nope" * 10)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)
