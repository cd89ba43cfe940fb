"""Network components: text encoding, phrase conditioning, prediction head."""

import numpy as np
import pytest

from conftest import fd_gradcheck
from ppgn import tensor as T
from ppgn.errors import InvalidInputError
from ppgn.model import FilmGenerator, ModelConfig, PPGNModel

TOY = ModelConfig(image_size=128, scales=(4, 8, 16), channels=64, embed_dim=32)
MINI = ModelConfig(image_size=16, scales=(2, 4), channels=8, embed_dim=8,
                   anchors_per_cell=2)


def _images(rng, cfg, batch):
    return rng.uniform(0, 1, size=(batch, cfg.image_size, cfg.image_size, 3)).astype(
        np.float32
    )


class TestModelConfig:
    def test_rejects_non_doubling_scales(self):
        with pytest.raises(InvalidInputError):
            ModelConfig(scales=(4, 8, 24))

    def test_rejects_unsorted_scales(self):
        with pytest.raises(InvalidInputError):
            ModelConfig(scales=(16, 8, 4))

    def test_rejects_image_not_power_of_two_multiple(self):
        with pytest.raises(InvalidInputError):
            ModelConfig(image_size=96, scales=(4, 8, 16))

    def test_stem_depth(self):
        assert TOY.num_stem == 2
        assert MINI.num_stem == 1


class TestTextEncoder:
    def test_deterministic(self):
        m = PPGNModel(MINI, vocab_size=10, seed=4)
        a = m.encode_text([1, 2, 3]).data
        b = m.encode_text([1, 2, 3]).data
        np.testing.assert_array_equal(a, b)

    def test_token_order_invariant(self):
        m = PPGNModel(MINI, vocab_size=10, seed=4)
        a = m.encode_text([1, 2, 3]).data
        b = m.encode_text([3, 1, 2]).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_zero_embedding_table_propagates_biases(self):
        m = PPGNModel(MINI, vocab_size=10, seed=4)
        m.text.embed.data[...] = 0.0
        got = m.encode_text([5, 7]).data
        b1 = m.text.fc1.bias.data
        expected = np.maximum(b1, 0) @ m.text.fc2.weight.data + m.text.fc2.bias.data
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_rejects_empty_and_unknown(self):
        m = PPGNModel(MINI, vocab_size=10, seed=4)
        with pytest.raises(InvalidInputError):
            m.encode_text([])
        with pytest.raises(InvalidInputError):
            m.encode_text([10])


class TestFilm:
    def test_zero_input_zero_bias(self):
        rng = np.random.default_rng(0)
        gen = FilmGenerator(6, rng)
        p, q = gen(T.Tensor(np.zeros((1, 6))))
        np.testing.assert_array_equal(p.data, np.zeros((1, 6)))
        np.testing.assert_array_equal(q.data, np.zeros((1, 6)))

    def test_unit_preactivation_probe(self):
        rng = np.random.default_rng(0)
        gen = FilmGenerator(4, rng)
        gen.scale_fc.weight.data[...] = 0.0
        gen.scale_fc.bias.data[...] = 1.0
        p, _ = gen(T.Tensor(np.zeros((1, 4))))
        np.testing.assert_allclose(p.data, np.tanh(1.0), rtol=1e-6)

    def test_outputs_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(1)
        gen = FilmGenerator(8, rng)
        q = T.Tensor(rng.normal(scale=3.0, size=(16, 8)))
        p, s = gen(q)
        for v in (p.data, s.data):
            assert np.all(v > -1.0) and np.all(v < 1.0)


class TestConditioning:
    def test_shape_preserved_across_scales(self):
        rng = np.random.default_rng(2)
        m = PPGNModel(TOY, vocab_size=17, seed=1)
        images = _images(rng, TOY, 2)
        q = m.text([[0, 1], [2, 3]])
        p, s = m.film(q)
        maps = m.backbone(T.Tensor(images))
        for blk, v, g in zip(m.condition, maps, TOY.scales):
            out = blk(v, p, s)
            assert out.shape == (2, g, g, TOY.channels)

    def test_phrase_changes_conditioned_features(self):
        rng = np.random.default_rng(3)
        m = PPGNModel(MINI, vocab_size=10, seed=2)
        images = _images(rng, MINI, 1)
        maps = m.backbone(T.Tensor(images))
        out = {}
        for tokens in ([1, 2], [3, 4]):
            q = m.text([tokens])
            p, s = m.film(q)
            out[tuple(tokens)] = m.condition[0](maps[0], p, s).data
        diff = np.abs(out[(1, 2)] - out[(3, 4)]).max()
        assert diff > 1e-6

    def test_conditioning_gradient_through_film_weights(self):
        rng = np.random.default_rng(4)
        with T.using_dtype(np.float64):
            m = PPGNModel(MINI, vocab_size=6, seed=3)
            images = rng.uniform(0, 1, size=(1, 16, 16, 3))
            weights = T.Tensor(rng.normal(size=(1, 2, 2, 8)))
            wp = m.film.scale_fc.weight

            def build():
                q = m.text([[1, 2]])
                p, s = m.film(q)
                maps = m.backbone(T.Tensor(images))
                return (m.condition[0](maps[0], p, s) * weights).sum()

            fd_gradcheck(build, [wp])


class TestGroundingHead:
    def test_toy_output_length(self):
        m = PPGNModel(TOY, vocab_size=17, seed=5)
        rng = np.random.default_rng(5)
        out = m.forward(_images(rng, TOY, 1), [[0]])
        assert out.shape == (1, 1008, 5)
        assert out.data.size == 5 * 1008

    def test_full_scale_output_length(self):
        cfg = ModelConfig(image_size=256, scales=(8, 16, 32), channels=512,
                          embed_dim=32)
        m = PPGNModel(cfg, vocab_size=17, seed=5)
        rng = np.random.default_rng(6)
        with T.no_grad():
            out = m.forward(_images(rng, cfg, 1), [[0]])
        assert out.shape == (1, 4032, 5)

    def test_zeroed_scale_zeroes_exactly_its_block(self):
        m = PPGNModel(TOY, vocab_size=17, seed=7)
        m.head.convs[1].weight.data[...] = 0.0
        m.head.convs[1].bias.data[...] = 0.0
        rng = np.random.default_rng(7)
        with T.no_grad():
            out = m.forward(_images(rng, TOY, 1), [[1, 2]]).data[0]
        # scales (4, 8, 16) with 3 anchors: blocks of 48, 192, 768
        block = out[48 : 48 + 192]
        assert np.all(block == 0.0)
        assert np.any(out[:48] != 0.0)
        assert np.any(out[240:] != 0.0)

    def test_forward_deterministic(self):
        m = PPGNModel(MINI, vocab_size=10, seed=8)
        rng = np.random.default_rng(8)
        images = _images(rng, MINI, 2)
        tokens = [[0, 1], [2]]
        with T.no_grad():
            a = m.forward(images, tokens).data
            b = m.forward(images, tokens).data
        np.testing.assert_array_equal(a, b)

    def test_batch_phrase_count_mismatch(self):
        m = PPGNModel(MINI, vocab_size=10, seed=8)
        rng = np.random.default_rng(9)
        with pytest.raises(Exception):
            m.forward(_images(rng, MINI, 2), [[0]])


class TestParameterNaming:
    def test_stable_dotted_names(self):
        m = PPGNModel(TOY, vocab_size=17, seed=9)
        names = set(m.named_parameters())
        for expected in [
            "text.embed",
            "text.fc1.weight",
            "film.scale_fc.weight",
            "film.shift_fc.bias",
            "backbone.stem.0.conv.weight",
            "backbone.blocks.2.bn.gamma",
            "backbone.project.0.conv.weight",
            "condition.0.f1.weight",
            "condition.2.f2_bn.beta",
            "head.convs.2.bias",
        ]:
            assert expected in names
        buffers = set(m.named_buffers())
        assert "backbone.stem.0.bn.running_mean" in buffers
        assert "condition.1.f2_bn.running_var" in buffers

    def test_state_roundtrip_preserves_forward(self):
        m = PPGNModel(MINI, vocab_size=10, seed=10)
        rng = np.random.default_rng(10)
        images = _images(rng, MINI, 1)
        m.eval()
        with T.no_grad():
            before = m.forward(images, [[1]]).data.copy()
        state = {k: v.copy() for k, v in m.state_dict().items()}
        m2 = PPGNModel(MINI, vocab_size=10, seed=99)
        m2.load_state(state)
        m2.eval()
        with T.no_grad():
            after = m2.forward(images, [[1]]).data
        np.testing.assert_array_equal(before, after)

    def test_load_state_rejects_mismatch(self):
        m = PPGNModel(MINI, vocab_size=10, seed=10)
        state = m.state_dict()
        state.pop("text.embed")
        m2 = PPGNModel(MINI, vocab_size=10, seed=11)
        with pytest.raises(InvalidInputError):
            m2.load_state(state)
