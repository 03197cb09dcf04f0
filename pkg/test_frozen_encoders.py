import numpy as np
import pytest

from models import FULL_IMAGE, BBox, PreconditionError, SceneInput
from modules.frozen_encoders import (BOS_ID, EOS_ID, UNK_ID, FrozenTextEncoder, FrozenVisionEncoder, LLMStub,
                                     TokenizationError, Tokenizer, crop, relative_box)
from modules.layers import Linear
from modules.tensor import Rng, ShapeError, Tensor, backward, reshape

WORDS = ["a", "dog", "cat", "runs", "in", "the", "park"]


@pytest.fixture
def tokenizer():
    return Tokenizer(WORDS)


@pytest.fixture
def scene():
    return SceneInput(Rng(1).normal(size=(4, 4, 3)))


@pytest.fixture
def vision():
    return FrozenVisionEncoder(4, 3, 8, seed=0)


@pytest.fixture
def llm(tokenizer):
    return LLMStub(tokenizer, 8, seed=0)


class TestVisionEncoder:
    def test_deterministic(self, vision, scene):
        np.testing.assert_array_equal(vision.encode_image(scene).data, vision.encode_image(scene).data)
        again = FrozenVisionEncoder(4, 3, 8, seed=0)
        np.testing.assert_array_equal(vision.encode_image(scene).data, again.encode_image(scene).data)

    def test_output_shape(self, vision, scene):
        assert vision.encode_image(scene).shape == (4, 4, 8)

    def test_one_patch_changes_output(self, vision, scene):
        changed = scene.grid.copy()
        changed[2, 1, :] += 1.0
        assert not np.array_equal(vision.encode_image(scene).data,
                                  vision.encode_image(SceneInput(changed)).data)

    def test_dimension_mismatch(self, vision):
        with pytest.raises(ShapeError):
            vision.encode_image(SceneInput(np.zeros((5, 5, 3))))

    def test_all_parameters_frozen(self, vision):
        assert vision.parameters()
        assert not vision.trainable_parameters()

    def test_gradient_passes_through(self, vision):
        probe = Linear("probe", 3, 3, Rng(2))
        raw = Tensor(Rng(3).normal(size=(16, 3)))
        out = vision.encode_image(reshape(probe(raw), (4, 4, 3)))
        backward((out * Tensor(Rng(4).normal(size=out.shape))).sum())
        assert np.abs(probe.weight.grad).max() > 0
        assert all(p.grad is None for p in vision.parameters())


class TestTextEncoder:
    def test_single_token_pool(self, tokenizer):
        enc = FrozenTextEncoder(tokenizer.vocab_size, 6, seed=0)
        per_token, pooled = enc.encode_text([4])
        np.testing.assert_array_equal(pooled.data, per_token.data[0])

    def test_pooled_is_mean(self, tokenizer):
        enc = FrozenTextEncoder(tokenizer.vocab_size, 6, seed=0)
        per_token, pooled = enc.encode_text(tokenizer.tokenize("a dog")[1:-1])
        np.testing.assert_allclose(pooled.data, (per_token.data[0] + per_token.data[1]) / 2, atol=1e-12)

    def test_deterministic(self, tokenizer):
        enc = FrozenTextEncoder(tokenizer.vocab_size, 6, seed=0)
        ids = tokenizer.tokenize("the cat")
        np.testing.assert_array_equal(enc.encode_text(ids)[0].data, enc.encode_text(ids)[0].data)

    def test_bad_ids(self, tokenizer):
        enc = FrozenTextEncoder(tokenizer.vocab_size, 6, seed=0)
        with pytest.raises(TokenizationError):
            enc.encode_text([tokenizer.vocab_size])
        with pytest.raises(PreconditionError):
            enc.encode_text([])


class TestTokenizer:
    def test_empty_text(self, tokenizer):
        assert tokenizer.tokenize("") == [BOS_ID, EOS_ID]

    def test_case_normalization(self, tokenizer):
        assert tokenizer.tokenize("A Dog") == tokenizer.tokenize("a dog")

    def test_unknown_word(self, tokenizer):
        ids = tokenizer.tokenize("a qwxyz dog")
        assert len(ids) == 5
        assert ids[2] == UNK_ID

    def test_round_trip(self, tokenizer):
        assert tokenizer.detokenize(tokenizer.tokenize("A dog  runs in the PARK")) == "a dog runs in the park"

    def test_vocab_size_counts_reserved_tokens(self, tokenizer):
        assert tokenizer.vocab_size == len(WORDS) + 3

    @pytest.mark.parametrize("words", [["dog", "Dog"], ["<eos>", "dog"]])
    def test_invalid_word_lists(self, words):
        with pytest.raises(TokenizationError):
            Tokenizer(words)


class TestLLMStub:
    def test_all_parameters_frozen(self, llm):
        assert not llm.trainable_parameters()

    def test_logits_shape(self, llm, tokenizer):
        prefix = Tensor(Rng(5).normal(size=(2, 8)))
        assert llm.decode_logits(prefix, tokenizer.tokenize("a dog")).shape == (4, tokenizer.vocab_size)

    def test_prefix_order_matters(self, llm, tokenizer):
        prefix = Rng(6).normal(size=(3, 8))
        ids = tokenizer.tokenize("a cat")
        assert not np.allclose(llm.decode_logits(Tensor(prefix), ids).data,
                               llm.decode_logits(Tensor(prefix[[2, 0, 1]]), ids).data)

    def test_empty_prefix_is_unconditional(self, llm, tokenizer):
        ids = tokenizer.tokenize("the park")
        np.testing.assert_array_equal(llm.decode_logits(Tensor(np.zeros((0, 8))), ids).data,
                                      llm.decode_logits(None, ids).data)

    def test_empty_target(self, llm, tokenizer):
        assert llm.decode_logits(None, []).shape == (0, tokenizer.vocab_size)

    def test_prefix_width_mismatch(self, llm):
        with pytest.raises(ShapeError):
            llm.decode_logits(Tensor(np.zeros((2, 5))), [BOS_ID])

    def test_gradient_reaches_prefix(self, llm, tokenizer):
        prefix = Tensor(Rng(7).normal(size=(2, 8)), requires_grad=True)
        logits = llm.decode_logits(prefix, tokenizer.tokenize("a dog"))
        backward((logits * Tensor(Rng(8).normal(size=logits.shape))).sum())
        assert np.abs(prefix.grad).max() > 0

    def test_embed_tokens_is_lookup(self, llm, tokenizer):
        ids = tokenizer.tokenize("dog")
        np.testing.assert_array_equal(llm.embed_tokens(ids).data, llm.embedding.data[ids])
        with pytest.raises(TokenizationError):
            llm.embed_tokens([tokenizer.vocab_size + 1])

    def test_generate_stays_in_vocabulary(self, llm, tokenizer):
        prefix = Tensor(Rng(9).normal(size=(2, 8)))
        ids = llm.generate(prefix, max_tokens=20)
        assert len(ids) <= 20
        assert all(0 <= i < tokenizer.vocab_size and i not in (UNK_ID, BOS_ID, EOS_ID) for i in ids)
        assert ids == llm.generate(prefix, max_tokens=20)


class TestCrop:
    def test_full_image(self, scene):
        view, window = crop(scene, FULL_IMAGE)
        np.testing.assert_array_equal(view.grid, scene.grid)
        assert window == FULL_IMAGE

    def test_single_cell_is_replicated(self, scene):
        view, window = crop(scene, BBox(0.3, 0.3, 0.45, 0.45))
        assert window == BBox(0.25, 0.25, 0.5, 0.5)
        assert np.all(view.grid == scene.grid[1, 1])

    def test_relative_box(self):
        rel = relative_box(BBox(0.3, 0.3, 0.5, 0.5), BBox(0.25, 0.25, 0.75, 0.75))
        assert rel.to_list() == pytest.approx([0.1, 0.1, 0.5, 0.5])
