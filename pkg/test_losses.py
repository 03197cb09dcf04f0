import math

import numpy as np
import pytest

from models import ConfigError, LossWeights, PreconditionError
from modules.frozen_encoders import LLMStub, Tokenizer
from modules.losses import TrainingDivergenceError, captioning_loss, tagging_loss, total_loss
from modules.tensor import Rng, ShapeError, Tensor, backward

WORDS = ["a", "red", "dog", "running", "in", "the", "park"]


@pytest.fixture
def llm():
    return LLMStub(Tokenizer(WORDS), 6, seed=5)


class _FixedLogits:
    """Decoder double returning preset logits."""

    def __init__(self, logits: np.ndarray):
        self.logits = logits

    def decode_logits(self, prefix, target_ids):
        assert len(target_ids) == self.logits.shape[0]
        return Tensor(self.logits)


class TestTaggingLoss:
    def test_zero_logits(self):
        labels = np.array([1.0, 0.0, 0.0, 1.0, 0.0])
        assert tagging_loss(Tensor(np.zeros(5)), labels).item() == pytest.approx(math.log(2.0), abs=1e-15)

    def test_saturated_correct(self):
        labels = np.array([1.0, 0.0, 1.0, 0.0])
        logits = np.where(labels == 1.0, 20.0, -20.0)
        assert tagging_loss(Tensor(logits), labels).item() <= 1e-8

    def test_matches_elementwise_bce(self):
        rng = Rng(1)
        logits = rng.normal(size=12)
        labels = (rng.uniform(size=12) < 0.3).astype(float)
        p = 1.0 / (1.0 + np.exp(-logits))
        expected = -np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p))
        assert abs(tagging_loss(Tensor(logits), labels).item() - expected) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tagging_loss(Tensor(np.zeros(3)), np.zeros(4))


class TestCaptioningLoss:
    def test_uniform_decoder(self, llm):
        llm.head.weight.data = np.zeros_like(llm.head.weight.data)
        ids = llm.tokenize("a red dog running")
        loss = captioning_loss(Tensor(Rng(2).normal(size=(3, 6))), ids, llm).item()
        assert loss == pytest.approx(math.log(llm.vocab_size), abs=1e-12)

    def test_saturated_decoder(self, llm):
        ids = llm.tokenize("a red dog")
        logits = np.zeros((len(ids) - 1, llm.vocab_size))
        logits[np.arange(len(ids) - 1), ids[1:]] = 30.0
        assert captioning_loss(None, ids, _FixedLogits(logits)).item() <= 1e-8

    def test_matches_log_softmax_gather(self, llm):
        prefix = Tensor(Rng(3).normal(size=(2, 6)))
        ids = llm.tokenize("a dog in the park")
        logits = llm.decode_logits(prefix, ids[:-1]).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expected = -np.mean([log_probs[t, ids[t + 1]] for t in range(len(ids) - 1)])
        assert abs(captioning_loss(prefix, ids, llm).item() - expected) <= 1e-10

    def test_gradient_reaches_prefix(self, llm):
        prefix = Tensor(Rng(4).normal(size=(2, 6)), requires_grad=True)
        backward(captioning_loss(prefix, llm.tokenize("a red dog"), llm))
        assert np.abs(prefix.grad).max() > 0

    def test_empty_caption(self, llm):
        with pytest.raises(PreconditionError):
            captioning_loss(None, llm.tokenize(""), llm)


class TestTotalLoss:
    def test_all_weights_zero(self):
        assert total_loss(0.3, 1.2, 0.7, 2.5, LossWeights(0.0, 0.0, 0.0, 0.0)) == 0.0

    def test_selector(self):
        assert total_loss(0.3, 1.2, 0.7, 2.5, LossWeights(1.0, 0.0, 0.0, 0.0)) == 0.3

    def test_unit_weights(self):
        assert total_loss(0.5, 1.0, 0.25, 0.25, LossWeights()) == 2.0

    def test_random_weighted_sums(self):
        rng = Rng(5)
        for _ in range(100):
            parts = rng.uniform(0.0, 5.0, size=4)
            w = rng.uniform(0.0, 2.0, size=4)
            expected = w[0] * parts[0] + w[1] * parts[1] + w[2] * parts[2] + w[3] * parts[3]
            got = total_loss(*[float(x) for x in parts], LossWeights(*[float(x) for x in w]))
            assert abs(got - expected) <= 1e-12

    def test_scaling_components_scales_the_total(self):
        rng = Rng(11)
        for _ in range(100):
            parts = [float(x) for x in rng.uniform(0.0, 5.0, size=4)]
            w = LossWeights(*[float(x) for x in rng.uniform(0.0, 2.0, size=4)])
            k = float(rng.uniform(0.0, 10.0))
            scaled = total_loss(*[k * p for p in parts], w)
            assert scaled == pytest.approx(k * total_loss(*parts, w), rel=1e-12, abs=1e-12)

    def test_tensor_components_stay_differentiable(self):
        a = Tensor(np.array(0.5), requires_grad=True)
        total = total_loss(a, Tensor(np.array(1.0)), 0.25, 0.25, LossWeights(alpha=3.0))
        backward(total)
        assert total.item() == pytest.approx(3.0)
        assert a.grad == pytest.approx(3.0)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_divergence(self, bad):
        with pytest.raises(TrainingDivergenceError) as info:
            total_loss(0.1, 0.2, bad, 0.4, LossWeights())
        assert info.value.component == "l_cond"

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(alpha=-1.0)
