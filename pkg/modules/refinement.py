"""
Latent feature refinement.

Frozen tag-vocabulary embeddings are adapted by a trainable linear layer.
Region tokens then query the adapted tags, giving image-conditioned tagging
features, and the frozen-encoded ground-truth caption, giving
image-conditioned caption features. A two-layer cross-attention head scores
every (tagging, caption) pair and the sigmoid pair loss aligns the two spaces.

The similarity head and the loss kernel are shared with semantic alignment.
"""
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from models import ConditionedKind, PreconditionError, TagVocabulary
from modules.frozen_encoders import FrozenTextEncoder, Tokenizer
from modules.layers import Component, LayerNorm, Linear, MultiHeadCrossAttention
from modules.tensor import Parameter, Rng, ShapeError, Tensor, as_tensor, concat, exp, reshape, softplus, tsum


@dataclass
class ConditionedFeatures:
    tokens: Tensor
    kind: ConditionedKind


def build_tag_table(vocab: TagVocabulary, text_encoder: FrozenTextEncoder, tokenizer: Tokenizer) -> Parameter:
    """Pooled frozen text features of every tag, as a frozen V_tag x D_t parameter."""
    rows = [text_encoder.encode_text(tokenizer.tokenize(tag))[1].data for tag in vocab.tags]
    return Parameter("refinement.tag_table", np.stack(rows), trainable=False)


class TagAdapter(Linear):
    """Trainable D_t -> D_c affine map applied to the frozen tag table."""


def adapt_tags(table: Tensor, adapter: Linear) -> Tensor:
    if table.shape[1] != adapter.d_in:
        raise ShapeError(f"adapt_tags: table {table.shape} does not match adapter input {adapter.d_in}")
    return adapter(table)


class ImageConditioner(Component):
    """Region tokens query a context sequence; both sides are linearly projected to D_c first."""

    def __init__(self, name: str, d_img: int, d_ctx: int, d_c: int, rng: Rng):
        self.image_proj = Linear(f"{name}.image_proj", d_img, d_c, rng)
        self.context_proj = Linear(f"{name}.context_proj", d_ctx, d_c, rng)
        self.attn = MultiHeadCrossAttention(f"{name}.attn", d_c, 1, rng)

    def __call__(self, image_tokens: Tensor, context_tokens: Tensor) -> Tensor:
        if context_tokens.shape[0] == 0:
            raise PreconditionError("condition_on_image needs at least one context token")
        img = self.image_proj(image_tokens)
        ctx = self.context_proj(context_tokens)
        return img + self.attn(img, ctx, ctx)


def condition_on_image(image_tokens: Tensor, context_tokens: Tensor, conditioner: ImageConditioner,
                       kind: ConditionedKind) -> ConditionedFeatures:
    return ConditionedFeatures(conditioner(image_tokens, context_tokens), kind)


class SimilarityHead(Component):
    """Two stacked pre-norm cross-attention layers, final norm, mean-pool and projection to D_s.

    score(x, ctx) = <u(x, ctx), v(ctx)> / sqrt(D_s) where u is the pooled pair
    representation and v the projected pooled context.
    """

    def __init__(self, name: str, d_q: int, d_ctx: int, d_s: int, rng: Rng, num_layers: int = 2):
        self.d_s = d_s
        self.norms = [LayerNorm(f"{name}.layer{i}.ln", d_q) for i in range(num_layers)]
        self.layers = [MultiHeadCrossAttention(f"{name}.layer{i}.attn", d_q, 1, rng, d_kv=d_ctx)
                       for i in range(num_layers)]
        self.final_ln = LayerNorm(f"{name}.final_ln", d_q)
        self.out_proj = Linear(f"{name}.out_proj", d_q, d_s, rng)
        self.context_proj = Linear(f"{name}.context_proj", d_ctx, d_s, rng)

    def prepare_context(self, ctx: Tensor):
        """Per-context work shared by every row of the similarity matrix."""
        kv = [layer.project_kv(ctx, ctx) for layer in self.layers]
        v = self.context_proj(reshape(ctx.mean(axis=0), (1, ctx.shape[1])))
        return kv, v

    def score(self, x: Tensor, prepared) -> Tensor:
        kv, v = prepared
        for norm, layer, proj in zip(self.norms, self.layers, kv):
            x = x + layer(norm(x), None, None, projected_kv=proj)
        pooled = reshape(self.final_ln(x).mean(axis=0), (1, x.shape[1]))
        u = self.out_proj(pooled)
        return tsum(u * v) * (1.0 / math.sqrt(self.d_s))


def pairwise_similarity(queries: Sequence[Tensor], contexts: Sequence[Tensor], head: SimilarityHead) -> Tensor:
    """N x N matrix whose (i, j) entry is head.score(queries[i], contexts[j])."""
    if len(queries) != len(contexts) or not queries:
        raise PreconditionError(f"pairwise_similarity needs N >= 1 matched features, got {len(queries)} and {len(contexts)}")
    n = len(queries)
    prepared = [head.prepare_context(c) for c in contexts]
    scores = [reshape(head.score(q, prepared[j]), (1,)) for q in queries for j in range(n)]
    return reshape(concat(scores, axis=0), (n, n))


class SigmoidLossParams(Component):
    """Learnable temperature (tau = exp(tau_log), always positive) and bias."""

    def __init__(self, name: str, tau_init: float, bias_init: float):
        self.tau_log = Parameter(f"{name}.tau_log", math.log(tau_init))
        self.bias = Parameter(f"{name}.bias", float(bias_init))

    @property
    def tau(self) -> Tensor:
        return exp(self.tau_log)


def pair_labels(n: int) -> np.ndarray:
    """In-batch labels: +1 on the diagonal, -1 elsewhere."""
    return 2.0 * np.eye(n) - 1.0


def sigmoid_pair_loss(similarity: Tensor, labels: np.ndarray, params: SigmoidLossParams) -> Tensor:
    """Sum over all pairs of softplus(label * (-tau * score + bias)), divided by N; summed row-major."""
    similarity = as_tensor(similarity)
    labels = np.asarray(labels, dtype=np.float64)
    if similarity.shape != labels.shape or similarity.ndim != 2:
        raise ShapeError(f"sigmoid_pair_loss: similarity {similarity.shape} and labels {labels.shape} must be equal N x N")
    logits = Tensor(labels) * (params.bias - params.tau * similarity)
    return softplus(logits).sum() * (1.0 / similarity.shape[0])


class LatentFeatureRefinement(Component):
    def __init__(self, tag_table: Parameter, d_v: int, d_t: int, d_c: int, d_s: int,
                 tau_init: float, bias_init: float, rng: Rng):
        self.tag_table = tag_table
        self.adapter = TagAdapter("refinement.adapter", d_t, d_c, rng)
        self.tag_conditioner = ImageConditioner("refinement.tag_conditioner", d_v, d_c, d_c, rng)
        self.caption_conditioner = ImageConditioner("refinement.caption_conditioner", d_v, d_t, d_c, rng)
        self.head = SimilarityHead("refinement.head", d_c, d_c, d_s, rng)
        self.loss_params = SigmoidLossParams("refinement.sigmoid", tau_init, bias_init)

    def tagging_features(self, image_tokens: Tensor) -> ConditionedFeatures:
        tags = adapt_tags(self.tag_table, self.adapter)
        return condition_on_image(image_tokens, tags, self.tag_conditioner, ConditionedKind.TAGGING)

    def caption_features(self, image_tokens: Tensor, caption_tokens: Tensor) -> ConditionedFeatures:
        return condition_on_image(image_tokens, caption_tokens, self.caption_conditioner, ConditionedKind.CAPTION)

    def similarity(self, tagging: Sequence[ConditionedFeatures], captions: Sequence[ConditionedFeatures]) -> Tensor:
        return pairwise_similarity([t.tokens for t in tagging], [c.tokens for c in captions], self.head)

    def loss(self, tagging: Sequence[ConditionedFeatures], captions: Sequence[ConditionedFeatures]) -> Tensor:
        s = self.similarity(tagging, captions)
        return sigmoid_pair_loss(s, pair_labels(len(tagging)), self.loss_params)


def l_cond(image_tokens: Sequence[Tensor], captions: Sequence[str], refinement: LatentFeatureRefinement,
           text_encoder: FrozenTextEncoder, tokenizer: Tokenizer) -> Tuple[Tensor, List[ConditionedFeatures]]:
    """Alignment loss over a batch, plus the tagging features the tagging head consumes."""
    if len(image_tokens) != len(captions) or not captions:
        raise PreconditionError(f"l_cond needs matching non-empty batches, got {len(image_tokens)} and {len(captions)}")
    tagging = [refinement.tagging_features(x) for x in image_tokens]
    caption = [refinement.caption_features(x, text_encoder.encode_text(tokenizer.tokenize(c))[0])
               for x, c in zip(image_tokens, captions)]
    return refinement.loss(tagging, caption), tagging
