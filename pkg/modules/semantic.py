"""
Semantic space alignment: latent queries and LLM-embedded tags are fused into
one projected sequence and aligned against the frozen LLM embedding of the
ground-truth caption with the same sigmoid pair loss used for latent refinement.
"""
from typing import Sequence

import numpy as np

from modules.frozen_encoders import LLMStub
from modules.layers import Component, Linear
from modules.refinement import SigmoidLossParams, SimilarityHead, pair_labels, pairwise_similarity, sigmoid_pair_loss
from modules.spatial import LatentQuery
from modules.tensor import Rng, ShapeError, Tensor, concat


UnifiedEmbedding = Tensor      # (M + L_tag) x D_llm
CaptionLLMEmbedding = Tensor   # T x D_llm


def embed_tags_llm(selected_tags: Sequence[str], llm: LLMStub) -> Tensor:
    """Frozen LLM embeddings of the tokenized tag string, <bos> and <eos> included.

    An empty selection gives a 0 x D_llm tensor.
    """
    if not selected_tags:
        return Tensor(np.zeros((0, llm.d_llm)))
    return llm.embed_tokens(llm.tokenize(" ".join(selected_tags)))


def embed_caption_llm(caption: str, llm: LLMStub) -> CaptionLLMEmbedding:
    return llm.embed_tokens(llm.tokenize(caption))


def fuse_multimodal(queries: LatentQuery, tag_emb: Tensor, proj: Linear) -> UnifiedEmbedding:
    if queries.ndim != 2 or tag_emb.ndim != 2 or queries.shape[1] != tag_emb.shape[1]:
        raise ShapeError(f"fuse_multimodal: queries {queries.shape} and tag embeddings {tag_emb.shape} must share D_llm")
    if queries.shape[1] != proj.d_in:
        raise ShapeError(f"fuse_multimodal: projection expects width {proj.d_in}, got {queries.shape[1]}")
    return proj(concat([queries, tag_emb], axis=0))


class SemanticSpaceAlignment(Component):
    def __init__(self, d_llm: int, d_s: int, tau_init: float, bias_init: float, rng: Rng):
        self.fuse_proj = Linear("semantic.fuse_proj", d_llm, d_llm, rng)
        self.head = SimilarityHead("semantic.head", d_llm, d_llm, d_s, rng)
        self.loss_params = SigmoidLossParams("semantic.sigmoid", tau_init, bias_init)

    def unified(self, queries: LatentQuery, tags: Sequence[str], llm: LLMStub) -> UnifiedEmbedding:
        return fuse_multimodal(queries, embed_tags_llm(tags, llm), self.fuse_proj)

    def loss(self, unified: Sequence[UnifiedEmbedding], captions: Sequence[CaptionLLMEmbedding]) -> Tensor:
        return l_multi(unified, captions, self.head, self.loss_params)


def l_multi(unified: Sequence[UnifiedEmbedding], captions: Sequence[CaptionLLMEmbedding], head: SimilarityHead,
            params: SigmoidLossParams) -> Tensor:
    s = pairwise_similarity(unified, captions, head)
    return sigmoid_pair_loss(s, pair_labels(len(unified)), params)
