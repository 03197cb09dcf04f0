"""
The assembled model: frozen encoders, GOD views, spatial awareness, latent
refinement, semantic alignment and the tagging head, with one forward pass
producing the four loss components and their weighted total.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import BBox, CandidateView, ConfigError, SceneInput, SyntheticExample, TagVocabulary, TrainingConfig
from modules.frozen_encoders import FrozenTextEncoder, FrozenVisionEncoder, LLMStub, Tokenizer, crop, relative_box
from modules.god import TARGET_SOURCE, build_candidates, select_inference_view
from modules.layers import Component, Linear
from modules.losses import captioning_loss, tagging_loss, total_loss
from modules.refinement import LatentFeatureRefinement, build_tag_table, l_cond
from modules.semantic import SemanticSpaceAlignment, embed_caption_llm, embed_tags_llm, fuse_multimodal
from modules.spatial import LatentQueryAligner, SpatialBlock, fuse_views, roi_align
from modules.synthetic import build_tag_vocabulary, build_word_list, tags_of
from modules.tensor import Parameter, Rng, Tensor, reshape
from persistence import load_tag_vocabulary, load_vocabulary

logger = logging.getLogger("aligncap")

# Parameter-name prefix -> owning module, as reported by the gradient audit.
MODULE_PREFIXES = (
    ("spatial.", "spatial-awareness"),
    ("refinement.", "latent-refinement"),
    ("semantic.", "semantic-alignment"),
    ("tagging.", "losses-training"),
    ("vision.", "frozen-encoders"),
    ("text.", "frozen-encoders"),
    ("llm.", "frozen-encoders"),
)


def module_of(param_name: str) -> str:
    for prefix, module in MODULE_PREFIXES:
        if param_name.startswith(prefix):
            return module
    return "unknown"


@dataclass
class ForwardResult:
    l_tag: Tensor
    l_cap: Tensor
    l_cond: Tensor
    l_multi: Tensor
    total: Tensor
    tag_logits: List[np.ndarray]

    def components(self) -> Tuple[float, float, float, float, float]:
        return (self.l_tag.item(), self.l_cap.item(), self.l_cond.item(), self.l_multi.item(), self.total.item())


class AlignCapModel(Component):
    """Every Parameter of the system, frozen and trainable, under unique names."""

    def __init__(self, config: TrainingConfig, tag_vocab: Optional[TagVocabulary] = None,
                 words: Optional[Sequence[str]] = None):
        self.config = config
        seed = config.seed
        if tag_vocab is None:
            tag_vocab = (load_tag_vocabulary(config.tag_vocab_file) if config.tag_vocab_file
                         else build_tag_vocabulary(config.num_tags_per_subclass))
        self.tag_vocab = tag_vocab
        if words is None and config.vocab_file:
            words = load_vocabulary(config.vocab_file)
        self.tokenizer = Tokenizer(words if words is not None else build_word_list(config.vocab_size, self.tag_vocab))
        if self.tokenizer.vocab_size != config.vocab_size:
            raise ConfigError(f"vocab_size is {config.vocab_size} but the word list gives "
                              f"{self.tokenizer.vocab_size} ids (reserved tokens included)")

        self.vision = FrozenVisionEncoder(config.grid_size, config.channels, config.d_v, seed)
        self.text_encoder = FrozenTextEncoder(self.tokenizer.vocab_size, config.d_t, seed)
        self.llm = LLMStub(self.tokenizer, config.d_llm, seed)

        rng = Rng(seed).child("init")
        self.spatial_block = SpatialBlock("spatial.block", config.d_v, config.num_heads, config.mlp_hidden,
                                          config.dropout_p, rng)
        self.aligner = LatentQueryAligner("spatial.aligner", config.d_v, config.d_llm, config.num_queries,
                                          config.num_heads, rng)
        tag_table = build_tag_table(self.tag_vocab, self.text_encoder, self.tokenizer)
        self.refinement = LatentFeatureRefinement(tag_table, config.d_v, config.d_t, config.d_c, config.d_s,
                                                  config.tau_init, config.bias_init, rng)
        self.tag_head = Linear("tagging.head", config.d_c, len(self.tag_vocab), rng)
        self.semantic = SemanticSpaceAlignment(config.d_llm, config.d_s, config.tau_init, config.bias_init, rng)

        names = [p.name for p in self.parameters()]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ConfigError(f"Duplicate parameter names: {duplicates}")
        logger.info(f"AlignCapModel built: {len(self.trainable_parameters())} trainable and "
                    f"{len(self.frozen_parameters())} frozen parameter tensors")

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    # --- per-example pipeline ---------------------------------------------

    def views_for(self, example: SyntheticExample, rng: Rng, training: bool) -> List[CandidateView]:
        """GOD views with the target first: j sampled views in training, [target, selected] otherwise."""
        god = self.config.god
        target = CandidateView(example.target, TARGET_SOURCE, is_target=True)
        if not god.enabled:
            return [target]
        candidates = build_candidates(example.target, example.detections, god, rng.child("god"))
        if training:
            return candidates
        selected = select_inference_view(candidates[1:], example.target, example.scene, self.vision,
                                         god.discrepancy_mode)
        return [target, selected]

    def region_features(self, scene: SceneInput, box: BBox) -> Tensor:
        view, window = crop(scene, box)
        fm = self.vision.encode_image(view)
        return roi_align(fm, relative_box(box, window), self.config.roi_size, self.config.sampling_ratio)

    def encode_region(self, example: SyntheticExample, rng: Rng, training: bool) -> Tuple[Tensor, Tensor]:
        """Fused region tokens (P*P x D_v) and latent queries (M x D_llm) for one example."""
        views = self.views_for(example, rng, training)
        regions = [self.region_features(example.scene, v.bbox) for v in views]
        fused = fuse_views(regions, self.spatial_block, rng.child("fuse"), training)
        return fused, self.aligner(fused)

    def tag_logits(self, tagging_tokens: Tensor) -> Tensor:
        pooled = reshape(tagging_tokens.mean(axis=0), (1, tagging_tokens.shape[1]))
        return reshape(self.tag_head(pooled), (len(self.tag_vocab),))

    # --- training objective -------------------------------------------------

    def forward(self, batch: Sequence[SyntheticExample], rng: Rng, training: bool) -> ForwardResult:
        if not batch:
            raise ConfigError("forward needs a batch of at least one example")
        fused, queries = [], []
        for i, example in enumerate(batch):
            f, q = self.encode_region(example, rng.child("example", i), training)
            fused.append(f)
            queries.append(q)

        captions = [ex.gt_caption for ex in batch]
        cond, tagging = l_cond(fused, captions, self.refinement, self.text_encoder, self.tokenizer)

        logits = [self.tag_logits(t.tokens) for t in tagging]
        tag_terms = [tagging_loss(lg, ex.gt_tags) for lg, ex in zip(logits, batch)]
        l_tag = _batch_mean(tag_terms)

        unified = [fuse_multimodal(q, embed_tags_llm(tags_of(ex, self.tag_vocab), self.llm), self.semantic.fuse_proj)
                   for q, ex in zip(queries, batch)]
        caption_emb = [embed_caption_llm(c, self.llm) for c in captions]
        multi = self.semantic.loss(unified, caption_emb)

        cap_terms = [captioning_loss(u, self.tokenizer.tokenize(c), self.llm) for u, c in zip(unified, captions)]
        l_cap = _batch_mean(cap_terms)

        total = total_loss(l_tag, l_cap, cond, multi, self.config.loss_weights)
        return ForwardResult(l_tag, l_cap, cond, multi, total, [lg.data.copy() for lg in logits])

    # --- inference ------------------------------------------------------------

    def predict_tags(self, fused: Tensor, k: int) -> List[str]:
        """Top-k tags by tagging-head logit; ties keep vocabulary order."""
        logits = self.tag_logits(self.refinement.tagging_features(fused).tokens).data
        order = np.argsort(-logits, kind="stable")[:k]
        return [self.tag_vocab.tags[i] for i in order]

    def caption(self, scene: SceneInput, target: BBox, detections, rng: Rng, max_tokens: int = 20):
        """Greedy caption and top-k tags for one region, in eval mode."""
        example = SyntheticExample(scene, target, list(detections), np.ones(len(self.tag_vocab)), "inference")
        fused, queries = self.encode_region(example, rng, training=False)
        tags = self.predict_tags(fused, self.config.top_k_tags)
        prefix = fuse_multimodal(queries, embed_tags_llm(tags, self.llm), self.semantic.fuse_proj)
        ids = self.llm.generate(prefix, max_tokens=max_tokens)
        return self.tokenizer.detokenize(ids), ids, tags


def _batch_mean(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))
