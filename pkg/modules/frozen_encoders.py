"""
Seeded stand-ins for the frozen pretrained components.

FrozenVisionEncoder plays the ViT, FrozenTextEncoder the CLIP text tower and
LLMStub the language model (tokenizer, embedding table and a one-block causal
decoder). All of their parameters are created with trainable=False, so the
optimizer never sees them, while gradients still flow through them to any
trainable input.
"""
import logging
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from models import AlignCapError, BBox, PreconditionError, SceneInput
from modules.layers import Component, LayerNorm, Linear, MultiHeadCrossAttention
from modules.tensor import (Parameter, Rng, ShapeError, Tensor, as_tensor, concat, silu, take_rows,
                            tanh, reshape)

logger = logging.getLogger("aligncap")

UNK, BOS, EOS = "<unk>", "<bos>", "<eos>"
RESERVED_TOKENS = (UNK, BOS, EOS)
UNK_ID, BOS_ID, EOS_ID = 0, 1, 2
MASK_VALUE = -1e9


class TokenizationError(AlignCapError):
    pass


def crop(scene: SceneInput, box: BBox) -> Tuple[SceneInput, BBox]:
    """Snaps `box` outward to patch boundaries and re-rasterizes that window to G x G.

    Returns the cropped scene and the snapped window in normalized coordinates.
    """
    g = scene.grid_size
    c0, c1 = int(math.floor(box.x0 * g)), int(math.ceil(box.x1 * g))
    r0, r1 = int(math.floor(box.y0 * g)), int(math.ceil(box.y1 * g))
    c1, r1 = max(c1, c0 + 1), max(r1, r0 + 1)
    rows = r0 + (np.arange(g) * (r1 - r0)) // g
    cols = c0 + (np.arange(g) * (c1 - c0)) // g
    grid = scene.grid[np.ix_(rows, cols)]
    window = BBox(c0 / g, r0 / g, c1 / g, r1 / g)
    return SceneInput(grid, provenance=f"{scene.provenance}#crop"), window


def relative_box(box: BBox, window: BBox) -> BBox:
    """Expresses `box` in the normalized frame of `window` (which must contain it)."""
    w, h = window.x1 - window.x0, window.y1 - window.y0
    clip = lambda v: min(max(v, 0.0), 1.0)
    return BBox(clip((box.x0 - window.x0) / w), clip((box.y0 - window.y0) / h),
                clip((box.x1 - window.x0) / w), clip((box.y1 - window.y0) / h))


class FrozenVisionEncoder(Component):
    """Per-patch two-layer network plus a frozen positional table."""

    def __init__(self, grid_size: int, channels: int, d_v: int, seed: int):
        self.grid_size, self.channels, self.d_v, self.seed = grid_size, channels, d_v, seed
        rng = Rng(seed).child("vision")
        hidden = max(d_v, 2 * channels)
        self.fc1 = Linear("vision.fc1", channels, hidden, rng, trainable=False)
        self.fc2 = Linear("vision.fc2", hidden, d_v, rng, trainable=False)
        self.position = Parameter("vision.position",
                                  0.1 * rng.child("position").normal(size=(grid_size * grid_size, d_v)),
                                  trainable=False)

    def encode_image(self, scene: Union[SceneInput, Tensor]) -> Tensor:
        """Returns a G x G x D_v feature map."""
        x = as_tensor(scene.grid) if isinstance(scene, SceneInput) else as_tensor(scene)
        expected = (self.grid_size, self.grid_size, self.channels)
        if x.shape != expected:
            raise ShapeError(f"encode_image: scene shape {x.shape} does not match encoder {expected}")
        patches = reshape(x, (self.grid_size * self.grid_size, self.channels))
        features = self.fc2(tanh(self.fc1(patches))) + self.position
        return reshape(features, (self.grid_size, self.grid_size, self.d_v))


class Tokenizer:
    """Lowercased whitespace tokenizer over a fixed word list."""

    def __init__(self, words: Sequence[str]):
        words = [w.strip().lower() for w in words if w.strip()]
        if len(set(words)) != len(words):
            raise TokenizationError("Vocabulary contains duplicate words")
        if any(w in RESERVED_TOKENS for w in words):
            raise TokenizationError("Vocabulary must not repeat reserved tokens")
        self.words = list(RESERVED_TOKENS) + words
        self._ids = {w: i for i, w in enumerate(self.words)}

    @property
    def vocab_size(self) -> int:
        return len(self.words)

    def tokenize(self, text: str) -> List[int]:
        body = [self._ids.get(w, UNK_ID) for w in text.lower().split()]
        return [BOS_ID] + body + [EOS_ID]

    def detokenize(self, ids: Sequence[int]) -> str:
        self.check_ids(ids)
        return " ".join(self.words[i] for i in ids if i not in (BOS_ID, EOS_ID))

    def check_ids(self, ids: Sequence[int]):
        for i in ids:
            if not (0 <= int(i) < self.vocab_size):
                raise TokenizationError(f"Token id {i} outside vocabulary of size {self.vocab_size}")

    def __contains__(self, word: str) -> bool:
        return word.lower() in self._ids


class FrozenTextEncoder(Component):
    def __init__(self, vocab_size: int, d_t: int, seed: int):
        self.vocab_size, self.d_t, self.seed = vocab_size, d_t, seed
        rng = Rng(seed).child("text")
        self.embedding = Parameter("text.embedding", rng.child("embedding").normal(size=(vocab_size, d_t)),
                                   trainable=False)
        self.transform = Linear("text.transform", d_t, d_t, rng, trainable=False)

    def encode_text(self, tokens: Sequence[int]) -> Tuple[Tensor, Tensor]:
        """Returns (per-token L x D_t, pooled D_t) features."""
        if len(tokens) == 0:
            raise PreconditionError("encode_text needs at least one token")
        for i in tokens:
            if not (0 <= int(i) < self.vocab_size):
                raise TokenizationError(f"Token id {i} outside vocabulary of size {self.vocab_size}")
        per_token = tanh(self.transform(take_rows(self.embedding, tokens)))
        return per_token, per_token.mean(axis=0)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = 1.0 / (10000.0 ** (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return table


class LLMStub(Component):
    """Tokenizer, frozen embedding table and a single causal self-attention block."""

    def __init__(self, tokenizer: Tokenizer, d_llm: int, seed: int):
        self.tokenizer = tokenizer
        self.d_llm, self.seed = d_llm, seed
        v = tokenizer.vocab_size
        rng = Rng(seed).child("llm")
        self.embedding = Parameter("llm.embedding", rng.child("embedding").normal(size=(v, d_llm)),
                                   trainable=False)
        self.ln1 = LayerNorm("llm.decoder.ln1", d_llm, trainable=False)
        self.attn = MultiHeadCrossAttention("llm.decoder.attn", d_llm, 1, rng, trainable=False)
        self.ln2 = LayerNorm("llm.decoder.ln2", d_llm, trainable=False)
        self.mlp_in = Linear("llm.decoder.mlp_in", d_llm, 2 * d_llm, rng, trainable=False)
        self.mlp_out = Linear("llm.decoder.mlp_out", 2 * d_llm, d_llm, rng, trainable=False)
        self.ln_f = LayerNorm("llm.decoder.ln_f", d_llm, trainable=False)
        self.head = Linear("llm.head", d_llm, v, rng, trainable=False)

    @property
    def vocab_size(self) -> int:
        return self.tokenizer.vocab_size

    def tokenize(self, text: str) -> List[int]:
        return self.tokenizer.tokenize(text)

    def embed_tokens(self, ids: Sequence[int]) -> Tensor:
        self.tokenizer.check_ids(ids)
        return take_rows(self.embedding, ids)

    def decode_logits(self, prefix: Optional[Tensor], target_ids: Sequence[int]) -> Tensor:
        """Causal logits (T x V) at each target position, conditioned on the prefix rows."""
        if len(target_ids) == 0:
            return Tensor(np.zeros((0, self.vocab_size)))
        parts = []
        if prefix is not None and prefix.shape[0] > 0:
            if prefix.ndim != 2 or prefix.shape[1] != self.d_llm:
                raise ShapeError(f"decode_logits: prefix shape {prefix.shape} does not match D_llm={self.d_llm}")
            parts.append(prefix)
        m = parts[0].shape[0] if parts else 0
        parts.append(self.embed_tokens(target_ids))
        n = m + len(target_ids)
        x = concat(parts, axis=0) + Tensor(sinusoidal_positions(n, self.d_llm))
        mask = np.triu(np.full((n, n), MASK_VALUE), k=1)
        h = self.ln1(x)
        x = x + self.attn(h, h, h, mask=mask)
        x = x + self.mlp_out(silu(self.mlp_in(self.ln2(x))))
        return self.head(self.ln_f(x[m:]))

    def generate(self, prefix: Optional[Tensor], max_tokens: int = 20) -> List[int]:
        """Greedy decoding; stops at <eos> or after max_tokens."""
        ids = [BOS_ID]
        banned = np.zeros(self.vocab_size)
        banned[[UNK_ID, BOS_ID]] = -np.inf
        for _ in range(max_tokens):
            logits = self.decode_logits(prefix, ids).data[-1] + banned
            nxt = int(np.argmax(logits))
            if nxt == EOS_ID:
                break
            ids.append(nxt)
        return ids[1:]
