"""
Seeded synthetic region-captioning data.

Every tag owns a fixed code vector over the scene channels. An example picks
one tag per subclass, writes the sum of their codes into the grid cells under
the target box (plus background noise), and captions the region with the
template "a <attribute> <entity> <action> in the <scene>". The tags are thus
recoverable from the target region, which makes the alignment losses
learnable at desk scale.
"""
import logging
from typing import Dict, List

import numpy as np

from models import (BBox, ConfigError, Detection, PreconditionError, SceneInput, SyntheticExample, TagSubclass,
                    TagVocabulary)
from modules.frozen_encoders import RESERVED_TOKENS, Tokenizer
from modules.tensor import Rng

logger = logging.getLogger("aligncap")

BUILTIN_TAGS: Dict[TagSubclass, List[str]] = {
    TagSubclass.ENTITY: ["dog", "cat", "person", "horse", "bird", "car", "bus", "boat",
                         "chair", "table", "tree", "kite", "ball", "bench", "cow", "sheep"],
    TagSubclass.ATTRIBUTE: ["red", "blue", "green", "small", "large", "white", "black", "brown",
                            "striped", "wooden", "shiny", "old", "young", "tall", "round", "yellow"],
    TagSubclass.ACTION: ["running", "sitting", "standing", "jumping", "flying", "eating", "sleeping", "walking",
                         "swimming", "parked", "playing", "resting", "riding", "grazing", "waiting", "climbing"],
    TagSubclass.SCENE: ["park", "street", "beach", "kitchen", "field", "river", "road", "garden",
                        "room", "forest", "market", "harbor", "yard", "stadium", "station", "farm"],
}

TEMPLATE_WORDS = ("a", "in", "the")
DETECTION_CLASSES = ("person", "dog", "car", "chair", "bird", "bottle", "cup", "mouse")
NOISE_SCALE = 0.1


def build_tag_vocabulary(num_tags_per_subclass: int) -> TagVocabulary:
    available = min(len(v) for v in BUILTIN_TAGS.values())
    if not (1 <= num_tags_per_subclass <= available):
        raise ConfigError(f"num_tags_per_subclass must lie in [1, {available}], got {num_tags_per_subclass}")
    tags, subclasses = [], []
    for subclass in TagSubclass:
        for tag in BUILTIN_TAGS[subclass][:num_tags_per_subclass]:
            tags.append(tag)
            subclasses.append(subclass)
    return TagVocabulary(tuple(tags), tuple(subclasses))


def build_word_list(vocab_size: int, tag_vocab: TagVocabulary) -> List[str]:
    """Template words, then tags, padded with filler words so the tokenizer has `vocab_size` ids."""
    words = list(TEMPLATE_WORDS) + [t for t in tag_vocab.tags if t not in TEMPLATE_WORDS]
    room = vocab_size - len(RESERVED_TOKENS)
    if room < len(words):
        raise ConfigError(f"vocab_size {vocab_size} is too small for {len(words)} caption words "
                          f"plus {len(RESERVED_TOKENS)} reserved tokens")
    words += [f"w{i:03d}" for i in range(room - len(words))]
    return words


def caption_for(tags: Dict[TagSubclass, str]) -> str:
    return (f"a {tags[TagSubclass.ATTRIBUTE]} {tags[TagSubclass.ENTITY]} {tags[TagSubclass.ACTION]} "
            f"in the {tags[TagSubclass.SCENE]}")


def tag_codes(seed: int, tag_vocab: TagVocabulary, channels: int) -> np.ndarray:
    return Rng(seed).child("synthetic", "codes").normal(size=(len(tag_vocab), channels))


def _random_box(rng: Rng, lo: float, hi: float) -> BBox:
    w, h = rng.uniform(lo, hi, size=2)
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    return BBox(float(x0), float(y0), min(float(x0 + w), 1.0), min(float(y0 + h), 1.0))


def _cells_under(box: BBox, g: int) -> np.ndarray:
    centres = (np.arange(g) + 0.5) / g
    rows = (centres >= box.y0) & (centres <= box.y1)
    cols = (centres >= box.x0) & (centres <= box.x1)
    mask = rows[:, None] & cols[None, :]
    if not mask.any():
        cy = min(int((box.y0 + box.y1) / 2 * g), g - 1)
        cx = min(int((box.x0 + box.x1) / 2 * g), g - 1)
        mask[cy, cx] = True
    return mask


def make_example(rng: Rng, tag_vocab: TagVocabulary, codes: np.ndarray, grid_size: int,
                 index: int = 0) -> SyntheticExample:
    chosen = {}
    labels = np.zeros(len(tag_vocab))
    for subclass in TagSubclass:
        options = tag_vocab.of_subclass(subclass)
        tag = options[int(rng.integers(0, len(options)))]
        chosen[subclass] = tag
        labels[tag_vocab.index(tag)] = 1.0

    target = _random_box(rng, 0.3, 0.6)
    grid = NOISE_SCALE * rng.normal(size=(grid_size, grid_size, codes.shape[1]))
    grid[_cells_under(target, grid_size)] += labels @ codes

    n_classes = int(rng.integers(1, 4))
    classes = [DETECTION_CLASSES[i] for i in rng.choice(len(DETECTION_CLASSES), size=n_classes, replace=False)]
    detections = []
    for _ in range(int(rng.integers(2, 6))):
        name = classes[int(rng.integers(0, n_classes))]
        score = round(float(rng.uniform(0.5, 1.0)), 4)
        detections.append(Detection(name, _random_box(rng, 0.1, 0.4), score))

    return SyntheticExample(SceneInput(grid, provenance=f"synthetic:{index}"), target, detections,
                            labels, caption_for(chosen))


def make_synthetic_dataset(seed: int, size: int, vocab: Tokenizer, tag_vocab: TagVocabulary,
                           grid_size: int = 8, channels: int = 8) -> List[SyntheticExample]:
    if size < 1:
        raise PreconditionError(f"make_synthetic_dataset needs size >= 1, got {size}")
    missing = [w for w in TEMPLATE_WORDS + tag_vocab.tags if w not in vocab]
    if missing:
        raise ConfigError(f"Caption words missing from the LLM vocabulary: {missing}")
    empty = [s.value for s in TagSubclass if not tag_vocab.of_subclass(s)]
    if empty:
        raise ConfigError(f"Tag vocabulary has no tags for subclasses {empty}")
    codes = tag_codes(seed, tag_vocab, channels)
    root = Rng(seed).child("synthetic", "examples")
    dataset = [make_example(root.child(i), tag_vocab, codes, grid_size, index=i) for i in range(size)]
    logger.info(f"Built synthetic dataset: {size} examples, {len(tag_vocab)} tags, grid {grid_size}x{grid_size}x{channels}")
    return dataset


def tags_of(example: SyntheticExample, tag_vocab: TagVocabulary) -> List[str]:
    """Ground-truth tag strings in vocabulary order."""
    return [tag_vocab.tags[i] for i in np.flatnonzero(example.gt_tags)]
