import logging
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from models import TagSubclass, TagVocabulary, TrainingConfig  # noqa: E402
from modules.aligncap import AlignCapModel  # noqa: E402
from modules.synthetic import make_synthetic_dataset  # noqa: E402
from modules.tensor import set_debug_mode  # noqa: E402
from persistence import save_tag_vocabulary, save_vocabulary  # noqa: E402


@pytest.fixture(autouse=True)
def _reset_debug_mode():
    set_debug_mode(False)
    yield
    set_debug_mode(False)


@pytest.fixture(autouse=True)
def _propagate_aligncap_logs():
    # main.setup_logging turns propagation off; caplog needs it on.
    logger = logging.getLogger("aligncap")
    previous = logger.propagate
    logger.propagate = True
    yield
    logger.propagate = previous


@pytest.fixture
def tiny_config() -> TrainingConfig:
    return TrainingConfig().minimized().with_overrides(steps=3)


@pytest.fixture
def tiny_model(tiny_config) -> AlignCapModel:
    return AlignCapModel(tiny_config)


@pytest.fixture
def tiny_dataset(tiny_config, tiny_model):
    return make_synthetic_dataset(tiny_config.seed, 4, tiny_model.tokenizer, tiny_model.tag_vocab,
                                  tiny_config.grid_size, tiny_config.channels)


@pytest.fixture
def vocabulary_files(tmp_path, tiny_config) -> TrainingConfig:
    """tiny_config reading a two-tags-per-subclass vocabulary from disk."""
    tag_vocab = TagVocabulary(
        ("fox", "owl", "purple", "tiny", "hopping", "perched", "meadow", "attic"),
        (TagSubclass.ENTITY, TagSubclass.ENTITY, TagSubclass.ATTRIBUTE, TagSubclass.ATTRIBUTE,
         TagSubclass.ACTION, TagSubclass.ACTION, TagSubclass.SCENE, TagSubclass.SCENE))
    words = ["a", "in", "the"] + list(tag_vocab.tags) + ["near", "under"]
    save_tag_vocabulary(str(tmp_path / "tags.tsv"), tag_vocab)
    save_vocabulary(str(tmp_path / "vocab.txt"), words)
    return tiny_config.with_overrides(vocab_file=str(tmp_path / "vocab.txt"),
                                      tag_vocab_file=str(tmp_path / "tags.tsv"),
                                      vocab_size=len(words) + 3)
