import hashlib
import json
import os
import struct
import logging
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from models import (AlignCapError, BBox, BoxValidationError, Detection, PreconditionError, SceneInput, StepRecord,
                    SyntheticExample, TagSubclass, TagVocabulary, TrainingConfig)

# Get logger instance
logger = logging.getLogger("aligncap")

CHECKPOINT_MAGIC = b"ALGNCAP1"
CHECKPOINT_DTYPE = "<f8"
CHECKPOINT_FILE_NAME = "checkpoint.bin"
METRICS_FILE_NAME = "metrics.jsonl"
DATASET_FILE_NAME = "dataset.jsonl"


class PersistenceError(AlignCapError):
    """Custom exception for persistence layer errors."""
    pass

class DetectionFileError(PersistenceError):
    """A detection file is not a JSON array of {class, bbox, score} records."""
    pass

class EmptyDataError(PersistenceError):
    """A data file that must hold at least one record is empty."""
    pass

class CheckpointError(PersistenceError):
    """Checkpoint bytes are truncated, corrupted or fail their SHA-256 check."""
    pass

class CheckpointMismatchError(PersistenceError):
    """Checkpoint and requested configuration disagree on model dimensions."""
    pass


def _ensure_parent_dir(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.exists(parent):
        try:
            os.makedirs(parent)
            logger.info(f"Created directory: {parent}")
        except OSError as e:
            logger.error(f"Could not create directory {parent}: {e}", exc_info=True)
            raise PersistenceError(f"Failed to create {parent}: {e}") from e


def _read_text(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise PersistenceError(f"{what} file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return f.read()
    except IOError as e:
        logger.error(f"Could not read {what} file {path}: {e}", exc_info=True)
        raise PersistenceError(f"Failed to read {what} file {path}: {e}") from e


def _write_text(path: str, text: str, what: str):
    _ensure_parent_dir(path)
    try:
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
        logger.debug(f"Wrote {what} file {path}")
    except IOError as e:
        logger.error(f"Failed to write {what} file {path}: {e}", exc_info=True)
        raise PersistenceError(f"Failed to write {what} file {path}: {e}") from e


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path: str, parameters: Sequence, config: TrainingConfig):
    """Writes magic, manifest length, sorted-key JSON manifest, then the float64 payload."""
    buffers, chunks, offset = [], [], 0
    for p in parameters:
        raw = np.ascontiguousarray(p.data, dtype=CHECKPOINT_DTYPE).tobytes()
        buffers.append({
            "name": p.name,
            "shape": list(p.shape),
            "dtype": CHECKPOINT_DTYPE,
            "offset": offset,
            "sha256": hashlib.sha256(raw).hexdigest(),
            "trainable": bool(p.trainable),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"config": config.to_dict(), "buffers": buffers}, sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
    _ensure_parent_dir(path)
    try:
        with open(path, 'wb') as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<Q", len(manifest)))
            f.write(manifest)
            for raw in chunks:
                f.write(raw)
        logger.info(f"Saved checkpoint with {len(buffers)} buffers ({offset} payload bytes) to {path}")
    except IOError as e:
        logger.error(f"Failed to save checkpoint to {path}: {e}", exc_info=True)
        raise PersistenceError(f"Failed to save checkpoint to {path}: {e}") from e


def load_checkpoint(path: str) -> Tuple[TrainingConfig, Dict[str, np.ndarray], Dict[str, bool]]:
    """Returns (config, name -> array, name -> trainable); every buffer is SHA-256 verified."""
    if not os.path.exists(path):
        raise PersistenceError(f"Checkpoint file not found: {path}")
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except IOError as e:
        logger.error(f"Could not read checkpoint {path}: {e}", exc_info=True)
        raise PersistenceError(f"Failed to read checkpoint {path}: {e}") from e

    header = len(CHECKPOINT_MAGIC) + 8
    if len(blob) < header or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an AlignCap checkpoint (bad magic)")
    (manifest_len,) = struct.unpack("<Q", blob[len(CHECKPOINT_MAGIC):header])
    try:
        manifest = json.loads(blob[header:header + manifest_len].decode("utf-8"))
        config = TrainingConfig.from_dict(manifest["config"])
    except (ValueError, KeyError, TypeError) as e:
        logger.error(f"Malformed checkpoint manifest in {path}: {e}", exc_info=True)
        raise CheckpointError(f"Malformed checkpoint manifest in {path}: {e}") from e
    except AlignCapError as e:
        raise CheckpointError(f"Checkpoint {path} holds an invalid config: {e}") from e

    payload = blob[header + manifest_len:]
    arrays, trainable = {}, {}
    for entry in manifest.get("buffers", []):
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start, end = entry["offset"], entry["offset"] + 8 * count
        raw = payload[start:end]
        if len(raw) != end - start:
            raise CheckpointError(f"Checkpoint {path} is truncated inside buffer '{entry['name']}'")
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"SHA-256 mismatch for buffer '{entry['name']}' in {path}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).astype(np.float64).reshape(entry["shape"])
        trainable[entry["name"]] = bool(entry["trainable"])
    logger.info(f"Loaded checkpoint {path}: {len(arrays)} buffers")
    return config, arrays, trainable


def check_compatible(checkpoint_config: TrainingConfig, config: TrainingConfig):
    saved, wanted = checkpoint_config.model_dims(), config.model_dims()
    differing = {k: (saved[k], wanted[k]) for k in saved if saved[k] != wanted[k]}
    if differing:
        details = ", ".join(f"{k}: checkpoint={a} config={b}" for k, (a, b) in sorted(differing.items()))
        raise CheckpointMismatchError(f"Checkpoint is incompatible with the configuration ({details})")


def restore_parameters(parameters: Sequence, arrays: Dict[str, np.ndarray]):
    """Copies checkpoint buffers into the matching parameters, bit for bit."""
    names = {p.name for p in parameters}
    missing = sorted(names - set(arrays))
    unexpected = sorted(set(arrays) - names)
    if missing or unexpected:
        raise CheckpointMismatchError(f"Checkpoint buffers do not match the model (missing={missing}, unexpected={unexpected})")
    for p in parameters:
        if arrays[p.name].shape != p.shape:
            raise CheckpointMismatchError(f"Buffer '{p.name}' has shape {arrays[p.name].shape}, model expects {p.shape}")
        p.data = arrays[p.name].copy()
        p.zero_grad()


# --- metrics log ------------------------------------------------------------

def metrics_line(record: StepRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True)


def append_metrics(path: str, record: StepRecord):
    try:
        with open(path, 'a', encoding='utf-8', newline='\n') as f:
            f.write(metrics_line(record) + "\n")
    except IOError as e:
        logger.error(f"Failed to append metrics to {path}: {e}", exc_info=True)
        raise PersistenceError(f"Failed to append metrics to {path}: {e}") from e


def load_metrics(path: str) -> List[StepRecord]:
    records = []
    for n, line in enumerate(_read_text(path, "metrics").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(StepRecord(**json.loads(line)))
        except (ValueError, TypeError) as e:
            raise PersistenceError(f"{path}:{n}: malformed metrics record: {e}") from e
    return records


# --- detections -------------------------------------------------------------

def load_detections(path: str) -> List[Detection]:
    text = _read_text(path, "detections")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise DetectionFileError(f"{path}: line {e.lineno}: invalid JSON: {e.msg}") from e
    if not isinstance(data, list):
        raise DetectionFileError(f"{path}: expected a JSON array of detections")
    detections = []
    for i, record in enumerate(data):
        try:
            detections.append(Detection(str(record["class"]), BBox.from_list(record["bbox"]),
                                        float(record.get("score", 1.0))))
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise DetectionFileError(f"{path}: record {i}: expected {{class, bbox, score}}: {e}") from e
        except (BoxValidationError, PreconditionError) as e:
            raise DetectionFileError(f"{path}: record {i}: {e}") from e
    logger.debug(f"Loaded {len(detections)} detections from {path}")
    return detections


def save_detections(path: str, detections: Sequence[Detection]):
    _write_text(path, json.dumps([d.to_dict() for d in detections], indent=2) + "\n", "detections")


# --- scenes, vocabularies ---------------------------------------------------

def scene_to_dict(scene: SceneInput) -> Dict[str, Any]:
    return {"shape": list(scene.grid.shape), "values": scene.grid.reshape(-1).tolist()}


def scene_from_dict(data: Dict[str, Any], provenance: str = "file") -> SceneInput:
    values = np.asarray(data["values"], dtype=np.float64)
    shape = tuple(int(s) for s in data["shape"])
    if values.size != int(np.prod(shape)):
        raise PersistenceError(f"Scene has {values.size} values but shape {list(shape)}")
    return SceneInput(values.reshape(shape), provenance=provenance)


def load_scene(path: str) -> SceneInput:
    try:
        return scene_from_dict(json.loads(_read_text(path, "scene")), provenance=path)
    except (ValueError, KeyError, TypeError) as e:
        raise PersistenceError(f"{path}: malformed scene file: {e}") from e
    except PreconditionError as e:
        raise PersistenceError(f"{path}: {e}") from e


def save_scene(path: str, scene: SceneInput):
    _write_text(path, json.dumps(scene_to_dict(scene)) + "\n", "scene")


def load_vocabulary(path: str) -> List[str]:
    """One word per line; ids follow the reserved tokens in line order."""
    words = [line.strip() for line in _read_text(path, "vocabulary").splitlines() if line.strip()]
    if not words:
        raise EmptyDataError(f"Vocabulary file {path} is empty")
    return words


def save_vocabulary(path: str, words: Sequence[str]):
    _write_text(path, "".join(f"{w}\n" for w in words), "vocabulary")


def load_tag_vocabulary(path: str) -> TagVocabulary:
    tags, subclasses = [], []
    for n, line in enumerate(_read_text(path, "tag vocabulary").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise PersistenceError(f"{path}:{n}: expected 'tag<TAB>subclass', got {line!r}")
        try:
            subclasses.append(TagSubclass(parts[1].strip()))
        except ValueError as e:
            raise PersistenceError(f"{path}:{n}: unknown subclass {parts[1]!r}") from e
        tags.append(parts[0].strip())
    if not tags:
        raise EmptyDataError(f"Tag vocabulary file {path} is empty")
    try:
        return TagVocabulary(tuple(tags), tuple(subclasses))
    except PreconditionError as e:
        raise PersistenceError(f"{path}: {e}") from e


def save_tag_vocabulary(path: str, vocab: TagVocabulary):
    _write_text(path, "".join(f"{t}\t{s.value}\n" for t, s in zip(vocab.tags, vocab.subclasses)), "tag vocabulary")


# --- datasets ---------------------------------------------------------------

def example_to_dict(example: SyntheticExample) -> Dict[str, Any]:
    return {
        "scene": scene_to_dict(example.scene),
        "target": example.target.to_list(),
        "detections": [d.to_dict() for d in example.detections],
        "gt_tags": example.gt_tags.tolist(),
        "gt_caption": example.gt_caption,
    }


def example_from_dict(data: Dict[str, Any], provenance: str = "file") -> SyntheticExample:
    detections = [Detection(d["class"], BBox.from_list(d["bbox"]), float(d.get("score", 1.0)))
                  for d in data["detections"]]
    return SyntheticExample(scene_from_dict(data["scene"], provenance), BBox.from_list(data["target"]),
                            detections, np.asarray(data["gt_tags"], dtype=np.float64), data["gt_caption"])


def save_dataset(path: str, examples: Sequence[SyntheticExample]):
    _write_text(path, "".join(json.dumps(example_to_dict(ex), sort_keys=True) + "\n" for ex in examples), "dataset")
    logger.info(f"Saved {len(examples)} examples to {path}")


def load_dataset(path: str) -> List[SyntheticExample]:
    examples = []
    for n, line in enumerate(_read_text(path, "dataset").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            examples.append(example_from_dict(json.loads(line), provenance=f"{path}:{n}"))
        except (ValueError, KeyError, TypeError) as e:
            raise PersistenceError(f"{path}:{n}: malformed example: {e}") from e
        except AlignCapError as e:
            raise PersistenceError(f"{path}:{n}: {e}") from e
    if not examples:
        raise EmptyDataError(f"Dataset file {path} holds no examples")
    logger.info(f"Loaded {len(examples)} examples from {path}")
    return examples
