import json
import struct

import numpy as np
import pytest

from models import BBox, Detection, SceneInput, StepRecord, TagSubclass, TagVocabulary, TrainingConfig
from modules.tensor import Parameter, Rng
from persistence import (CHECKPOINT_MAGIC, CheckpointError, CheckpointMismatchError, DetectionFileError,
                         EmptyDataError, PersistenceError, append_metrics, check_compatible, load_checkpoint,
                         load_dataset, load_detections, load_metrics, load_scene, load_tag_vocabulary,
                         load_vocabulary, restore_parameters, save_checkpoint, save_dataset, save_detections,
                         save_scene, save_tag_vocabulary, save_vocabulary)


@pytest.fixture
def params():
    rng = Rng(1)
    return [
        Parameter("layer.weight", rng.normal(size=(3, 4))),
        Parameter("layer.bias", rng.normal(size=4)),
        Parameter("sigmoid.tau_log", 2.302585092994046),
        Parameter("frozen.table", rng.normal(size=(2, 5)), trainable=False),
    ]


@pytest.fixture
def checkpoint(tmp_path, params):
    path = str(tmp_path / "checkpoint.bin")
    save_checkpoint(path, params, TrainingConfig().minimized())
    return path


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, checkpoint, params):
        config, arrays, trainable = load_checkpoint(checkpoint)
        assert config == TrainingConfig().minimized()
        for p in params:
            assert arrays[p.name].tobytes() == p.data.tobytes()
            assert trainable[p.name] == p.trainable

    def test_manifest_is_sorted_key_json(self, checkpoint):
        with open(checkpoint, "rb") as f:
            blob = f.read()
        assert blob[:len(CHECKPOINT_MAGIC)] == CHECKPOINT_MAGIC
        (length,) = struct.unpack("<Q", blob[8:16])
        raw = blob[16:16 + length]
        manifest = json.loads(raw)
        assert json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode() == raw
        assert [b["name"] for b in manifest["buffers"]][0] == "layer.weight"

    def test_corrupted_payload(self, checkpoint):
        with open(checkpoint, "r+b") as f:
            f.seek(-3, 2)
            byte = f.read(1)
            f.seek(-3, 2)
            f.write(bytes([byte[0] ^ 0xFF]))
        with pytest.raises(CheckpointError, match="SHA-256"):
            load_checkpoint(checkpoint)

    def test_truncated_payload(self, checkpoint):
        with open(checkpoint, "rb") as f:
            blob = f.read()
        with open(checkpoint, "wb") as f:
            f.write(blob[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(checkpoint)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(PersistenceError):
            load_checkpoint(str(tmp_path / "absent.bin"))

    def test_restore(self, checkpoint, params):
        _, arrays, _ = load_checkpoint(checkpoint)
        fresh = [Parameter(p.name, np.zeros_like(p.data), p.trainable) for p in params]
        restore_parameters(fresh, arrays)
        for p, q in zip(params, fresh):
            np.testing.assert_array_equal(p.data, q.data)

    def test_restore_rejects_missing_buffer(self, checkpoint, params):
        _, arrays, _ = load_checkpoint(checkpoint)
        with pytest.raises(CheckpointMismatchError, match="missing"):
            restore_parameters(params + [Parameter("extra", np.zeros(2))], arrays)

    def test_restore_rejects_shape_change(self, checkpoint, params):
        _, arrays, _ = load_checkpoint(checkpoint)
        params[1] = Parameter("layer.bias", np.zeros(5))
        with pytest.raises(CheckpointMismatchError, match="shape"):
            restore_parameters(params, arrays)

    def test_compatibility(self):
        base = TrainingConfig().minimized()
        check_compatible(base, base.with_overrides(steps=7, learning_rate=0.5, seed=3))
        with pytest.raises(CheckpointMismatchError, match="d_v"):
            check_compatible(base, base.with_overrides(d_v=16))


class TestMetrics:
    def test_append_and_load(self, tmp_path):
        path = str(tmp_path / "metrics.jsonl")
        records = [StepRecord(0, 0.7, 2.1, 0.3, 0.31, 3.41), StepRecord(1, 0.1 + 0.2, 2.0, 0.29, 0.3, 2.89)]
        for r in records:
            append_metrics(path, r)
        assert load_metrics(path) == records

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        path.write_text('{"step": 0}\n')
        with pytest.raises(PersistenceError, match=":1:"):
            load_metrics(str(path))


class TestDetections:
    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "detections.json")
        detections = [Detection("dog", BBox(0.1, 0.2, 0.5, 0.6), 0.9), Detection("person", BBox(0.0, 0.0, 1.0, 1.0))]
        save_detections(path, detections)
        assert load_detections(path) == detections

    def test_score_defaults_to_one(self, tmp_path):
        path = tmp_path / "detections.json"
        path.write_text('[{"class": "cat", "bbox": [0.1, 0.1, 0.3, 0.3]}]')
        assert load_detections(str(path))[0].score == 1.0

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "detections.json"
        path.write_text('[\n{"class": "cat",\n oops}\n]')
        with pytest.raises(DetectionFileError, match="line 3"):
            load_detections(str(path))

    def test_not_an_array(self, tmp_path):
        path = tmp_path / "detections.json"
        path.write_text('{"class": "cat"}')
        with pytest.raises(DetectionFileError, match="array"):
            load_detections(str(path))

    @pytest.mark.parametrize("record", [
        '{"bbox": [0.1, 0.1, 0.3, 0.3]}',
        '{"class": "cat", "bbox": [0.5, 0.1, 0.3, 0.3]}',
        '{"class": "cat", "bbox": [0.1, 0.1, 0.3]}',
        '{"class": "cat", "bbox": [0.1, 0.1, 0.3, 0.3], "score": 1.5}',
    ])
    def test_bad_record_is_named(self, tmp_path, record):
        path = tmp_path / "detections.json"
        path.write_text('[{"class": "dog", "bbox": [0.0, 0.0, 0.5, 0.5]}, ' + record + ']')
        with pytest.raises(DetectionFileError, match="record 1"):
            load_detections(str(path))

    def test_empty_array_is_allowed(self, tmp_path):
        path = tmp_path / "detections.json"
        path.write_text("[]")
        assert load_detections(str(path)) == []


class TestScenesAndVocabularies:
    def test_scene_round_trip(self, tmp_path):
        path = str(tmp_path / "scene.json")
        scene = SceneInput(Rng(2).normal(size=(4, 4, 3)))
        save_scene(path, scene)
        loaded = load_scene(path)
        np.testing.assert_array_equal(loaded.grid, scene.grid)
        assert loaded.provenance == path

    def test_scene_shape_mismatch(self, tmp_path):
        path = tmp_path / "scene.json"
        path.write_text('{"shape": [2, 2, 1], "values": [1, 2, 3]}')
        with pytest.raises(PersistenceError, match="3 values"):
            load_scene(str(path))

    def test_scene_must_be_square(self, tmp_path):
        path = tmp_path / "scene.json"
        path.write_text('{"shape": [1, 2, 1], "values": [1, 2]}')
        with pytest.raises(PersistenceError):
            load_scene(str(path))

    def test_vocabulary(self, tmp_path):
        path = str(tmp_path / "vocab.txt")
        save_vocabulary(path, ["a", "dog", "park"])
        assert load_vocabulary(path) == ["a", "dog", "park"]

    def test_empty_vocabulary(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("\n\n")
        with pytest.raises(EmptyDataError):
            load_vocabulary(str(path))

    def test_tag_vocabulary(self, tmp_path):
        path = str(tmp_path / "tags.tsv")
        vocab = TagVocabulary(("dog", "red", "running", "park"),
                              (TagSubclass.ENTITY, TagSubclass.ATTRIBUTE, TagSubclass.ACTION, TagSubclass.SCENE))
        save_tag_vocabulary(path, vocab)
        assert load_tag_vocabulary(path) == vocab

    def test_unknown_subclass(self, tmp_path):
        path = tmp_path / "tags.tsv"
        path.write_text("dog\tentity\nblue\tcolour\n")
        with pytest.raises(PersistenceError, match=":2:"):
            load_tag_vocabulary(str(path))

    def test_duplicate_tags(self, tmp_path):
        path = tmp_path / "tags.tsv"
        path.write_text("dog\tentity\ndog\tentity\n")
        with pytest.raises(PersistenceError, match="unique"):
            load_tag_vocabulary(str(path))

    def test_empty_tag_vocabulary(self, tmp_path):
        path = tmp_path / "tags.tsv"
        path.write_text("")
        with pytest.raises(EmptyDataError):
            load_tag_vocabulary(str(path))


class TestDataset:
    def test_round_trip(self, tmp_path, tiny_dataset):
        path = str(tmp_path / "dataset.jsonl")
        save_dataset(path, tiny_dataset)
        loaded = load_dataset(path)
        assert len(loaded) == len(tiny_dataset)
        for a, b in zip(loaded, tiny_dataset):
            np.testing.assert_array_equal(a.scene.grid, b.scene.grid)
            np.testing.assert_array_equal(a.gt_tags, b.gt_tags)
            assert (a.target, a.detections, a.gt_caption) == (b.target, b.detections, b.gt_caption)

    def test_empty_dataset(self, tmp_path):
        path = tmp_path / "dataset.jsonl"
        path.write_text("\n")
        with pytest.raises(EmptyDataError):
            load_dataset(str(path))

    def test_malformed_line_is_named(self, tmp_path, tiny_dataset):
        path = str(tmp_path / "dataset.jsonl")
        save_dataset(path, tiny_dataset[:1])
        with open(path, "a") as f:
            f.write('{"scene": {}}\n')
        with pytest.raises(PersistenceError, match=":2:"):
            load_dataset(path)
