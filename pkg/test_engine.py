import json
import os

import numpy as np
import pytest

from engine import EngineState, TrainingEngine
from models import ConfigError, LossWeights, TrainingConfig
from modules.losses import LOSS_COMPONENTS, TrainingDivergenceError
from modules.tensor import NonFiniteError, Rng, backward, set_debug_mode
from persistence import CHECKPOINT_FILE_NAME, DATASET_FILE_NAME, METRICS_FILE_NAME, CheckpointMismatchError, \
    load_dataset, load_metrics


@pytest.fixture
def engine_config(tiny_config) -> TrainingConfig:
    return tiny_config.with_overrides(steps=4, dataset_size=4)


class TestTraining:
    def test_artifacts(self, engine_config, tmp_path):
        engine = TrainingEngine(engine_config, out_dir=str(tmp_path))
        summary = engine.train()
        assert engine.state == EngineState.COMPLETE
        assert [r.step for r in summary.records] == list(range(engine_config.steps + 1))
        assert load_metrics(str(tmp_path / METRICS_FILE_NAME)) == summary.records
        assert len(load_dataset(str(tmp_path / DATASET_FILE_NAME))) == engine_config.dataset_size
        assert os.path.getsize(tmp_path / CHECKPOINT_FILE_NAME) > 0
        with open(tmp_path / METRICS_FILE_NAME) as f:
            first = json.loads(f.readline())
        assert sorted(first) == sorted(("step", "total") + LOSS_COMPONENTS)

    def test_final_record_is_training_set_evaluation(self, engine_config):
        engine = TrainingEngine(engine_config)
        summary = engine.train()
        final = summary.records[-1]
        assert final.total == summary.evaluation.total
        assert 0.0 <= summary.evaluation.tag_recall_at_k <= 1.0
        assert summary.checkpoint_path is None and summary.metrics_path is None

    def test_runs_are_reproducible(self, engine_config, tmp_path):
        for name in ("a", "b"):
            TrainingEngine(engine_config, out_dir=str(tmp_path / name)).train()
        for artifact in (METRICS_FILE_NAME, CHECKPOINT_FILE_NAME, DATASET_FILE_NAME):
            assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes(), artifact

    def test_zero_learning_rate_keeps_parameters(self, engine_config):
        engine = TrainingEngine(engine_config.with_overrides(learning_rate=0.0, steps=3))
        before = {p.name: p.data.copy() for p in engine.model.parameters()}
        engine.train()
        for p in engine.model.parameters():
            np.testing.assert_array_equal(p.data, before[p.name], err_msg=p.name)

    def test_frozen_parameters_survive_training(self, tiny_config):
        engine = TrainingEngine(tiny_config.with_overrides(steps=100, dataset_size=6))
        before = {p.name: p.sha256() for p in engine.model.frozen_parameters()}
        engine.train(audit_frozen=True)
        assert {p.name: p.sha256() for p in engine.model.frozen_parameters()} == before
        assert "refinement.tag_table" in before

    def test_training_moves_trainable_parameters(self, engine_config):
        engine = TrainingEngine(engine_config)
        before = {p.name: p.data.copy() for p in engine.model.trainable_parameters()}
        engine.train()
        moved = [p.name for p in engine.model.trainable_parameters() if not np.array_equal(p.data, before[p.name])]
        assert "tagging.head.weight" in moved
        assert "refinement.sigmoid.bias" in moved

    def test_all_zero_weights_rejected(self, engine_config):
        config = engine_config.with_overrides(loss_weights=LossWeights(0.0, 0.0, 0.0, 0.0))
        with pytest.raises(ConfigError):
            TrainingEngine(config).train()

    def test_divergence_restores_and_saves(self, engine_config, tmp_path):
        engine = TrainingEngine(engine_config, out_dir=str(tmp_path))
        engine.model.tag_head.bias.data[:] = np.nan
        with pytest.raises(TrainingDivergenceError) as info:
            engine.train()
        assert info.value.component == "l_tag"
        assert engine.state == EngineState.DIVERGED
        assert (tmp_path / CHECKPOINT_FILE_NAME).exists()
        assert "l_tag" in engine.last_error_message

    def test_debug_mode_divergence_restores_and_saves(self, engine_config, tmp_path):
        set_debug_mode(True)
        engine = TrainingEngine(engine_config, out_dir=str(tmp_path))
        engine.model.tag_head.bias.data[:] = np.nan
        with pytest.raises(NonFiniteError):
            engine.train()
        assert engine.state == EngineState.DIVERGED
        assert (tmp_path / CHECKPOINT_FILE_NAME).exists()
        assert "restored last good parameters" in engine.last_error_message

    def test_batches_cover_each_epoch(self, engine_config):
        engine = TrainingEngine(engine_config)
        epoch = engine.batch_indices(0, 4) + engine.batch_indices(1, 4)
        assert sorted(epoch) == [0, 1, 2, 3]
        assert engine.batch_indices(5, 4) == engine.batch_indices(5, 4)


class TestLossGating:
    def test_similarity_heads_get_no_gradient(self, tiny_config, tiny_dataset):
        from modules.aligncap import AlignCapModel

        model = AlignCapModel(tiny_config.with_overrides(loss_weights=LossWeights(1.0, 1.0, 0.0, 0.0)))
        backward(model.forward(tiny_dataset[:2], Rng(1), training=True).total)
        gated = [p for p in model.trainable_parameters()
                 if p.name.startswith(("refinement.head.", "semantic.head.", "refinement.sigmoid.",
                                       "semantic.sigmoid."))]
        assert gated
        for p in gated:
            assert not np.any(p.grad), p.name
        assert np.any(model.tag_head.weight.grad)
        assert np.any(model.aligner.queries.grad)


class TestEvaluation:
    def test_checkpoint_reproduces_evaluation(self, engine_config, tmp_path):
        summary = TrainingEngine(engine_config, out_dir=str(tmp_path)).train()
        restored = TrainingEngine.from_checkpoint(str(tmp_path / CHECKPOINT_FILE_NAME))
        dataset = load_dataset(str(tmp_path / DATASET_FILE_NAME))
        assert restored.evaluate(dataset).to_dict() == summary.evaluation.to_dict()

    def test_checkpoint_records_vocabulary_files(self, vocabulary_files, tmp_path):
        config = vocabulary_files.with_overrides(steps=2, dataset_size=4)
        out = tmp_path / "run"
        summary = TrainingEngine(config, out_dir=str(out)).train()
        restored = TrainingEngine.from_checkpoint(str(out / CHECKPOINT_FILE_NAME))
        assert restored.config.vocab_file == config.vocab_file
        assert restored.config.tag_vocab_file == config.tag_vocab_file
        assert restored.model.tag_vocab.tags[0] == "fox"
        dataset = load_dataset(str(out / DATASET_FILE_NAME))
        assert restored.evaluate(dataset).to_dict() == summary.evaluation.to_dict()

    def test_incompatible_config(self, engine_config, tmp_path):
        TrainingEngine(engine_config, out_dir=str(tmp_path)).train()
        with pytest.raises(CheckpointMismatchError):
            TrainingEngine.from_checkpoint(str(tmp_path / CHECKPOINT_FILE_NAME), engine_config.with_overrides(d_v=16))

    def test_empty_dataset(self, engine_config):
        with pytest.raises(ConfigError):
            TrainingEngine(engine_config).evaluate([])

    def test_caption(self, engine_config, tiny_dataset):
        engine = TrainingEngine(engine_config)
        example = tiny_dataset[0]
        result = engine.caption(example.scene, example.target, example.detections)
        assert engine.state == EngineState.COMPLETE
        assert sorted(result) == ["caption", "tags", "token_ids"]
        assert all(0 <= i < engine.model.tokenizer.vocab_size for i in result["token_ids"])
        assert {t["subclass"] for t in result["tags"]} <= {"entity", "attribute", "action", "scene"}
        assert result == engine.caption(example.scene, example.target, example.detections)


@pytest.mark.slow
def test_desk_scale_training_halves_the_loss():
    summary = TrainingEngine(TrainingConfig()).train()
    steps = summary.records[:-1]
    initial = steps[0].total
    late = np.mean([r.total for r in steps[-50:]])
    assert late <= 0.5 * initial, (initial, late)
    assert summary.records[-1].total <= 0.5 * summary.records[0].total, (summary.records[0], summary.records[-1])
    for name in LOSS_COMPONENTS:
        early_mean = np.mean([getattr(r, name) for r in steps[:50]])
        late_mean = np.mean([getattr(r, name) for r in steps[-50:]])
        assert late_mean <= early_mean, (name, early_mean, late_mean)
