import os
import logging
from dataclasses import dataclass
from enum import Enum, auto
from typing import Dict, List, Optional, Sequence

import numpy as np

from models import AlignCapError, BBox, ConfigError, Detection, EvaluationReport, SceneInput, StepRecord, \
    SyntheticExample, TrainingConfig
from modules.aligncap import AlignCapModel
from modules.losses import TrainingDivergenceError
from modules.optim import AdamOptimizer
from modules.synthetic import make_synthetic_dataset
from modules.tensor import NonFiniteError, Rng, backward
from persistence import (CHECKPOINT_FILE_NAME, DATASET_FILE_NAME, METRICS_FILE_NAME, append_metrics,
                         check_compatible, load_checkpoint, restore_parameters, save_checkpoint, save_dataset)

logger = logging.getLogger("aligncap")


class FrozenContractError(AlignCapError):
    """A frozen parameter changed during training."""
    pass


class EngineState(Enum):
    """Enumerates the possible states of the TrainingEngine."""
    IDLE = auto()
    TRAINING = auto()
    EVALUATING = auto()
    CAPTIONING = auto()
    COMPLETE = auto()
    DIVERGED = auto()
    ERROR = auto()


@dataclass
class TrainingSummary:
    records: List[StepRecord]
    evaluation: EvaluationReport
    checkpoint_path: Optional[str]
    metrics_path: Optional[str]


class TrainingEngine:
    """
    Drives an AlignCapModel through training, evaluation and greedy captioning.

    Attributes:
        config (TrainingConfig): Validated run configuration.
        model (AlignCapModel): The model being trained or evaluated.
        out_dir (Optional[str]): Where checkpoint, metrics and dataset files go; None keeps everything in memory.
        state (EngineState): The current operational state of the engine.
        last_error_message (Optional[str]): Message of the last error encountered.
    """

    def __init__(self, config: TrainingConfig, model: Optional[AlignCapModel] = None, out_dir: Optional[str] = None):
        self.config = config
        self.model = model if model is not None else AlignCapModel(config)
        self.out_dir = out_dir
        self.state = EngineState.IDLE
        self.last_error_message: Optional[str] = None
        self._epoch_cache: Dict[int, np.ndarray] = {}

    @classmethod
    def from_checkpoint(cls, path: str, config: Optional[TrainingConfig] = None) -> "TrainingEngine":
        """Rebuilds the model recorded in a checkpoint; `config`, when given, must agree on every model dim."""
        saved_config, arrays, _ = load_checkpoint(path)
        if config is not None:
            check_compatible(saved_config, config)
        model = AlignCapModel(saved_config)
        restore_parameters(model.parameters(), arrays)
        return cls(saved_config, model=model)

    def _set_state(self, new_state: EngineState, detail_message: Optional[str] = None):
        if self.state != new_state or detail_message:
            old_state_name = self.state.name
            self.state = new_state
            log_message_prefix = f"Engine state changed from {old_state_name} to {self.state.name}"
            if new_state in (EngineState.ERROR, EngineState.DIVERGED):
                self.last_error_message = detail_message if detail_message else "Unknown error"
                logger.error(f"{log_message_prefix} - Error: {self.last_error_message}")
            else:
                logger.info(f"{log_message_prefix}{' - ' + detail_message if detail_message else ''}")

    def _path(self, name: str) -> Optional[str]:
        return os.path.join(self.out_dir, name) if self.out_dir else None

    # --- training -------------------------------------------------------------

    def _snapshot(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.model.trainable_parameters()}

    def _restore(self, snapshot: Dict[str, np.ndarray]):
        for p in self.model.trainable_parameters():
            p.data = snapshot[p.name].copy()
            p.zero_grad()

    def _frozen_digests(self) -> Dict[str, str]:
        return {p.name: p.sha256() for p in self.model.frozen_parameters()}

    def batch_indices(self, step: int, dataset_size: int) -> List[int]:
        """Examples of optimizer step `step`: consecutive slices of per-epoch permutations."""
        n = self.config.batch_size
        picked = []
        for pos in range(step * n, step * n + n):
            epoch, offset = divmod(pos, dataset_size)
            picked.append(int(self._epoch_order(epoch, dataset_size)[offset]))
        return picked

    def _epoch_order(self, epoch: int, dataset_size: int) -> np.ndarray:
        if epoch not in self._epoch_cache:
            self._epoch_cache[epoch] = Rng(self.config.seed).child("train", "epoch", epoch).permutation(dataset_size)
        return self._epoch_cache[epoch]

    def train(self, dataset: Optional[Sequence[SyntheticExample]] = None, audit_frozen: bool = False) -> TrainingSummary:
        """Runs `steps` optimizer steps, then evaluates on the training set and writes the checkpoint.

        Every step appends one metrics record; the post-training evaluation is
        appended as a final record with step == steps.
        """
        cfg = self.config
        if not any(cfg.loss_weights.as_tuple()):
            raise ConfigError("At least one loss weight must be positive for a training run")
        if dataset is None:
            dataset = make_synthetic_dataset(cfg.seed, cfg.dataset_size, self.model.tokenizer, self.model.tag_vocab,
                                             cfg.grid_size, cfg.channels)
        dataset = list(dataset)

        metrics_path = self._path(METRICS_FILE_NAME)
        checkpoint_path = self._path(CHECKPOINT_FILE_NAME)
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            save_dataset(self._path(DATASET_FILE_NAME), dataset)
            open(metrics_path, 'w').close()

        optimizer = AdamOptimizer(self.model.trainable_parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2,
                                  cfg.epsilon)
        frozen_before = self._frozen_digests() if audit_frozen else None
        rng = Rng(cfg.seed).child("train", "steps")
        records: List[StepRecord] = []
        last_good = self._snapshot()

        self._set_state(EngineState.TRAINING, f"{cfg.steps} steps over {len(dataset)} examples, batch {cfg.batch_size}")
        for step in range(cfg.steps):
            batch = [dataset[i] for i in self.batch_indices(step, len(dataset))]
            optimizer.zero_grad()
            try:
                result = self.model.forward(batch, rng.child(step), training=True)
            except (TrainingDivergenceError, NonFiniteError) as e:
                self._restore(last_good)
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, self.model.parameters(), cfg)
                self._set_state(EngineState.DIVERGED, f"step {step}: {e}; restored last good parameters")
                raise
            last_good = self._snapshot()
            backward(result.total)
            optimizer.step()

            record = StepRecord(step, *result.components())
            records.append(record)
            if metrics_path:
                append_metrics(metrics_path, record)
            logger.debug(f"step {step}: total={record.total:.6f}")
            if audit_frozen and self._frozen_digests() != frozen_before:
                raise FrozenContractError(f"Frozen parameters changed at step {step}")

        report = self.evaluate(dataset)
        final = StepRecord(cfg.steps, report.l_tag, report.l_cap, report.l_cond, report.l_multi, report.total)
        records.append(final)
        if metrics_path:
            append_metrics(metrics_path, final)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, self.model.parameters(), cfg)
        self._set_state(EngineState.COMPLETE, f"final total {report.total:.6f}")
        return TrainingSummary(records, report, checkpoint_path, metrics_path)

    # --- evaluation -------------------------------------------------------------

    def evaluate(self, dataset: Sequence[SyntheticExample]) -> EvaluationReport:
        """Eval-mode loss components averaged over the examples, plus tag recall@k.

        The dataset is split into consecutive batches of batch_size (the last
        one may be shorter); each batch's components are weighted by its size.
        """
        if not dataset:
            raise ConfigError("evaluate needs at least one example")
        self._set_state(EngineState.EVALUATING, f"{len(dataset)} examples")
        cfg = self.config
        rng = Rng(cfg.seed).child("eval")
        sums = np.zeros(5)
        hits = []
        for b, start in enumerate(range(0, len(dataset), cfg.batch_size)):
            batch = list(dataset[start:start + cfg.batch_size])
            result = self.model.forward(batch, rng.child(b), training=False)
            sums += len(batch) * np.asarray(result.components())
            for logits, example in zip(result.tag_logits, batch):
                top = np.argsort(-logits, kind="stable")[:cfg.top_k_tags]
                positives = np.flatnonzero(example.gt_tags)
                hits.append(len(set(top.tolist()) & set(positives.tolist())) / len(positives))
        means = sums / len(dataset)
        report = EvaluationReport(*(float(v) for v in means), tag_recall_at_k=float(np.mean(hits)),
                                  examples=len(dataset))
        self._set_state(EngineState.COMPLETE, f"eval total {report.total:.6f}")
        return report

    # --- captioning ---------------------------------------------------------------

    def caption(self, scene: SceneInput, target: BBox, detections: Sequence[Detection] = (),
                max_tokens: int = 20) -> Dict:
        self._set_state(EngineState.CAPTIONING)
        text, ids, tags = self.model.caption(scene, target, detections, Rng(self.config.seed).child("demo"),
                                             max_tokens=max_tokens)
        self._set_state(EngineState.COMPLETE)
        return {
            "caption": text,
            "token_ids": ids,
            "tags": [{"tag": t, "subclass": self.model.tag_vocab.subclass_of(t).value} for t in tags],
        }
