"""Tagging, captioning and weighted total losses."""
import logging
import math
from typing import Sequence, Union

import numpy as np

from models import AlignCapError, LossWeights, PreconditionError
from modules.frozen_encoders import LLMStub
from modules.tensor import ShapeError, Tensor, as_tensor, log_softmax, softplus

logger = logging.getLogger("aligncap")

Scalar = Union[Tensor, float]

LOSS_COMPONENTS = ("l_tag", "l_cap", "l_cond", "l_multi")


class TrainingDivergenceError(AlignCapError):
    """A loss component became NaN or infinite."""

    def __init__(self, component: str, value: float):
        super().__init__(f"Loss component '{component}' diverged (value={value})")
        self.component = component
        self.value = value


def tagging_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-tag binary cross-entropy with logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise ShapeError(f"tagging_loss: logits {logits.shape} and labels {labels.shape} differ")
    return (softplus(logits) - logits * Tensor(labels)).mean()


def captioning_loss(prefix: Tensor, caption_ids: Sequence[int], llm: LLMStub) -> Tensor:
    """Next-token cross-entropy given the ground-truth prefix, averaged over the caption tokens.

    `caption_ids` is the tokenized caption including <bos> and <eos>; inputs
    are ids[:-1] and targets ids[1:].
    """
    ids = list(caption_ids)
    if len(ids) <= 2:
        raise PreconditionError("captioning_loss needs a non-empty caption")
    logits = llm.decode_logits(prefix, ids[:-1])
    targets = np.asarray(ids[1:], dtype=np.int64)
    picked = log_softmax(logits)[np.arange(len(targets)), targets]
    return -picked.mean()


def _as_float(value: Scalar) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


def total_loss(l_tag: Scalar, l_cap: Scalar, l_cond: Scalar, l_multi: Scalar, w: LossWeights) -> Scalar:
    """alpha*l_tag + beta*l_cap + gamma*l_cond + lambda*l_multi."""
    components = (l_tag, l_cap, l_cond, l_multi)
    for name, value in zip(LOSS_COMPONENTS, components):
        v = _as_float(value)
        if not math.isfinite(v):
            logger.error(f"Training diverged: {name} = {v}")
            raise TrainingDivergenceError(name, v)
    return w.alpha * l_tag + w.beta * l_cap + w.gamma * l_cond + w.lam * l_multi
