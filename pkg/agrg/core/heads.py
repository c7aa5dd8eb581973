# agrg/core/heads.py

"""
Per-label projection and classification heads on top of the shared encoder.

Head i maps h to its own embedding h_i and then to one logit. Training sums the K
per-label BCE losses; because head i only reaches L_i in the graph, one backward
pass of the sum gives every head the gradient of its own loss and the trunk the
gradient of the sum. `routed_backward` checks that the heads really are disjoint
before relying on that.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from agrg.core.autodiff import Graph, Tensor, add, bce_loss, gradients, no_grad, relu, sigmoid
from agrg.core.encoder import EncoderConfig, VisualEncoder, stack_batch
from agrg.core.nn import Linear, Module
from agrg.core.optim import Adam
from agrg.errors import ConfigError, LabelError, SharedParameterError
from agrg.ingestion.common_utils import iter_batches, make_rng, progress
from agrg.ingestion.synth import SyntheticCase

logger = logging.getLogger(__name__)

FLAG_OK = "ok"
FLAG_NO_POSITIVES = "no_positives"
FLAG_NO_NEGATIVES = "no_negatives"


class HeadsConfig(BaseModel):
    d_i: int = Field(32, ge=1)

# ==============================================================================
# 1. HEADS
# ==============================================================================

class ProjectionHead(Module):
    """h -> h_i through one ReLU hidden layer."""

    def __init__(self, d_h: int, d_i: int, rng: np.random.Generator):
        self.hidden = Linear(d_h, d_i, rng)
        self.out = Linear(d_i, d_i, rng)

    def forward(self, h: Tensor) -> Tensor:
        return self.out(relu(self.hidden(h)))


class ClassificationHead(Module):
    def __init__(self, d_i: int, rng: np.random.Generator):
        self.linear = Linear(d_i, 1, rng)

    def forward(self, h_i: Tensor) -> Tensor:
        return self.linear(h_i)


class MultiTaskModel(Module):
    """Shared encoder trunk plus K independent (projection, classification) head pairs."""

    def __init__(self, encoder_config: EncoderConfig, heads_config: HeadsConfig, k: int,
                 rng: np.random.Generator):
        self.k = k
        self.d_i = heads_config.d_i
        self.encoder = VisualEncoder(encoder_config, rng)
        self.projections = [ProjectionHead(encoder_config.d_h, heads_config.d_i, rng) for _ in range(k)]
        self.classifiers = [ClassificationHead(heads_config.d_i, rng) for _ in range(k)]

    def head_parameters(self, label: int) -> List[Tuple[str, Tensor]]:
        return ([(f"projections.{label}.{name}", p) for name, p in self.projections[label].named_parameters()]
                + [(f"classifiers.{label}.{name}", p) for name, p in self.classifiers[label].named_parameters()])

    def trunk_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(f"encoder.{name}", p) for name, p in self.encoder.named_parameters()]

    def forward(self, volumes: np.ndarray) -> List[Tensor]:
        return classify_logits(project_per_label(self.encoder(volumes), self.projections), self.classifiers)


def project_per_label(h: Tensor, projections: Sequence[ProjectionHead]) -> List[Tensor]:
    """[h_1, ..., h_K]; h_i depends only on h and head i."""
    return [head(h) for head in projections]


def classify_logits(h_list: Sequence[Tensor], classifiers: Sequence[ClassificationHead]) -> List[Tensor]:
    if len(h_list) != len(classifiers):
        raise ConfigError(f"{len(h_list)} embeddings for {len(classifiers)} classification heads")
    return [head(h_i) for head, h_i in zip(classifiers, h_list)]

# ==============================================================================
# 2. LOSSES & ROUTED BACKWARD
# ==============================================================================

@dataclass
class HeadLosses:
    per_label: List[Tensor]
    total: Tensor

    @classmethod
    def from_losses(cls, losses: Sequence[Tensor]) -> "HeadLosses":
        total = losses[0]
        for loss in losses[1:]:
            total = add(total, loss)
        return cls(per_label=list(losses), total=total)

    def values(self) -> np.ndarray:
        return np.array([loss.item() for loss in self.per_label])


def classify_per_label(h_list: Sequence[Tensor], classifiers: Sequence[ClassificationHead],
                       labels: np.ndarray) -> Tuple[np.ndarray, HeadLosses]:
    """
    Scores are sigmoid(classifier_i(h_i)) and per-label losses are BCE(score_i, y_i).

    `labels` has shape (B, K) (or (K,) for a single case); each L_i is the batch mean.
    Returns the (B, K) score array and the losses.
    """
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if labels.shape[1] != len(h_list):
        raise LabelError(f"expected {len(h_list)} labels per case, got {labels.shape[1]}")
    probabilities = [sigmoid(logit) for logit in classify_logits(h_list, classifiers)]
    losses = [bce_loss(prob, labels[:, i:i + 1]) for i, prob in enumerate(probabilities)]
    scores = np.concatenate([prob.data for prob in probabilities], axis=1)
    return scores, HeadLosses.from_losses(losses)


def check_head_isolation(model: MultiTaskModel) -> None:
    """Raises SharedParameterError when two heads (or a head and the trunk) share a parameter."""
    owner: Dict[int, str] = {id(p): "trunk" for _, p in model.trunk_parameters()}
    for label in range(model.k):
        for name, param in model.head_parameters(label):
            previous = owner.get(id(param))
            if previous is not None and previous != f"head {label}":
                raise SharedParameterError(f"parameter '{name}' of head {label} is also used by {previous}")
            owner[id(param)] = f"head {label}"


def routed_backward(graph: Graph, losses: HeadLosses, model: MultiTaskModel,
                    accumulate: bool = True) -> Dict[Tensor, np.ndarray]:
    """Back-propagates L = Σ L_i once: heads receive ∂L_i, the trunk receives ∂L."""
    check_head_isolation(model)
    return gradients(graph, losses.total, accumulate=accumulate)

# ==============================================================================
# 3. THRESHOLDS & SELECTION
# ==============================================================================

@dataclass
class ThresholdVector:
    values: np.ndarray
    flags: List[str] = field(default_factory=list)
    f1: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.values)


def threshold_candidates(scores: np.ndarray) -> np.ndarray:
    distinct = np.unique(scores)
    return np.unique(np.concatenate([[0.0], (distinct[:-1] + distinct[1:]) / 2.0, [1.0]]))


def f1_at(scores: np.ndarray, labels: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """F1 of `score > threshold` for every threshold; 0 when 2TP + FP + FN = 0."""
    predicted = scores[None, :] > np.asarray(thresholds, dtype=np.float64)[:, None]
    positive = labels[None, :] == 1
    tp = (predicted & positive).sum(axis=1)
    fp = (predicted & ~positive).sum(axis=1)
    fn = (~predicted & positive).sum(axis=1)
    denominator = 2 * tp + fp + fn
    return np.where(denominator > 0, 2 * tp / np.maximum(denominator, 1), 0.0)


def calibrate_label(scores: np.ndarray, labels: np.ndarray) -> Tuple[float, str, float]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    positives = int(labels.sum())
    if positives == 0:
        return 1.0, FLAG_NO_POSITIVES, 0.0
    if positives == len(labels):
        return 0.0, FLAG_NO_NEGATIVES, float(f1_at(scores, labels, np.array([0.0]))[0])
    candidates = threshold_candidates(scores)
    f1 = f1_at(scores, labels, candidates)
    best = f1.max()
    tau = candidates[np.flatnonzero(f1 == best)[-1]]
    return float(tau), FLAG_OK, float(best)


def calibrate_thresholds(scores: np.ndarray, labels: np.ndarray, names: Optional[Sequence[str]] = None) -> ThresholdVector:
    """Per-label F1-maximizing thresholds on validation scores (N, K); ties go to the larger threshold."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels))
    if scores.shape != labels.shape:
        raise LabelError(f"scores {scores.shape} and labels {labels.shape} do not align")
    if not np.all((labels == 0) | (labels == 1)):
        raise LabelError("validation labels must be 0 or 1")

    values, flags, f1 = [], [], []
    for i in range(scores.shape[1]):
        tau, flag, best = calibrate_label(scores[:, i], labels[:, i])
        if flag != FLAG_OK:
            name = names[i] if names else str(i)
            logger.warning(f"[Thresholds] label '{name}' flagged {flag}; threshold pinned to {tau}")
        values.append(tau)
        flags.append(flag)
        f1.append(best)
    return ThresholdVector(values=np.array(values), flags=flags, f1=np.array(f1))


def select_abnormal(scores: Sequence[float], thresholds: Sequence[float], mode: str = "inference",
                    labels: Optional[Sequence[int]] = None) -> List[int]:
    """
    Labels predicted abnormal (score_i > threshold_i), ascending.

    In "training" mode only true positives are kept, so `labels` is required.
    """
    scores = np.asarray(scores, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if scores.shape != thresholds.shape:
        raise LabelError(f"{scores.shape[0]} scores for {thresholds.shape[0]} thresholds")
    predicted = scores > thresholds
    if mode == "training":
        if labels is None:
            raise LabelError("training-mode selection needs the true labels")
        predicted &= np.asarray(labels) == 1
    elif mode != "inference":
        raise ValueError(f"unknown selection mode '{mode}'")
    return [int(i) for i in np.flatnonzero(predicted)]

# ==============================================================================
# 4. TRAINING
# ==============================================================================

def heads_epoch(cases: Sequence[SyntheticCase], model: MultiTaskModel, trunk_optimizer: Adam,
                head_optimizer: Adam, batch_size: int = 4, seed: int = 0, epoch: int = 0) -> float:
    """One multi-task fine-tuning epoch; returns the case-weighted mean of L = Σ L_i."""
    if len(cases) == 0:
        raise ConfigError("cannot train heads on an empty dataset")
    order = make_rng(seed, "heads-shuffle", epoch).permutation(len(cases))
    params = model.parameters()
    total, seen = 0.0, 0

    for indices in progress(list(iter_batches(order, batch_size)), desc=f"heads epoch {epoch}"):
        volumes, labels = stack_batch([cases[int(i)] for i in indices])
        for param in params:
            param.grad = None
        with Graph() as graph:
            h_list = project_per_label(model.encoder(volumes), model.projections)
            _, losses = classify_per_label(h_list, model.classifiers, labels)
        routed_backward(graph, losses, model)
        trunk_optimizer.step()
        head_optimizer.step()
        total += losses.total.item() * len(indices)
        seen += len(indices)
    return total / seen


def multitask_scores(cases: Sequence[SyntheticCase], model: MultiTaskModel, batch_size: int = 16) -> np.ndarray:
    """Sigmoid scores (N, K) from the per-label classification heads."""
    scores: List[np.ndarray] = []
    with no_grad():
        for batch in iter_batches(list(cases), batch_size):
            volumes, _ = stack_batch(batch)
            logits = model(volumes)
            scores.append(np.concatenate([sigmoid(logit).data for logit in logits], axis=1))
    return np.concatenate(scores, axis=0)
