# agrg/core/generation_task.py

"""
Handles report generation: from a preprocessed volume to one sentence per predicted
abnormality, assembled into a report.

The upstream network (pre-trained encoder + multi-label head, or encoder + per-label
heads) scores every label; labels above their calibrated threshold are selected, each
selected label is turned into a conditioning vector by the text projector and the decoder
writes its sentence by beam search.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from agrg.core.autodiff import Tensor, concat, gelu, no_grad, sigmoid
from agrg.core.encoder import PretrainModel
from agrg.core.heads import MultiTaskModel, ThresholdVector, classify_logits, project_per_label, select_abnormal
from agrg.core.nn import Linear, Module
from agrg.core.textgen import DecoderConfig, TextDecoder, Vocabulary, beam_search, detokenize
from agrg.errors import LabelError, MissingPrerequisiteError
from agrg.ingestion.common_utils import parallel_map
from agrg.ingestion.synth import LabelRegistry, SyntheticCase

logger = logging.getLogger(__name__)

# ==============================================================================
# 1. VARIANTS & CONDITIONING
# ==============================================================================

VARIANTS: Dict[str, tuple] = {
    "baseline": (False, False),
    "multitask": (True, False),
    "expansion": (False, True),
    "full": (True, True),
}


class VariantConfig(BaseModel):
    """Which upstream features condition the decoder."""
    multitask: bool = True
    expand_embedding: bool = True

    @classmethod
    def named(cls, name: str) -> "VariantConfig":
        if name not in VARIANTS:
            raise ValueError(f"unknown variant '{name}', expected one of {sorted(VARIANTS)}")
        multitask, expand = VARIANTS[name]
        return cls(multitask=multitask, expand_embedding=expand)

    @property
    def name(self) -> str:
        return next(name for name, flags in VARIANTS.items() if flags == (self.multitask, self.expand_embedding))

    @property
    def upstream_stage(self) -> str:
        return "heads" if self.multitask else "pretrain"


def expand_embedding(h_i: np.ndarray, i: int, k: int, d_i: Optional[int] = None) -> np.ndarray:
    """[0, ..., 0, h_i, 0, ..., 0] with h_i in slot i of K slots."""
    h_i = np.asarray(h_i, dtype=np.float64).reshape(-1)
    d_i = h_i.shape[0] if d_i is None else d_i
    if h_i.shape[0] != d_i:
        raise LabelError(f"embedding has {h_i.shape[0]} components, expected {d_i}")
    if not 0 <= i < k:
        raise LabelError(f"label index {i} outside 0..{k - 1}")
    expanded = np.zeros(k * d_i)
    expanded[i * d_i:(i + 1) * d_i] = h_i
    return expanded


def projector_input_dim(variant: VariantConfig, k: int, d_h: int, d_i: int) -> int:
    width = d_i if variant.multitask else d_h
    return k * width if variant.expand_embedding else width


class TextProjector(Module):
    """Text projector: conditioning features -> e in the decoder's width (one GELU hidden layer)."""

    def __init__(self, in_features: int, d_t: int, rng: np.random.Generator):
        self.hidden = Linear(in_features, d_t, rng)
        self.out = Linear(d_t, d_t, rng)

    def forward(self, features: Tensor) -> Tensor:
        return self.out(gelu(self.hidden(features)))


def project_to_text(features: np.ndarray, projector: TextProjector) -> np.ndarray:
    with no_grad():
        return projector(Tensor(np.asarray(features).reshape(1, -1))).data[0]


@dataclass
class UpstreamOutputs:
    h: np.ndarray                       # (B, d_h)
    scores: np.ndarray                  # (B, K) sigmoid scores used for selection
    per_label: Optional[np.ndarray]     # (B, K, d_i) for multi-task upstreams


def upstream_outputs(upstream: Union[PretrainModel, MultiTaskModel], volumes: np.ndarray) -> UpstreamOutputs:
    """Runs the frozen upstream network without recording a graph."""
    with no_grad():
        h = upstream.encoder(volumes)
        if isinstance(upstream, MultiTaskModel):
            h_list = project_per_label(h, upstream.projections)
            scores = sigmoid(concat(classify_logits(h_list, upstream.classifiers), axis=1)).data
            return UpstreamOutputs(h.data, scores, np.stack([h_i.data for h_i in h_list], axis=1))
        return UpstreamOutputs(h.data, sigmoid(upstream.psi(h)).data, None)


def conditioning_features(variant: VariantConfig, outputs: UpstreamOutputs, row: int, label: int) -> np.ndarray:
    """Projector input for one selected label of one case."""
    k = outputs.scores.shape[1]
    base = outputs.per_label[row, label] if variant.multitask else outputs.h[row]
    return expand_embedding(base, label, k) if variant.expand_embedding else np.array(base)

# ==============================================================================
# 2. REPORT BUNDLE & GENERATION
# ==============================================================================

@dataclass
class ReportEntry:
    label: int
    score: float
    sentence: str


@dataclass
class GeneratedReport:
    entries: List[ReportEntry]
    scores: np.ndarray
    report: str = ""
    empty: bool = True

    @classmethod
    def assemble(cls, entries: Sequence[ReportEntry], scores: np.ndarray) -> "GeneratedReport":
        ordered = sorted(entries, key=lambda entry: entry.label)
        report = " ".join(entry.sentence for entry in ordered)
        return cls(entries=ordered, scores=np.asarray(scores), report=report, empty=not ordered)

    def to_record(self, case_id: int, registry: LabelRegistry) -> dict:
        return {
            "case_id": int(case_id),
            "selected": [{"label": entry.label, "name": registry.names[entry.label],
                          "score": float(entry.score), "sentence": entry.sentence} for entry in self.entries],
            "report": self.report,
            "empty": self.empty,
            "scores": [float(score) for score in self.scores],
        }


@dataclass
class ReportModel:
    """Everything inference needs: upstream, thresholds, text projector, decoder and vocabulary."""
    registry: LabelRegistry
    variant: VariantConfig
    upstream: Union[PretrainModel, MultiTaskModel]
    projector: TextProjector
    decoder: TextDecoder
    vocab: Vocabulary
    decoder_config: DecoderConfig
    thresholds: Optional[ThresholdVector] = None
    decoder_trained: bool = False
    metadata: dict = field(default_factory=dict)


def generate_report(volume: np.ndarray, model: ReportModel, order: Optional[Sequence[int]] = None,
                    outputs: Optional[UpstreamOutputs] = None, row: int = 0) -> GeneratedReport:
    """
    encode -> score -> select (inference) -> per label: expand, project, beam search -> assemble.

    `order` permutes the order in which selected labels are processed; the assembled
    report is always in ascending label order.
    """
    if model.thresholds is None:
        raise MissingPrerequisiteError("no calibrated thresholds in the model bundle")
    if not model.decoder_trained:
        raise MissingPrerequisiteError("the decoder has not been trained")
    if outputs is None:
        outputs = upstream_outputs(model.upstream, volume)
        row = 0
    scores = outputs.scores[row]
    selected = select_abnormal(scores, model.thresholds.values, mode="inference")
    if order is not None:
        selected = [label for label in order if label in selected]

    config = model.decoder_config
    entries = []
    for label in selected:
        e = project_to_text(conditioning_features(model.variant, outputs, row, label), model.projector)
        hypothesis = beam_search(model.decoder, e, config.beam, config.max_gen_len, config.length_alpha)
        entries.append(ReportEntry(label, float(scores[label]), detokenize(hypothesis.words(), model.vocab)))
    return GeneratedReport.assemble(entries, scores)

# ==============================================================================
# 3. THE REPORT GENERATOR CLASS
# ==============================================================================

class ReportGenerator:
    """
    Generates reports for whole splits from one trained bundle.
    """
    def __init__(self, model: ReportModel, threads: int = 1):
        """
        Checks the bundle is complete before any case is processed.
        """
        logger.info(f"[Generate] initializing report generator ({model.variant.name} variant)")
        if model.thresholds is None:
            raise MissingPrerequisiteError("checkpoint carries no thresholds; train the upstream stage first")
        if not model.decoder_trained:
            raise MissingPrerequisiteError("checkpoint carries no trained decoder")
        self.model = model
        self.threads = max(1, threads)

    def generate_case(self, case: SyntheticCase) -> dict:
        report = generate_report(case.volume, self.model)
        return report.to_record(case.seed, self.model.registry)

    def generate_for_cases(self, cases: Sequence[SyntheticCase]) -> List[dict]:
        """
        Generates every case (in parallel when threads > 1); records keep input order.
        """
        records = parallel_map(self.generate_case, list(cases), threads=self.threads, desc="generate")
        empty = sum(record["empty"] for record in records)
        logger.info(f"[Generate] ✓ {len(records)} reports ({empty} empty)")
        return records
