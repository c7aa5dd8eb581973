# agrg/evaluation/evaluate.py

"""
Corpus evaluation of generated reports against a reference split.

A generation file (JSON-lines, one record per case) is aligned with the reference
cases by case id, then scored with the NLG metrics (corpus BLEU-4, mean ROUGE-L F,
mean METEOR-lite), the clinical efficacy metrics (anchor-matched labels vs ground
truth) and the classifier metrics of the upstream scores. Several runs (seeds) are
aggregated to mean ± std.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from agrg.errors import DatasetFormatError
from agrg.evaluation.metrics import bleu4, ce_metrics, classifier_metrics, meteor_lite, rouge_l
from agrg.ingestion.common_utils import word_tokenize
from agrg.ingestion.dataset_io import read_jsonl, write_json
from agrg.ingestion.synth import LabelRegistry, SyntheticCase

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["BLEU-4", "METEOR", "ROUGE-L", "P", "R", "F1"]

PathLike = Union[str, Path]

# --- Model Definitions (Pydantic) ---

class LabelBreakdown(BaseModel):
    label: int
    name: str
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    present: bool


class MetricsReport(BaseModel):
    bleu4: float
    meteor: float
    rouge_l: float
    precision: float
    recall: float
    f1: float
    n_cases: int
    n_empty: int
    per_label: List[LabelBreakdown] = Field(default_factory=list)
    classifier: Optional[Dict[str, Any]] = None
    metadata: Dict[str, Any] = Field(default_factory=dict)

    def table_row(self) -> Dict[str, float]:
        return dict(zip(TABLE_COLUMNS, (self.bleu4, self.meteor, self.rouge_l,
                                        self.precision, self.recall, self.f1)))

# ==============================================================================
# 1. ALIGNMENT
# ==============================================================================

def align_records(records: Sequence[dict], references: Sequence[SyntheticCase]) -> List[Tuple[dict, SyntheticCase]]:
    """Pairs every generation record with its reference case, in reference order."""
    by_id: Dict[int, dict] = {}
    for record in records:
        case_id = int(record["case_id"])
        if case_id in by_id:
            raise DatasetFormatError(f"case id {case_id} appears twice in the generations")
        by_id[case_id] = record
    reference_ids = [int(case.seed) for case in references]
    missing = [case_id for case_id in reference_ids if case_id not in by_id]
    extra = sorted(set(by_id) - set(reference_ids))
    if missing or extra:
        raise DatasetFormatError(f"generations do not match the reference split: "
                                 f"{len(missing)} missing ids (e.g. {missing[:3]}), "
                                 f"{len(extra)} unknown ids (e.g. {extra[:3]})")
    return [(by_id[case_id], case) for case_id, case in zip(reference_ids, references)]

# ==============================================================================
# 2. SINGLE-RUN EVALUATION
# ==============================================================================

def _pairwise_mean(scores: Sequence[float]) -> float:
    # a corpus of normal studies only matches its references perfectly
    return float(np.mean(scores)) if scores else 1.0


def evaluate_records(records: Sequence[dict], references: Sequence[SyntheticCase], registry: LabelRegistry,
                     metadata: Optional[Mapping[str, Any]] = None) -> MetricsReport:
    pairs = align_records(records, references)
    if not pairs:
        raise DatasetFormatError("cannot evaluate an empty corpus")
    candidates = [word_tokenize(record["report"]) for record, _ in pairs]
    reference_tokens = [word_tokenize(case.report) for _, case in pairs]

    scored = [(cand, ref) for cand, ref in zip(candidates, reference_tokens) if cand or ref]
    rouge = [rouge_l(cand, ref)[2] for cand, ref in scored]
    meteor = [meteor_lite(cand, ref) for cand, ref in scored]

    reference_labels = np.stack([case.labels for _, case in pairs]).astype(int)
    ce = ce_metrics([record["report"] for record, _ in pairs], reference_labels, registry)
    per_label = [
        LabelBreakdown(label=i, name=registry.names[i], tp=int(ce.confusion[i, 0]), fp=int(ce.confusion[i, 1]),
                       fn=int(ce.confusion[i, 2]), tn=int(ce.confusion[i, 3]), precision=float(ce.precision[i]),
                       recall=float(ce.recall[i]), f1=float(ce.f1[i]), present=bool(ce.present[i]))
        for i in range(registry.k)
    ]

    classifier = None
    if all("scores" in record for record, _ in pairs):
        scores = np.array([record["scores"] for record, _ in pairs], dtype=np.float64)
        selected = np.zeros_like(reference_labels)
        for row, (record, _) in enumerate(pairs):
            for entry in record.get("selected", []):
                selected[row, int(entry["label"])] = 1
        classifier = classifier_metrics(scores, selected, reference_labels)

    first = pairs[0][0]
    meta = {key: first[key] for key in ("config_hash", "seed", "variant") if key in first}
    meta.update(metadata or {})
    report = MetricsReport(
        bleu4=bleu4(candidates, reference_tokens),
        meteor=_pairwise_mean(meteor),
        rouge_l=_pairwise_mean(rouge),
        precision=ce.macro_precision,
        recall=ce.macro_recall,
        f1=ce.macro_f1,
        n_cases=len(pairs),
        n_empty=sum(1 for cand in candidates if not cand),
        per_label=per_label,
        classifier=classifier,
        metadata=meta,
    )
    logger.info(f"[Evaluate] {report.n_cases} cases: BLEU-4={report.bleu4:.4f} METEOR={report.meteor:.4f} "
                f"ROUGE-L={report.rouge_l:.4f} CE P/R/F1={report.precision:.4f}/{report.recall:.4f}/{report.f1:.4f}")
    return report


def evaluate_corpus(generations: PathLike, references: Sequence[SyntheticCase], registry: LabelRegistry) -> MetricsReport:
    """Scores one generation file against the reference split."""
    records = read_jsonl(generations)
    return evaluate_records(records, references, registry, metadata={"generations": str(generations)})

# ==============================================================================
# 3. MULTI-RUN AGGREGATION & TABLES
# ==============================================================================

def aggregate_runs(reports: Sequence[MetricsReport]) -> Dict[str, Dict[str, float]]:
    """Mean and population std (ddof=0) of every table column across runs."""
    if not reports:
        raise ValueError("no runs to aggregate")
    frame = pd.DataFrame([report.table_row() for report in reports], columns=TABLE_COLUMNS)
    return {column: {"mean": float(frame[column].mean()), "std": float(frame[column].std(ddof=0))}
            for column in TABLE_COLUMNS}


def format_table(rows: Mapping[str, Mapping[str, Mapping[str, float]]]) -> str:
    """Plain-text table, one row per run/variant, cells as `mean ± std` (×100, two decimals)."""
    cells = {
        name: [f"{100 * stats[c]['mean']:.2f} ± {100 * stats[c]['std']:.2f}" for c in TABLE_COLUMNS]
        for name, stats in rows.items()
    }
    frame = pd.DataFrame.from_dict(cells, orient="index", columns=TABLE_COLUMNS)
    return frame.to_string() + "\n"


def write_metrics(out_dir: PathLike, reports: Sequence[MetricsReport], name: str = "metrics",
                  label: str = "run") -> Dict[str, Any]:
    """Writes `<name>.json` (every run plus the aggregate) and `<name>.txt`."""
    out_dir = Path(out_dir)
    aggregate = aggregate_runs(reports)
    payload = {"runs": [report.model_dump() for report in reports], "aggregate": aggregate}
    write_json(out_dir / f"{name}.json", payload)
    (out_dir / f"{name}.txt").write_text(format_table({label: aggregate}), encoding="utf-8")
    logger.info(f"[Evaluate] ✓ wrote {name}.json and {name}.txt to {out_dir}")
    return payload
