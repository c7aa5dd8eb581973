# agrg/evaluation/metrics.py

"""
Report metrics.

NLG metrics compare generated and reference text on the shared word tokenizer:
corpus BLEU-4, ROUGE-L (LCS) and METEOR-lite (exact + suffix-stem alignment, no
synonym lexicon). Clinical efficacy metrics extract abnormality labels from text
by anchor-phrase matching and score them per label against ground truth.
"""

import math
import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from nltk.util import ngrams
from sklearn.metrics import multilabel_confusion_matrix, roc_auc_score

from agrg.ingestion.common_utils import word_tokenize
from agrg.ingestion.synth import LabelRegistry

BLEU_EPS = 1e-9
BLEU_ORDER = 4
ALIGN_MAX_NODES = 50_000

Text = Union[str, Sequence[str]]


def _tokens(text: Text) -> List[str]:
    return word_tokenize(text) if isinstance(text, str) else list(text)


def _check_aligned(candidates: Sequence, references: Sequence) -> None:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates for {len(references)} references")

# ==============================================================================
# 1. BLEU-4
# ==============================================================================

def bleu4(candidates: Sequence[Text], references: Sequence[Text]) -> float:
    """
    Corpus BLEU-4: clipped n-gram counts summed over the corpus before the ratios,
    geometric mean of p_1..p_4, brevity penalty. Zero counts are replaced by 1e-9
    (and empty denominators by 1), so zero overlap gives ~0 instead of undefined.
    """
    _check_aligned(candidates, references)
    if not candidates:
        raise ValueError("BLEU needs a nonempty corpus")
    matched = [0] * BLEU_ORDER
    total = [0] * BLEU_ORDER
    candidate_length = reference_length = 0

    for candidate, reference in zip(candidates, references):
        cand, ref = _tokens(candidate), _tokens(reference)
        candidate_length += len(cand)
        reference_length += len(ref)
        for n in range(1, BLEU_ORDER + 1):
            cand_counts = Counter(ngrams(cand, n))
            ref_counts = Counter(ngrams(ref, n))
            matched[n - 1] += sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
            total[n - 1] += sum(cand_counts.values())

    if candidate_length == 0 and reference_length == 0:
        return 1.0
    if candidate_length == 0:
        return 0.0
    log_precision = sum(math.log((m or BLEU_EPS) / (t or 1)) for m, t in zip(matched, total)) / BLEU_ORDER
    brevity = 1.0 if candidate_length > reference_length else math.exp(1.0 - reference_length / candidate_length)
    return min(1.0, brevity * math.exp(log_precision))

# ==============================================================================
# 2. ROUGE-L
# ==============================================================================

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b):
            current.append(previous[j] + 1 if token == other else max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l(candidate: Text, reference: Text) -> Tuple[float, float, float]:
    """LCS precision, recall and F (β = 1); (0, 0, 0) when either side is empty."""
    cand, ref = _tokens(candidate), _tokens(reference)
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0, 0.0, 0.0
    precision, recall = lcs / len(cand), lcs / len(ref)
    return precision, recall, 2 * precision * recall / (precision + recall)

# ==============================================================================
# 3. METEOR-LITE
# ==============================================================================

@lru_cache(maxsize=4096)
def stem(word: str) -> str:
    """Fixed suffix stripper for -ing, -ed, -es and -s; keeps at least three characters."""
    if word.endswith("ing") and len(word) - 3 >= 3:
        return word[:-3]
    if word.endswith("ed") and len(word) - 2 >= 3:
        return word[:-2]
    if word.endswith("es") and len(word) - 2 >= 3 and word[:-2].endswith(("s", "x", "z", "ch", "sh")):
        return word[:-2]
    if word.endswith("s") and not word.endswith("ss") and len(word) - 1 >= 3:
        return word[:-1]
    return word


def align(candidate: Sequence[str], reference: Sequence[str],
          max_nodes: int = ALIGN_MAX_NODES) -> List[Tuple[int, int]]:
    """
    One-to-one unigram alignment with the most exact matches, then the most stem
    matches, then the fewest chunks.

    Depth-first branch and bound over candidate tokens, trying the continuation of the
    previous chunk first. The search is exhaustive unless it visits more than
    `max_nodes` states; then the best alignment found so far is returned.
    Returns (candidate index, reference index) pairs sorted by candidate index.
    """
    n = len(candidate)
    cand_stems = [stem(word) for word in candidate]
    ref_stems = [stem(word) for word in reference]
    options = [sorted((j for j, key in enumerate(ref_stems) if key == cand_stems[i]),
                      key=lambda j, i=i: (reference[j] != candidate[i], j))
               for i in range(n)]
    words_after = [Counter(candidate[i:]) for i in range(n + 1)]
    stems_after = [Counter(cand_stems[i:]) for i in range(n + 1)]
    free_words, free_stems = Counter(reference), Counter(ref_stems)

    # links[i]: at most one chunk continuation into candidate i, if any diagonal pair allows it
    link_bound = [0] * (n + 1)
    for i in reversed(range(n)):
        possible = i > 0 and any(ref_stems[j - 1] == cand_stems[i - 1] and ref_stems[j] == cand_stems[i]
                                 for j in range(1, len(reference)))
        link_bound[i] = link_bound[i + 1] + int(possible)

    used = [False] * len(reference)
    chosen: List[Optional[int]] = [None] * n
    best_links, best_pairs, nodes = -1, [], 0

    def keeps_maximum(i: int, j: int) -> bool:
        # a stem match must not cost an exact match elsewhere
        word, other = candidate[i], reference[j]
        return other == word or (words_after[i][word] > free_words[word]
                                 and free_words[other] > words_after[i + 1][other])

    def visit(i: int, links: int) -> None:
        nonlocal best_links, best_pairs, nodes
        if links + link_bound[i] <= best_links or (best_links >= 0 and nodes >= max_nodes):
            return
        nodes += 1
        if i == n:
            best_links = links
            best_pairs = [(k, j) for k, j in enumerate(chosen) if j is not None]
            return
        word, key = candidate[i], cand_stems[i]
        follow = chosen[i - 1] + 1 if i and chosen[i - 1] is not None else None
        for j in sorted(options[i], key=lambda j: j != follow):
            if used[j] or not keeps_maximum(i, j):
                continue
            used[j], chosen[i] = True, j
            free_words[reference[j]] -= 1
            free_stems[key] -= 1
            visit(i + 1, links + int(j == follow))
            used[j], chosen[i] = False, None
            free_words[reference[j]] += 1
            free_stems[key] += 1
        # leaving token i unmatched is allowed only if no match is lost by it
        if words_after[i][word] > free_words[word] and stems_after[i][key] > free_stems[key]:
            visit(i + 1, links)

    visit(0, 0)
    return best_pairs


def count_chunks(alignment: Sequence[Tuple[int, int]]) -> int:
    chunks = 0
    previous: Optional[Tuple[int, int]] = None
    for i, j in alignment:
        if previous is None or i != previous[0] + 1 or j != previous[1] + 1:
            chunks += 1
        previous = (i, j)
    return chunks


def meteor_lite(candidate: Text, reference: Text) -> float:
    """F_mean = 10PR / (R + 9P), scaled by 1 - 0.5 (chunks / matches)^3."""
    cand, ref = _tokens(candidate), _tokens(reference)
    alignment = align(cand, ref)
    matches = len(alignment)
    if matches == 0:
        return 0.0
    precision, recall = matches / len(cand), matches / len(ref)
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    penalty = 0.5 * (count_chunks(alignment) / matches) ** 3
    return f_mean * (1.0 - penalty)

# ==============================================================================
# 4. CLINICAL EFFICACY
# ==============================================================================

@lru_cache(maxsize=64)
def _anchor_patterns(names: Tuple[str, ...]) -> Tuple[re.Pattern, ...]:
    return tuple(re.compile(r"\b" + r"\s+".join(map(re.escape, name.split())) + r"\b", re.IGNORECASE)
                 for name in names)


def extract_labels(report: str, registry: LabelRegistry) -> np.ndarray:
    """Label i is positive iff the report contains label i's name (case-insensitive, whole words)."""
    return np.array([1 if pattern.search(report) else 0 for pattern in _anchor_patterns(registry.names)],
                    dtype=np.uint8)


def _safe_ratio(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    numerator = np.asarray(numerator, dtype=np.float64)
    denominator = np.asarray(denominator, dtype=np.float64)
    return np.divide(numerator, denominator, out=np.zeros_like(numerator), where=denominator > 0)


@dataclass
class CEReport:
    confusion: np.ndarray       # (K, 4): TP, FP, FN, TN
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    present: np.ndarray         # labels with at least one ground-truth positive
    macro_precision: float
    macro_recall: float
    macro_f1: float


def label_scores(y_true: np.ndarray, y_pred: np.ndarray) -> CEReport:
    """Per-label P/R/F1 (0/0 := 0) and macro averages over labels present in y_true."""
    y_true = np.atleast_2d(np.asarray(y_true, dtype=int))
    y_pred = np.atleast_2d(np.asarray(y_pred, dtype=int))
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label matrices {y_true.shape} and {y_pred.shape} do not align")
    matrices = multilabel_confusion_matrix(y_true, y_pred, labels=list(range(y_true.shape[1])))
    tn, fp, fn, tp = (matrices[:, a, b] for a, b in ((0, 0), (0, 1), (1, 0), (1, 1)))
    precision = _safe_ratio(tp, tp + fp)
    recall = _safe_ratio(tp, tp + fn)
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    present = (tp + fn) > 0

    def macro(values: np.ndarray) -> float:
        return float(values[present].mean()) if present.any() else 0.0

    return CEReport(confusion=np.stack([tp, fp, fn, tn], axis=1), precision=precision, recall=recall, f1=f1,
                    present=present, macro_precision=macro(precision), macro_recall=macro(recall),
                    macro_f1=macro(f1))


def ce_metrics(predicted_reports: Sequence[str], reference_labels: np.ndarray, registry: LabelRegistry) -> CEReport:
    reference_labels = np.atleast_2d(np.asarray(reference_labels))
    if len(predicted_reports) != reference_labels.shape[0]:
        raise ValueError(f"{len(predicted_reports)} reports for {reference_labels.shape[0]} label rows")
    predicted = np.stack([extract_labels(report, registry) for report in predicted_reports]) \
        if predicted_reports else np.zeros((0, registry.k), dtype=np.uint8)
    return label_scores(reference_labels, predicted)

# ==============================================================================
# 5. CLASSIFIER METRICS
# ==============================================================================

def classifier_metrics(scores: np.ndarray, predicted: np.ndarray, labels: np.ndarray) -> Dict[str, object]:
    """
    Metrics of the upstream classifier itself: AUROC from the raw scores (labels with
    both classes only), accuracy and P/R/F1 of the thresholded predictions, macro and
    label-frequency weighted.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=int))
    predicted = np.atleast_2d(np.asarray(predicted, dtype=int))
    report = label_scores(labels, predicted)

    auroc = np.full(labels.shape[1], np.nan)
    for i in range(labels.shape[1]):
        if 0 < labels[:, i].sum() < labels.shape[0]:
            auroc[i] = roc_auc_score(labels[:, i], scores[:, i])
    accuracy = (labels == predicted).mean(axis=0)
    support = labels.sum(axis=0).astype(np.float64)
    weights = support / support.sum() if support.sum() > 0 else np.zeros_like(support)

    return {
        "auroc": [None if np.isnan(value) else float(value) for value in auroc],
        "macro_auroc": float(np.nanmean(auroc)) if np.any(~np.isnan(auroc)) else None,
        "accuracy": accuracy.tolist(),
        "precision": report.precision.tolist(),
        "recall": report.recall.tolist(),
        "f1": report.f1.tolist(),
        "macro_precision": report.macro_precision,
        "macro_recall": report.macro_recall,
        "macro_f1": report.macro_f1,
        "weighted_precision": float(weights @ report.precision),
        "weighted_recall": float(weights @ report.recall),
        "weighted_f1": float(weights @ report.f1),
    }
