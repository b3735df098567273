"""Sequential window evaluation, majority voting, metrics, run aggregation.

A record is classified by predicting every non-overlapping window in order
and voting on the hard labels; ties fall to the class with the larger summed
softmax probability, and an exact residual tie resolves to class 1 (a
screening decision prefers sensitivity). Prefix decisions replay the vote
over only the first n' windows, modeling an early warning.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import VideoRecord
from .errors import (
    AggregationError,
    ContractError,
    EmptyVoteError,
    TooShortError,
)
from .fusion import Prediction
from .windowing import (
    enumerate_eval_windows,
    extract_window,
    window_presence_ratio,
)

__all__ = [
    "VoteResult",
    "Metrics",
    "vote",
    "prefix_decision",
    "predict_record",
    "compute_metrics",
    "aggregate_runs",
    "write_predictions",
    "write_window_predictions",
    "write_metrics",
]


@dataclass
class VoteResult:
    """All window predictions of one record plus the voted decision."""

    record_id: str
    true_label: int
    window_predictions: list[Prediction]
    final_label: int
    vote_counts: tuple[int, int]  # (class 0, class 1)
    prefix_labels: list[int]  # decision after 1..n windows
    flagged: bool = False  # fallback was used (too short or fully gated)


@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    support: tuple[int, int]  # true count per class

    def as_dict(self) -> dict[str, float]:
        return {"precision": self.precision, "recall": self.recall,
                "f1": self.f1, "accuracy": self.accuracy}


def vote(predictions: Sequence[Prediction]) -> int:
    """Modal class of the window labels.

    Ties break toward the class with the larger softmax probability summed
    over all windows; a residual exact tie resolves to class 1.
    """
    if not predictions:
        raise EmptyVoteError("cannot vote over zero window predictions")
    counts = [0, 0]
    for pred in predictions:
        counts[pred.label] += 1
    if counts[0] != counts[1]:
        return int(counts[1] > counts[0])
    prob_sums = [0.0, 0.0]
    for pred in predictions:
        prob_sums[0] += float(pred.probabilities[0])
        prob_sums[1] += float(pred.probabilities[1])
    if prob_sums[0] > prob_sums[1]:
        return 0
    return 1


def prefix_decision(result: VoteResult, n_prime: int) -> int:
    """The vote over only the first ``n_prime`` window predictions."""
    n = len(result.window_predictions)
    if not 1 <= n_prime <= n:
        raise ContractError(f"prefix length {n_prime} outside [1, {n}]")
    return vote(result.window_predictions[:n_prime])


def predict_record(record: VideoRecord, model, window_seconds: float,
                   presence_threshold: float = 0.0,
                   gate_modality: str | None = None) -> VoteResult:
    """Vote over sequential non-overlapping windows of one record.

    Windows whose gate-modality presence ratio falls below the threshold are
    skipped. A record that is shorter than one window is evaluated on a
    single full-span window; a record whose windows are all gated out is
    evaluated on its highest-ratio window. Both fallbacks set ``flagged`` so
    no record is ever dropped silently.
    """
    flagged = False
    try:
        windows = enumerate_eval_windows(record, window_seconds)
    except TooShortError:
        windows = [extract_window(record, 0.0, record.span_seconds)]
        flagged = True
    if gate_modality is not None and not flagged:
        kept = [w for w in windows
                if window_presence_ratio(w, gate_modality) >= presence_threshold]
        if not kept:
            ratios = [window_presence_ratio(w, gate_modality) for w in windows]
            kept = [windows[int(np.argmax(ratios))]]
            flagged = True
        windows = kept
    predictions = [model.predict_window(w) for w in windows]
    final = vote(predictions)
    counts = (sum(p.label == 0 for p in predictions),
              sum(p.label == 1 for p in predictions))
    prefixes = [vote(predictions[:i + 1]) for i in range(len(predictions))]
    return VoteResult(record.id, record.label, predictions, final, counts,
                      prefixes, flagged)


def compute_metrics(final_labels: Sequence[int], true_labels: Sequence[int],
                    positive_class: int = 1) -> Metrics:
    """Binary precision/recall/F1/accuracy for the positive class."""
    if len(final_labels) != len(true_labels):
        raise ContractError(
            f"{len(final_labels)} predictions vs {len(true_labels)} labels")
    if not final_labels:
        raise ContractError("cannot score zero records")
    pred = np.asarray(final_labels)
    true = np.asarray(true_labels)
    tp = int(((pred == positive_class) & (true == positive_class)).sum())
    fp = int(((pred == positive_class) & (true != positive_class)).sum())
    fn = int(((pred != positive_class) & (true == positive_class)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    accuracy = float((pred == true).mean())
    support = (int((true != positive_class).sum()),
               int((true == positive_class).sum()))
    return Metrics(precision, recall, f1, accuracy, support)


def aggregate_runs(runs: Sequence[Metrics]) -> dict[str, tuple[float, float]]:
    """Mean and sample (n-1) standard deviation of each metric across runs."""
    if len(runs) < 2:
        raise AggregationError(f"aggregation needs >= 2 runs, got {len(runs)}")
    out: dict[str, tuple[float, float]] = {}
    for key in ("precision", "recall", "f1", "accuracy"):
        values = np.array([m.as_dict()[key] for m in runs], dtype=np.float64)
        out[key] = (float(values.mean()), float(values.std(ddof=1)))
    return out


# -- result files -------------------------------------------------------------


def write_predictions(path, results: Sequence[VoteResult]) -> None:
    lines = ["record_id\ttrue_label\tfinal_label\tn_windows\tvote_pos\tvote_neg"]
    for r in results:
        lines.append(f"{r.record_id}\t{r.true_label}\t{r.final_label}"
                     f"\t{len(r.window_predictions)}\t{r.vote_counts[1]}"
                     f"\t{r.vote_counts[0]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_window_predictions(path, results: Sequence[VoteResult]) -> None:
    lines = ["record_id\twindow_index\tstart_s\tp0\tp1\tlabel"]
    for r in results:
        for i, p in enumerate(r.window_predictions):
            lines.append(f"{r.record_id}\t{i}\t{p.window_start:.6f}"
                         f"\t{p.probabilities[0]:.9f}\t{p.probabilities[1]:.9f}"
                         f"\t{p.label}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_metrics(path, aggregated: dict[str, tuple[float, float]]) -> None:
    lines = [f"{name}\t{mean:.17g}\t{std:.17g}"
             for name, (mean, std) in aggregated.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
