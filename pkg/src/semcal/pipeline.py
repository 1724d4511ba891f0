"""End-to-end evaluation: quality metrics, semantic scores, and the
calibration report over a loaded evaluation set.

One engine computes ECE/Brier under the three correctness definitions
(traditional n-gram, clap, fense); they differ only in the correctness
vector. The report's headline Brier score is the clap-based one, with
all three retained per definition.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import calibration, similarity, textmetrics
from .confidence import HeadConfig, HeadParams, head_forward, mean_confidence
from .errors import ValidationError
from .tensorio import EvaluationSet

REPORT_SCHEMA_VERSION = 1

CORRECTNESS_DEFINITIONS = ("traditional", "clap", "fense")
FAMILY_BY_DEFINITION = {"clap": "clap", "fense": "sbert"}


@dataclass
class ExampleRow:
    example_id: str
    caption: str
    bleu1: float
    bleu4: float
    cider: float
    clap_s: float
    clap_correct: bool
    fense_s: float
    fense_correct: bool
    traditional_correct: bool
    confidence: float


@dataclass
class EvaluationReport:
    report: dict
    rows: list[ExampleRow]
    bins_by_definition: dict[str, list[calibration.CalibrationBin]]
    scored_by_family: dict[str, similarity.ScoredSet]


def _candidate_confidence(
    eval_set: EvaluationSet,
    record,
    candidate,
    mode: str,
    head: HeadParams | None,
    head_config: HeadConfig | None,
) -> float:
    if mode == "fixed1":
        return 1.0
    if mode == "stored":
        if candidate.mean_confidence is None:
            raise ValidationError(
                f"example {record.example_id!r}: candidate has no stored mean_confidence"
            )
        return candidate.mean_confidence
    if mode == "head":
        if head is None or head_config is None:
            raise ValidationError("confidence mode 'head' requires head parameters")
        hidden = eval_set.hidden_states(candidate)
        token_conf = head_forward(hidden, head, head_config)
        return mean_confidence(token_conf, candidate.token_mask)
    raise ValidationError(f"unknown confidence mode {mode!r}")


def evaluate_set(
    eval_set: EvaluationSet,
    tau: float = similarity.DEFAULT_TAU,
    bins_m: int = 10,
    candidate_index: int = 0,
    confidence_mode: str = "fixed1",
    head: HeadParams | None = None,
    head_config: HeadConfig | None = None,
    smoothing: str = "add1",
) -> EvaluationReport:
    """Score one candidate per example and assemble the full report."""
    if len(eval_set) == 0:
        raise ValidationError("empty evaluation set")
    selector = lambda record: candidate_index

    cand_tokens = []
    refs_tokens = []
    for record in eval_set:
        if not 0 <= candidate_index < len(record.candidates):
            raise ValidationError(
                f"example {record.example_id!r}: candidate index {candidate_index} out of range"
            )
        cand = record.candidates[candidate_index]
        cand_tokens.append(textmetrics.tokenize(cand.caption))
        refs_tokens.append([textmetrics.tokenize(r) for r in record.references])

    cider_result = textmetrics.cider(cand_tokens, refs_tokens)
    clap_scored = similarity.score_set(eval_set, "clap", tau, selector)
    fense_scored = similarity.score_set(eval_set, "sbert", tau, selector)

    rows: list[ExampleRow] = []
    for i, record in enumerate(eval_set):
        cand = record.candidates[candidate_index]
        conf = _candidate_confidence(
            eval_set, record, cand, confidence_mode, head, head_config
        )
        rows.append(
            ExampleRow(
                example_id=record.example_id,
                caption=cand.caption,
                bleu1=textmetrics.bleu(cand_tokens[i], refs_tokens[i], 1, smoothing),
                bleu4=textmetrics.bleu(cand_tokens[i], refs_tokens[i], 4, smoothing),
                cider=cider_result.per_example[i],
                clap_s=clap_scored.scores[i].s,
                clap_correct=clap_scored.scores[i].correct,
                fense_s=fense_scored.scores[i].s,
                fense_correct=fense_scored.scores[i].correct,
                traditional_correct=textmetrics.traditional_correctness(
                    cand_tokens[i], refs_tokens[i]
                ),
                confidence=conf,
            )
        )

    confidences = [r.confidence for r in rows]
    correctness_vectors = {
        "traditional": [r.traditional_correct for r in rows],
        "clap": [r.clap_correct for r in rows],
        "fense": [r.fense_correct for r in rows],
    }
    calibration_block = {}
    bins_by_definition = {}
    for definition, correct in correctness_vectors.items():
        ece_value, bins = calibration.ece(confidences, correct, bins_m)
        calibration_block[definition] = {
            "ece": ece_value,
            "brier": calibration.brier(confidences, correct),
            "bins": [
                {
                    "lo": b.lo,
                    "hi": b.hi,
                    "count": b.count,
                    "count_correct": b.count_correct,
                    "mean_conf": b.mean_conf,
                    "accuracy": b.accuracy,
                }
                for b in bins
            ],
        }
        bins_by_definition[definition] = bins

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "n_examples": len(rows),
        "tau": tau,
        "bins": bins_m,
        "candidate_index": candidate_index,
        "confidence_mode": confidence_mode,
        "quality": {
            "bleu1": float(np.mean([r.bleu1 for r in rows])),
            "bleu4": float(np.mean([r.bleu4 for r in rows])),
            "cider": cider_result.mean,
        },
        "similarity": {
            "clap": float(np.mean([r.clap_s for r in rows])),
            "fense": float(np.mean([r.fense_s for r in rows])),
        },
        "accuracy": {
            "traditional": float(np.mean(correctness_vectors["traditional"])),
            "clap": clap_scored.accuracy,
            "fense": fense_scored.accuracy,
        },
        "avg_confidence": float(np.mean(confidences)),
        "calibration": calibration_block,
    }
    return EvaluationReport(
        report=report,
        rows=rows,
        bins_by_definition=bins_by_definition,
        scored_by_family={"clap": clap_scored, "sbert": fense_scored},
    )


def write_report_json(report: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report_json(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    version = report.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise ValidationError(f"{path}: unsupported report schema_version {version}")
    return report


def write_bins_csv(bins_by_definition: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["definition", "bin", "lo", "hi", "count", "count_correct", "mean_conf", "accuracy"]
        )
        for definition in CORRECTNESS_DEFINITIONS:
            for i, b in enumerate(bins_by_definition[definition]):
                writer.writerow(
                    [definition, i, repr(b.lo), repr(b.hi), b.count, b.count_correct,
                     repr(b.mean_conf), repr(b.accuracy)]
                )


def write_scores_csv(rows: list[ExampleRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "example_id", "caption", "bleu1", "bleu4", "cider",
                "clap_s", "clap_correct", "fense_s", "fense_correct",
                "traditional_correct", "confidence",
            ]
        )
        for r in rows:
            writer.writerow(
                [
                    r.example_id, r.caption, repr(r.bleu1), repr(r.bleu4), repr(r.cider),
                    repr(r.clap_s), int(r.clap_correct), repr(r.fense_s),
                    int(r.fense_correct), int(r.traditional_correct), repr(r.confidence),
                ]
            )


TABLE_ROWS = [
    ("BLEU-1", ("quality", "bleu1")),
    ("BLEU-4", ("quality", "bleu4")),
    ("CIDEr", ("quality", "cider")),
    ("CLAP Similarity", ("similarity", "clap")),
    ("FENSE Similarity", ("similarity", "fense")),
    ("CLAP Accuracy", ("accuracy", "clap")),
    ("FENSE Accuracy", ("accuracy", "fense")),
    ("Traditional ECE", ("calibration", "traditional", "ece")),
    ("CLAP ECE", ("calibration", "clap", "ece")),
    ("FENSE ECE", ("calibration", "fense", "ece")),
    ("Brier Score", ("calibration", "clap", "brier")),
    ("Avg. Confidence", ("avg_confidence",)),
]


def _dig(report: dict, path: tuple) -> float:
    value = report
    for key in path:
        value = value[key]
    return value


def format_table(reports: list[tuple[str, dict]]) -> str:
    """Side-by-side metric table for one or more labeled reports."""
    labels = [label for label, _ in reports]
    name_width = max(len(name) for name, _ in TABLE_ROWS)
    col_width = max(12, *(len(label) for label in labels))
    lines = [
        "  ".join(["Metric".ljust(name_width)] + [label.rjust(col_width) for label in labels])
    ]
    for name, path in TABLE_ROWS:
        cells = [f"{_dig(report, path):.3f}".rjust(col_width) for _, report in reports]
        lines.append("  ".join([name.ljust(name_width)] + cells))
    return "\n".join(lines)
