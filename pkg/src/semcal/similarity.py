"""Cosine similarity and thresholded semantic correctness.

A candidate caption's semantic score is its maximum cosine similarity
against the reference embeddings of the same family; it counts as
correct when the score meets the threshold tau (boundary inclusive).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ValidationError
from .tensorio import ROLE_CANDIDATES, ROLE_REFERENCES, EvaluationSet, ExampleRecord

DEFAULT_TAU = 0.6


@dataclass(frozen=True)
class Embedding:
    """A caption embedding in a named family ("clap" or "sbert")."""

    family: str
    values: np.ndarray


@dataclass(frozen=True)
class SemanticScore:
    family: str
    s: float
    correct: bool
    tau: float


def _check_vector(v: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValidationError(f"{name} must be a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} contains non-finite values")
    return v


def cosine(a: Embedding, b: Embedding) -> float:
    """Cosine similarity of two same-family embeddings, clamped to [-1, 1]."""
    if a.family != b.family:
        raise ValidationError(f"family mismatch: {a.family!r} vs {b.family!r}")
    va = _check_vector(a.values, "a")
    vb = _check_vector(b.values, "b")
    if va.shape != vb.shape:
        raise ValidationError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("zero-norm embedding")
    return float(np.clip(float(va @ vb) / (na * nb), -1.0, 1.0))


def max_ref_similarity(cand: Embedding, refs: list[Embedding]) -> float:
    """Maximum cosine similarity of cand against a non-empty reference list."""
    if not refs:
        raise ValidationError("empty reference list")
    return max(cosine(cand, ref) for ref in refs)


def correctness(s: float, tau: float) -> bool:
    """True iff the score meets the threshold (s >= tau)."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau {tau} outside [0,1]")
    return s >= tau


@dataclass
class ScoredSet:
    scores: list[SemanticScore]
    accuracy: float


def score_set(
    eval_set: EvaluationSet,
    family: str,
    tau: float = DEFAULT_TAU,
    candidate_selector: Callable[[ExampleRecord], int] | None = None,
) -> ScoredSet:
    """Score one selected candidate per example against its references.

    candidate_selector maps a record to a candidate index; default is
    the first candidate. Returns per-example scores in manifest order
    plus accuracy = mean(correct).
    """
    if len(eval_set) == 0:
        raise ValidationError("empty evaluation set")
    select = candidate_selector or (lambda record: 0)
    scores: list[SemanticScore] = []
    for record in eval_set:
        idx = select(record)
        if not 0 <= idx < len(record.candidates):
            raise ValidationError(
                f"example {record.example_id!r}: candidate index {idx} out of range"
            )
        cand_rows = eval_set.embeddings(record, family, ROLE_CANDIDATES)
        ref_rows = eval_set.embeddings(record, family, ROLE_REFERENCES)
        cand = Embedding(family, cand_rows[idx])
        refs = [Embedding(family, row) for row in ref_rows]
        s = max_ref_similarity(cand, refs)
        scores.append(SemanticScore(family=family, s=s, correct=correctness(s, tau), tau=tau))
    accuracy = float(sum(1.0 for sc in scores if sc.correct) / len(scores))
    return ScoredSet(scores=scores, accuracy=accuracy)


def write_semantic_csv(
    path, example_ids: list[str], scored_by_family: dict[str, ScoredSet]
) -> None:
    """Long-format emission: one row per (example, family)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example_id", "family", "s", "correct"])
        for family, scored in scored_by_family.items():
            for example_id, score in zip(example_ids, scored.scores):
                writer.writerow([example_id, family, repr(score.s), int(score.correct)])
