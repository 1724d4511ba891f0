"""N-gram caption quality metrics: BLEU-n, CIDEr-D, and the traditional
correctness indicator (BLEU-4 above 0.25, strict).

Conventions, since no single community standard exists at sentence level:

* Tokenization lowercases, replaces every Unicode punctuation character
  (categories P*) with a space, and splits on whitespace.
* BLEU uses modified n-gram precision with add-one smoothing applied to
  numerator and denominator for n >= 2 only ("add1", configurable to
  "none"). Without smoothing, sentence BLEU-4 collapses to 0 whenever a
  single order has no match, which degenerates the 0.25 threshold.
* The brevity penalty uses the closest-length reference, ties broken
  toward the shorter one.
* CIDEr is CIDEr-D: tf-idf over n=1..4 with document frequencies from
  the corpus reference sets, clipped candidate counts, Gaussian length
  penalty sigma=6, uniform mean over orders, scaled by 10.
"""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import ValidationError

TokenizedCaption = list[str]

TRADITIONAL_BLEU_THRESHOLD = 0.25


def tokenize(caption: str) -> TokenizedCaption:
    """Lowercase, strip Unicode punctuation, split on whitespace."""
    chars = [
        " " if unicodedata.category(ch).startswith("P") else ch
        for ch in caption.lower()
    ]
    return "".join(chars).split()


def _ngram_counts(tokens: Sequence[str], max_n: int) -> dict[int, Counter]:
    counts: dict[int, Counter] = {}
    for n in range(1, max_n + 1):
        counts[n] = Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return counts


def _closest_ref_length(cand_len: int, ref_lens: Sequence[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def bleu(
    candidate: TokenizedCaption,
    refs: list[TokenizedCaption],
    max_n: int = 4,
    smoothing: str = "add1",
) -> float:
    """Sentence BLEU with brevity penalty, in [0, 1].

    Empty candidates score 0. With smoothing "none", any order without a
    match zeroes the score.
    """
    if max_n < 1:
        raise ValidationError(f"max_n must be >= 1, got {max_n}")
    if not refs:
        raise ValidationError("empty reference list")
    if smoothing not in ("add1", "none"):
        raise ValidationError(f"unknown smoothing {smoothing!r}")
    c = len(candidate)
    if c == 0:
        return 0.0
    cand_counts = _ngram_counts(candidate, max_n)
    ref_counts = [_ngram_counts(ref, max_n) for ref in refs]
    product = 1.0
    for n in range(1, max_n + 1):
        denom = max(0, c - n + 1)
        matches = 0
        for ngram, count in cand_counts[n].items():
            best = max(rc[n].get(ngram, 0) for rc in ref_counts)
            matches += min(count, best)
        if smoothing == "add1" and n >= 2:
            p = (matches + 1) / (denom + 1)
        else:
            p = matches / denom if denom > 0 else 0.0
        if p == 0.0:
            return 0.0
        product *= p
    r = _closest_ref_length(c, [len(ref) for ref in refs])
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * product ** (1.0 / max_n)


def traditional_correctness(
    candidate: TokenizedCaption,
    refs: list[TokenizedCaption],
    threshold: float = TRADITIONAL_BLEU_THRESHOLD,
) -> bool:
    """True iff BLEU-4 strictly exceeds the threshold (equality fails)."""
    return bleu(candidate, refs, max_n=4) > threshold


@dataclass
class CiderResult:
    per_example: list[float]
    mean: float


def cider(
    candidates: list[TokenizedCaption],
    refs_per_example: list[list[TokenizedCaption]],
    max_n: int = 4,
    sigma: float = 6.0,
) -> CiderResult:
    """CIDEr-D over an aligned corpus of candidates and reference sets.

    Document frequency of an n-gram is the number of examples whose
    reference set contains it; idf uses log(N / max(1, df)). Per order n
    the candidate/reference tf-idf vectors are compared with clipped dot
    product over both norms, weighted by the Gaussian length penalty,
    averaged over references and orders, then scaled by 10.
    """
    if len(candidates) != len(refs_per_example):
        raise ValidationError(
            f"{len(candidates)} candidates but {len(refs_per_example)} reference sets"
        )
    if not candidates:
        raise ValidationError("empty corpus")
    for refs in refs_per_example:
        if not refs:
            raise ValidationError("example with empty reference set")

    n_docs = len(refs_per_example)
    doc_freq: Counter = Counter()
    for refs in refs_per_example:
        seen: set = set()
        for ref in refs:
            for counter in _ngram_counts(ref, max_n).values():
                seen.update(counter)
        doc_freq.update(seen)
    log_n_docs = math.log(n_docs)

    def tfidf(tokens: TokenizedCaption) -> tuple[list[dict], list[float]]:
        vecs: list[dict] = []
        norms: list[float] = []
        counts = _ngram_counts(tokens, max_n)
        for n in range(1, max_n + 1):
            vec = {}
            sq = 0.0
            for ngram, tf in counts[n].items():
                idf = log_n_docs - math.log(max(1.0, doc_freq[ngram]))
                w = tf * idf
                vec[ngram] = w
                sq += w * w
            vecs.append(vec)
            norms.append(math.sqrt(sq))
        return vecs, norms

    scores: list[float] = []
    for cand, refs in zip(candidates, refs_per_example):
        cand_vecs, cand_norms = tfidf(cand)
        total = 0.0
        for ref in refs:
            ref_vecs, ref_norms = tfidf(ref)
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2.0 * sigma**2))
            for n in range(max_n):
                if cand_norms[n] == 0.0 or ref_norms[n] == 0.0:
                    continue
                dot = sum(
                    min(w, ref_vecs[n].get(ngram, 0.0)) * ref_vecs[n].get(ngram, 0.0)
                    for ngram, w in cand_vecs[n].items()
                )
                total += penalty * dot / (cand_norms[n] * ref_norms[n])
        scores.append(10.0 * total / (max_n * len(refs)))
    return CiderResult(per_example=scores, mean=float(sum(scores) / len(scores)))
