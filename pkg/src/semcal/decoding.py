"""Confidence-guided beam search and candidate reranking.

Hypotheses are scored as logp / length^alpha + beta * mean_confidence.
During expansion beams are pruned by cumulative log-probability only;
the confidence term enters at final ranking (and at reranking of
precomputed candidates). Lengths count generated content tokens, never
BOS, EOS, or prompt positions.

Tie-breaking is fixed everywhere: higher score first, then shorter
content, then lexicographically smaller token ids.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import ValidationError
from .confidence import HeadConfig, HeadParams, head_forward

MAX_TOY_VOCAB = 16


@runtime_checkable
class TokenDistributionProvider(Protocol):
    """Autoregressive source of next-token log-probabilities.

    next_logprobs must return a vector with vocab_size entries whose
    logsumexp is 0 within 1e-6. Providers may optionally expose
    next_confidences (per-token-id confidence for the next step) or
    next_hidden_state (for head-scored confidence).
    """

    vocab_size: int
    bos_id: int
    eos_id: int

    def next_logprobs(self, prefix: Sequence[int]) -> np.ndarray: ...


@dataclass
class ToyModel:
    """First-order transition table over a small vocabulary.

    Row i is the distribution over next tokens given last token i; the
    BOS row starts every sequence. Rows must each sum to 1 within 1e-9.
    An optional per-token confidence vector lets closed-world decoding
    tests exercise the confidence term without a trained head.
    """

    transitions: np.ndarray
    bos_id: int
    eos_id: int
    token_confidences: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.transitions, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValidationError(f"transition table must be square, got {t.shape}")
        if t.shape[0] > MAX_TOY_VOCAB:
            raise ValidationError(f"toy vocabulary {t.shape[0]} exceeds {MAX_TOY_VOCAB}")
        if np.any(t < 0.0):
            raise ValidationError("transition probabilities must be non-negative")
        row_sums = t.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > 1e-9):
            raise ValidationError(f"transition rows must sum to 1, got {row_sums}")
        for tok in (self.bos_id, self.eos_id):
            if not 0 <= tok < t.shape[0]:
                raise ValidationError(f"special token id {tok} out of range")
        if self.bos_id == self.eos_id:
            raise ValidationError("bos_id and eos_id must differ")
        self.transitions = t
        if self.token_confidences is not None:
            c = np.asarray(self.token_confidences, dtype=np.float64)
            if c.shape != (t.shape[0],):
                raise ValidationError(
                    f"token_confidences must have {t.shape[0]} entries, got {c.shape}"
                )
            if np.any(c < 0.0) or np.any(c > 1.0):
                raise ValidationError("token confidences must lie in [0, 1]")
            self.token_confidences = c

    @property
    def vocab_size(self) -> int:
        return self.transitions.shape[0]

    def next_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        row = self.transitions[prefix[-1]]
        with np.errstate(divide="ignore"):
            return np.log(row)

    def next_confidences(self, prefix: Sequence[int]) -> np.ndarray | None:
        return self.token_confidences

    @classmethod
    def from_json(cls, path: str | Path) -> "ToyModel":
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        try:
            return cls(
                transitions=np.asarray(obj["transitions"], dtype=np.float64),
                bos_id=int(obj["bos_id"]),
                eos_id=int(obj["eos_id"]),
                token_confidences=(
                    np.asarray(obj["token_confidences"], dtype=np.float64)
                    if "token_confidences" in obj
                    else None
                ),
            )
        except KeyError as exc:
            raise ValidationError(f"{path}: missing field {exc}") from None


@dataclass
class BeamHypothesis:
    """A (partial or finished) decode: tokens include BOS, and EOS once
    finished; token_confidences align with content tokens only."""

    tokens: list[int]
    logp: float
    token_confidences: list[float] = field(default_factory=list)
    finished: bool = False

    def content_tokens(self) -> list[int]:
        end = len(self.tokens) - 1 if self.finished else len(self.tokens)
        return self.tokens[1:end]

    def content_length(self) -> int:
        return len(self.content_tokens())

    def mean_confidence(self) -> float:
        if not self.token_confidences:
            return 0.0
        return float(np.mean(self.token_confidences))


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 5
    alpha: float = 1.0
    beta: float = 0.3
    max_length: int = 32
    temperature: float = 1.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValidationError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if self.max_length < 1:
            raise ValidationError(f"max_length must be >= 1, got {self.max_length}")
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")


def beam_score(logp: float, length: int, mean_conf: float, alpha: float, beta: float) -> float:
    """Combined hypothesis score: logp / length^alpha + beta * mean_conf."""
    if length < 1:
        raise ValidationError(f"length must be >= 1, got {length}")
    return logp / length**alpha + beta * mean_conf


def hypothesis_score(hyp: BeamHypothesis, alpha: float, beta: float) -> float:
    # Empty-content hypotheses (immediate EOS) score with length 1 so
    # they stay rankable; beam_score itself rejects length 0.
    return beam_score(hyp.logp, max(1, hyp.content_length()), hyp.mean_confidence(), alpha, beta)


def _rank_key(hyp: BeamHypothesis, alpha: float, beta: float):
    return (-hypothesis_score(hyp, alpha, beta), hyp.content_length(), tuple(hyp.tokens))


def rerank(candidates: Sequence[BeamHypothesis], alpha: float, beta: float) -> list[BeamHypothesis]:
    """Sort candidates by combined score, descending, with fixed tie-breaks."""
    if not candidates:
        raise ValidationError("no candidates to rerank")
    return sorted(candidates, key=lambda h: _rank_key(h, alpha, beta))


def rank_order(candidates: Sequence[BeamHypothesis], alpha: float, beta: float) -> list[int]:
    """Indices of candidates in rank order (best first)."""
    if not candidates:
        raise ValidationError("no candidates to rerank")
    return sorted(range(len(candidates)), key=lambda i: _rank_key(candidates[i], alpha, beta))


def _effective_logprobs(provider, prefix: Sequence[int], temperature: float) -> np.ndarray:
    lp = np.asarray(provider.next_logprobs(prefix), dtype=np.float64)
    if lp.shape != (provider.vocab_size,):
        raise ValidationError(
            f"provider returned {lp.shape}, expected ({provider.vocab_size},)"
        )
    finite = lp[np.isfinite(lp)]
    if finite.size == 0:
        raise ValidationError("provider row has no support")
    lse = float(np.max(finite) + np.log(np.sum(np.exp(finite - np.max(finite)))))
    if abs(lse) > 1e-6:
        raise ValidationError(f"provider log-probabilities sum to exp({lse}), not 1")
    if temperature == 1.0:
        return lp
    scaled = lp / temperature
    m = np.max(scaled[np.isfinite(scaled)])
    return scaled - (m + np.log(np.sum(np.exp(scaled[np.isfinite(scaled)] - m))))


class _ConfidenceSource:
    """Resolves per-step confidence: head over hidden states when
    available, else provider-supplied, else constant 1.0."""

    def __init__(self, provider, head: HeadParams | None, head_config: HeadConfig | None,
                 fixed: float | None = None):
        self.provider = provider
        self.head = head
        self.head_config = head_config
        self.fixed = fixed
        if head is not None and head_config is None:
            raise ValidationError("head params require a head config")

    def step_confidence(self, prefix: Sequence[int]) -> float | np.ndarray:
        if self.fixed is not None:
            return self.fixed
        if self.head is not None and hasattr(self.provider, "next_hidden_state"):
            h = self.provider.next_hidden_state(prefix)
            if h is not None:
                return float(
                    head_forward(np.asarray(h)[None, :], self.head, self.head_config)[0]
                )
        if hasattr(self.provider, "next_confidences"):
            vec = self.provider.next_confidences(prefix)
            if vec is not None:
                return np.asarray(vec, dtype=np.float64)
        return 1.0

    def for_token(self, step_conf: float | np.ndarray, token: int) -> float:
        if isinstance(step_conf, np.ndarray):
            return float(step_conf[token])
        return float(step_conf)


def beam_search(
    provider,
    config: BeamConfig,
    head: HeadParams | None = None,
    head_config: HeadConfig | None = None,
    fixed_confidence: float | None = None,
) -> list[BeamHypothesis]:
    """Beam search with confidence-based final reranking.

    At each step every (hypothesis, token) extension competes by
    cumulative log-probability and the beam_size best survive; EOS
    extensions among the survivors move to the finished pool, the rest
    stay active. This makes beam_size=1 reproduce greedy decoding
    exactly. Finished hypotheses are returned first, sorted by combined
    score; hypotheses still unfinished at max_length follow with
    finished=False, never silently truncated.
    """
    source = _ConfidenceSource(provider, head, head_config, fixed_confidence)
    active = [BeamHypothesis(tokens=[provider.bos_id], logp=0.0)]
    finished: list[BeamHypothesis] = []
    for _ in range(config.max_length):
        expansions: list[BeamHypothesis] = []
        for hyp in active:
            lp = _effective_logprobs(provider, hyp.tokens, config.temperature)
            step_conf = source.step_confidence(hyp.tokens)
            for token in range(provider.vocab_size):
                token_lp = float(lp[token])
                if token_lp == -math.inf:
                    continue
                if token == provider.eos_id:
                    expansions.append(
                        BeamHypothesis(
                            tokens=hyp.tokens + [token],
                            logp=hyp.logp + token_lp,
                            token_confidences=list(hyp.token_confidences),
                            finished=True,
                        )
                    )
                else:
                    expansions.append(
                        BeamHypothesis(
                            tokens=hyp.tokens + [token],
                            logp=hyp.logp + token_lp,
                            token_confidences=hyp.token_confidences
                            + [source.for_token(step_conf, token)],
                        )
                    )
        expansions.sort(key=lambda h: (-h.logp, tuple(h.tokens)))
        survivors = expansions[: config.beam_size]
        finished.extend(h for h in survivors if h.finished)
        active = [h for h in survivors if not h.finished]
        if not active:
            break
    finished.sort(key=lambda h: _rank_key(h, config.alpha, config.beta))
    unfinished = sorted(active, key=lambda h: _rank_key(h, config.alpha, config.beta))
    return finished + unfinished


def greedy_decode(
    provider,
    config: BeamConfig,
    confidence_mode: str = "fixed1",
    head: HeadParams | None = None,
    head_config: HeadConfig | None = None,
) -> BeamHypothesis:
    """Argmax decoding; ties resolve to the lowest token id.

    In the baseline "fixed1" mode every content token gets confidence
    exactly 1.0; "scored" mode attaches head or provider confidences
    like beam_search does. The token path always equals beam_search
    with beam_size=1.
    """
    if confidence_mode not in ("fixed1", "scored"):
        raise ValidationError(f"unknown confidence_mode {confidence_mode!r}")
    fixed = 1.0 if confidence_mode == "fixed1" else None
    source = _ConfidenceSource(provider, head, head_config, fixed)
    hyp = BeamHypothesis(tokens=[provider.bos_id], logp=0.0)
    for _ in range(config.max_length):
        lp = _effective_logprobs(provider, hyp.tokens, config.temperature)
        step_conf = source.step_confidence(hyp.tokens)
        token = int(np.argmax(lp))
        token_lp = float(lp[token])
        if token == provider.eos_id:
            return BeamHypothesis(
                tokens=hyp.tokens + [token],
                logp=hyp.logp + token_lp,
                token_confidences=list(hyp.token_confidences),
                finished=True,
            )
        hyp = BeamHypothesis(
            tokens=hyp.tokens + [token],
            logp=hyp.logp + token_lp,
            token_confidences=hyp.token_confidences + [source.for_token(step_conf, token)],
        )
    return hyp
