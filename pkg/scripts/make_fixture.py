#!/usr/bin/env python3
"""Regenerate the committed fixtures under fixtures/.

Everything is seeded and deterministic. The evaluation fixture is a
20-example manifest whose candidate quality varies smoothly: embeddings
are placed at controlled angles from the reference direction, captions
share words with reference 0 in proportion to quality, token log-probs
and hidden states correlate with quality (noisily), and the committed
confidence head is trained on a disjoint synthetic set drawn from the
same recipe. Stored mean_confidence values come from that head, so
confidence-guided reranking has signal but no oracle access.

Run from the repository root:  python3 scripts/make_fixture.py
"""

from __future__ import annotations

import json
import math
import sys
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from semcal import pipeline, tensorio
from semcal.confidence import (
    HeadConfig,
    TrainConfig,
    TrainExample,
    head_forward,
    load_head,
    mean_confidence,
    save_head,
    train_head,
)
from semcal.decoding import rank_order
from semcal.cli import _candidate_hypothesis
from semcal.tensorio import CandidateRecord, ExampleRecord

FIXTURE_DIR = REPO / "fixtures"
TENSOR_DIR = FIXTURE_DIR / "tensors"
HEAD_DIR = FIXTURE_DIR / "head"
GOLDEN_DIR = FIXTURE_DIR / "golden"

SEED = 61_2025
D_MODEL = 64
CLAP_DIM = 512
SBERT_DIM = 384
N_EXAMPLES = 20
N_CANDIDATES = 5
N_REFERENCES = 5

BOS_ID = 1
EOS_ID = 2
PROMPT_IDS = [101, 102, 103]

WORDS = (
    "rain water wind birds dog engine footsteps door bell waves thunder "
    "children traffic machine hum crowd insects stream metal wood glass "
    "paper fire static siren horn whistle drip clank rustle murmur"
).split()


def word_id(word: str) -> int:
    return 200 + WORDS.index(word)


def unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def embedding_at_similarity(base: np.ndarray, s: float, rng) -> np.ndarray:
    """A unit vector whose cosine against `base` is s."""
    noise = rng.standard_normal(base.shape)
    ortho = unit(noise - (noise @ base) * base)
    return s * base + math.sqrt(max(0.0, 1.0 - s * s)) * ortho


def make_caption(rng, ref_words: list[str], quality: float) -> list[str]:
    """Share a quality-proportional number of reference words, scattered
    over the caption so n-gram overlap degrades with quality too."""
    keep = max(1, round(quality * len(ref_words)))
    pool = [w for w in WORDS if w not in ref_words]
    words = [pool[int(rng.integers(len(pool)))] for _ in range(len(ref_words))]
    positions = sorted(rng.choice(len(ref_words), size=keep, replace=False))
    for pos, word in zip(positions, ref_words[:keep]):
        words[pos] = word
    return words


def hidden_states_for(rng, s: float, n_tokens: int, direction: np.ndarray) -> np.ndarray:
    total = len(PROMPT_IDS) + 1 + n_tokens + 1
    return s * np.tile(direction, (total, 1)) + 0.3 * rng.standard_normal((total, D_MODEL))


def synth_candidate(rng, s_clap: float, ref_words, direction, tensor_name=None):
    words = make_caption(rng, ref_words, s_clap)
    n = len(words)
    per_token = -(1.45 - 1.0 * s_clap) + 0.18 * rng.standard_normal(n)
    per_token = np.minimum(per_token, -1e-3)
    token_ids = [BOS_ID] + PROMPT_IDS + [word_id(w) for w in words] + [EOS_ID]
    token_logprobs = [0.0] * (1 + len(PROMPT_IDS)) + per_token.tolist() + [-0.05]
    token_mask = [False] * (1 + len(PROMPT_IDS)) + [True] * n + [False]
    hidden = hidden_states_for(rng, s_clap, n, direction)
    return words, token_ids, token_logprobs, token_mask, hidden


def build_head(rng) -> Path:
    """Train the committed head on a disjoint synthetic set."""
    direction = unit(rng.standard_normal(D_MODEL))
    np.save(FIXTURE_DIR / "_direction.npy", direction)  # reused by examples
    dataset = []
    for _ in range(240):
        s = float(rng.uniform(0.05, 0.98))
        n = int(rng.integers(5, 13))
        hidden = hidden_states_for(rng, s, n, direction)
        mask = np.array([False] * (1 + len(PROMPT_IDS)) + [True] * n + [False])
        dataset.append(TrainExample(hidden_states=hidden, token_mask=mask, target=s))
    head_config = HeadConfig(d_model=D_MODEL, dropout_rate=0.1, seed=SEED)
    train_config = TrainConfig(
        learning_rate=1e-2, epochs=80, batch_size=16, optimizer="adam", seed=SEED
    )
    result = train_head(dataset, head_config, train_config)
    print(f"head training: first epoch {result.epoch_losses[0]:.5f}, "
          f"final {result.epoch_losses[-1]:.5f}")
    assert result.epoch_losses[-1] < 0.01, "committed head failed to converge"
    HEAD_DIR.mkdir(parents=True, exist_ok=True)
    return save_head(result.params, head_config, HEAD_DIR)


def write_rows(name: str, rows: np.ndarray, dtype: str) -> str:
    arr = np.asarray(rows)
    ref = f"tensors/{name}.semc"
    tensorio.write_tensor(arr.ravel(), list(arr.shape), dtype, FIXTURE_DIR / ref)
    return ref


def build_examples(rng, params, head_config) -> list[ExampleRecord]:
    direction = np.load(FIXTURE_DIR / "_direction.npy")
    records = []
    # qualities span the threshold so clap accuracy lands mid-range
    for i in range(N_EXAMPLES):
        scene = unit(rng.standard_normal(CLAP_DIM))
        scene_sbert = unit(rng.standard_normal(SBERT_DIM))
        ref_len = int(rng.integers(6, 11))
        ref0 = [WORDS[int(rng.integers(len(WORDS)))] for _ in range(ref_len)]
        references = [" ".join(ref0)]
        ref_rows = [embedding_at_similarity(scene, 0.97, rng)]
        ref_rows_sbert = [embedding_at_similarity(scene_sbert, 0.97, rng)]
        for _ in range(N_REFERENCES - 1):
            alt = list(ref0)
            for _ in range(2):
                alt[int(rng.integers(len(alt)))] = WORDS[int(rng.integers(len(WORDS)))]
            references.append(" ".join(alt))
            ref_rows.append(embedding_at_similarity(scene, float(rng.uniform(0.9, 0.99)), rng))
            ref_rows_sbert.append(
                embedding_at_similarity(scene_sbert, float(rng.uniform(0.9, 0.99)), rng)
            )

        qualities = rng.uniform(0.25, 0.95, size=N_CANDIDATES)
        candidates = []
        cand_rows, cand_rows_sbert = [], []
        for j, q in enumerate(qualities):
            s_clap = float(q)
            s_sbert = float(np.clip(q - 0.12 + rng.uniform(-0.04, 0.04), 0.02, 0.99))
            words, token_ids, token_logprobs, token_mask, hidden = synth_candidate(
                rng, s_clap, ref0, direction
            )
            hidden_ref = write_rows(f"ex{i:02d}_cand{j}_hidden", hidden.astype(np.float32), "f32")
            conf = mean_confidence(
                head_forward(hidden.astype(np.float32), params, head_config), token_mask
            )
            candidates.append(
                CandidateRecord(
                    caption=" ".join(words),
                    token_ids=token_ids,
                    token_logprobs=[float(x) for x in token_logprobs],
                    token_mask=token_mask,
                    hidden_state_ref=hidden_ref,
                    mean_confidence=round(conf, 6),
                )
            )
            cand_rows.append(embedding_at_similarity(scene, s_clap, rng))
            cand_rows_sbert.append(embedding_at_similarity(scene_sbert, s_sbert, rng))

        refs = {
            ("clap", "candidates"): write_rows(
                f"ex{i:02d}_clap_cand", np.array(cand_rows, dtype=np.float32), "f32"
            ),
            ("clap", "references"): write_rows(
                f"ex{i:02d}_clap_refs", np.array(ref_rows, dtype=np.float32), "f32"
            ),
            ("sbert", "candidates"): write_rows(
                f"ex{i:02d}_sbert_cand", np.array(cand_rows_sbert, dtype=np.float32), "f32"
            ),
            ("sbert", "references"): write_rows(
                f"ex{i:02d}_sbert_refs", np.array(ref_rows_sbert, dtype=np.float32), "f32"
            ),
        }
        records.append(
            ExampleRecord(
                example_id=f"clip{i:04d}",
                references=references,
                candidates=candidates,
                embedding_refs=refs,
            )
        )
    return records


def check_directional(eval_set) -> None:
    """Reranking with the confidence term must not hurt mean clap
    similarity versus beta=0 (margin reported for the record)."""
    from semcal.similarity import Embedding, max_ref_similarity

    def mean_top_similarity(beta: float) -> float:
        total = 0.0
        for record in eval_set:
            hyps = [
                _candidate_hypothesis(record, k, record.candidates[k].mean_confidence)
                for k in range(len(record.candidates))
            ]
            best = rank_order(hyps, 1.0, beta)[0]
            cand_rows = eval_set.embeddings(record, "clap", "candidates")
            ref_rows = eval_set.embeddings(record, "clap", "references")
            total += max_ref_similarity(
                Embedding("clap", cand_rows[best]),
                [Embedding("clap", r) for r in ref_rows],
            )
        return total / len(eval_set)

    guided = mean_top_similarity(0.3)
    plain = mean_top_similarity(0.0)
    print(f"directional check: beta=0.3 mean clap sim {guided:.4f}, beta=0 {plain:.4f}")
    assert guided >= plain - 0.01, "confidence-guided reranking regressed similarity"


def build_toy_model() -> None:
    toy = {
        "transitions": [
            [0.0, 0.05, 0.9, 0.05],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.6, 0.3, 0.1],
            [0.0, 0.2, 0.4, 0.4],
        ],
        "bos_id": 0,
        "eos_id": 1,
        "token_confidences": [0.0, 0.0, 0.9, 0.4],
    }
    with open(FIXTURE_DIR / "toy_model.json", "w", encoding="utf-8") as fh:
        json.dump(toy, fh, indent=2, sort_keys=True)
        fh.write("\n")


def build_rerank_fixture() -> None:
    """One example, ten candidates with hand-checkable scores."""
    spec = [
        (-1.0, 1, 0.9), (-2.0, 2, 0.5), (-3.0, 3, 0.9), (-1.5, 2, 0.2),
        (-4.0, 5, 0.95), (-2.5, 4, 0.1), (-6.0, 6, 0.8), (-0.8, 1, 0.3),
        (-3.6, 4, 0.55), (-5.0, 5, 0.4),
    ]
    candidates = []
    next_token = 10
    for j, (logp, length, conf) in enumerate(spec):
        ids = list(range(next_token, next_token + length))
        next_token += length
        candidates.append(
            CandidateRecord(
                caption=f"candidate {j}",
                token_ids=ids,
                token_logprobs=[logp / length] * length,
                token_mask=[True] * length,
                mean_confidence=conf,
            )
        )
    record = ExampleRecord(
        example_id="rerank-fixture", references=["unused"], candidates=candidates
    )
    tensorio.write_manifest([record], FIXTURE_DIR / "rerank10.jsonl")


def build_golden_report(eval_set, params, head_config) -> None:
    result = pipeline.evaluate_set(eval_set, confidence_mode="head", head=params,
                                   head_config=head_config)
    GOLDEN_DIR.mkdir(parents=True, exist_ok=True)
    pipeline.write_report_json(result.report, GOLDEN_DIR / "report.json")
    print(
        "golden report: clap acc {:.3f}, clap ece {:.3f}, avg conf {:.3f}".format(
            result.report["accuracy"]["clap"],
            result.report["calibration"]["clap"]["ece"],
            result.report["avg_confidence"],
        )
    )


def main() -> None:
    rng = np.random.default_rng(SEED)
    FIXTURE_DIR.mkdir(exist_ok=True)
    TENSOR_DIR.mkdir(parents=True, exist_ok=True)

    descriptor = build_head(rng)
    params, head_config = load_head(descriptor)
    records = build_examples(rng, params, head_config)
    tensorio.write_manifest(records, FIXTURE_DIR / "manifest.jsonl",
                            schema_version=tensorio.SCHEMA_VERSION)
    (FIXTURE_DIR / "_direction.npy").unlink()

    eval_set = tensorio.load_manifest(FIXTURE_DIR / "manifest.jsonl")
    print(f"fixture manifest: {len(eval_set)} examples validate")
    check_directional(eval_set)
    build_toy_model()
    build_rerank_fixture()
    build_golden_report(eval_set, params, head_config)
    print("fixtures written to", FIXTURE_DIR)


if __name__ == "__main__":
    main()
