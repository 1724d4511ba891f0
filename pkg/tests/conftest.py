import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from semcal.tensorio import (
    CandidateRecord,
    DictResolver,
    EvaluationSet,
    ExampleRecord,
    ROLE_CANDIDATES,
    ROLE_REFERENCES,
)


def make_eval_set(examples):
    """Build an in-memory EvaluationSet.

    examples: list of dicts with keys
      example_id, references (list[str]), candidates (list of dicts with
      caption/token_ids/token_logprobs/token_mask/mean_confidence/hidden),
      embeddings: {family: {"candidates": 2-D array, "references": 2-D array}}
    """
    tensors = {}
    records = []
    for ex in examples:
        refs = {}
        for family, roles in ex.get("embeddings", {}).items():
            for role, rows in roles.items():
                key = f"{ex['example_id']}/{family}/{role}"
                tensors[key] = np.asarray(rows, dtype=np.float64)
                refs[(family, role)] = key
        candidates = []
        for i, cand in enumerate(ex.get("candidates", [])):
            hidden_ref = None
            if "hidden" in cand:
                hidden_ref = f"{ex['example_id']}/hidden/{i}"
                tensors[hidden_ref] = np.asarray(cand["hidden"], dtype=np.float64)
            n_tokens = len(cand["token_ids"])
            candidates.append(
                CandidateRecord(
                    caption=cand["caption"],
                    token_ids=list(cand["token_ids"]),
                    token_logprobs=list(cand.get("token_logprobs", [-0.1] * n_tokens)),
                    token_mask=list(cand.get("token_mask", [True] * n_tokens)),
                    hidden_state_ref=hidden_ref,
                    mean_confidence=cand.get("mean_confidence"),
                )
            )
        records.append(
            ExampleRecord(
                example_id=ex["example_id"],
                references=list(ex["references"]),
                candidates=candidates,
                embedding_refs=refs,
            )
        )
    return EvaluationSet(records=records, resolver=DictResolver(tensors))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
