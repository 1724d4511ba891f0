"""Export loop: caption clips, embed texts, write interchange files.

Per clip the exporter writes candidate hidden states (f32) and both
embedding families (f32, one row per caption), collects token arrays
into the manifest record, and optionally accumulates full logit rows
(f64) with their target ids for temperature fitting. Clips whose audio
fails to decode are skipped with a log line; the export never aborts.
The manifest carries a schema_version handshake on every record.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorfile
from .backends import AudioDecodeError, DecodedCandidate

log = logging.getLogger("semcal_export")

SCHEMA_VERSION = 1
DEFAULT_STYLE_PREFIX = "clotho > caption:"


@dataclass
class ExportConfig:
    captions_csv: str
    audio_dir: str
    out_dir: str
    mode: str = "greedy"
    n_beams: int = 5
    sample_rate: int = 16_000
    max_duration: float = 30.0
    style_prefix: str = DEFAULT_STYLE_PREFIX
    export_logits: bool = True
    limit: int | None = None

    def __post_init__(self):
        if self.mode not in ("greedy", "beams"):
            raise ValueError(f"mode must be greedy or beams, got {self.mode!r}")
        if self.mode == "beams" and self.n_beams < 1:
            raise ValueError("n_beams must be >= 1")


@dataclass
class ExportSummary:
    exported: int = 0
    skipped: list[str] = field(default_factory=list)
    manifest_path: Path | None = None


def read_caption_rows(path: str | Path) -> list[dict]:
    """Clotho-style CSV: file_name plus caption_1..caption_N columns."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "file_name" not in reader.fieldnames:
            raise ValueError(f"{path}: expected a file_name column")
        caption_cols = sorted(
            (c for c in reader.fieldnames if c.startswith("caption_")),
            key=lambda c: int(c.split("_")[1]),
        )
        if not caption_cols:
            raise ValueError(f"{path}: expected caption_1.. columns")
        rows = []
        for row in reader:
            captions = [row[c].strip() for c in caption_cols if row[c] and row[c].strip()]
            if not captions:
                raise ValueError(f"{path}: no captions for {row['file_name']!r}")
            rows.append({"file_name": row["file_name"], "captions": captions})
        return rows


def _candidate_record(cand: DecodedCandidate, hidden_ref: str) -> dict:
    return {
        "caption": cand.caption,
        "token_ids": cand.token_ids,
        "token_logprobs": cand.token_logprobs,
        "token_mask": cand.token_mask,
        "hidden_state_ref": hidden_ref,
    }


def export_examples(config: ExportConfig, backend) -> ExportSummary:
    out_dir = Path(config.out_dir)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    rows = read_caption_rows(config.captions_csv)
    if config.limit is not None:
        rows = rows[: config.limit]

    summary = ExportSummary()
    records = []
    calib_logits: list[np.ndarray] = []
    calib_targets: list[np.ndarray] = []
    for row in rows:
        clip = row["file_name"]
        stem = Path(clip).stem
        try:
            audio = backend.load_audio(
                Path(config.audio_dir) / clip, config.sample_rate, config.max_duration
            )
        except AudioDecodeError as exc:
            log.warning("skipping %s: %s", clip, exc)
            summary.skipped.append(clip)
            continue

        candidates = backend.caption(
            audio, row["captions"], config.mode, config.n_beams, config.style_prefix
        )
        cand_records = []
        for j, cand in enumerate(candidates):
            hidden_ref = f"tensors/{stem}_cand{j}_hidden.semc"
            tensorfile.write(cand.hidden_states, "f32", out_dir / hidden_ref)
            cand_records.append(_candidate_record(cand, hidden_ref))
            if config.export_logits and cand.logit_rows is not None:
                calib_logits.append(np.asarray(cand.logit_rows, dtype=np.float64))
                calib_targets.append(np.asarray(cand.logit_targets, dtype=np.uint32))

        refs = {}
        texts = {"candidates": [c.caption for c in candidates], "references": row["captions"]}
        for family, embed in (("clap", backend.embed_clap), ("sbert", backend.embed_sbert)):
            for role, text_list in texts.items():
                ref = f"tensors/{stem}_{family}_{role}.semc"
                tensorfile.write(embed(text_list), "f32", out_dir / ref)
                refs[f"{family}/{role}"] = ref

        records.append(
            {
                "example_id": stem,
                "references": row["captions"],
                "candidates": cand_records,
                "embedding_refs": refs,
                "schema_version": SCHEMA_VERSION,
            }
        )
        summary.exported += 1

    manifest_path = out_dir / "manifest.jsonl"
    tmp_path = manifest_path.with_suffix(".jsonl.tmp")
    with open(tmp_path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")
    tmp_path.replace(manifest_path)
    summary.manifest_path = manifest_path

    if config.export_logits and calib_logits:
        logits = np.concatenate(calib_logits, axis=0)
        targets = np.concatenate(calib_targets, axis=0)
        tensorfile.write(logits, "f64", out_dir / "calib_logits.semc")
        tensorfile.write(targets, "u32", out_dir / "calib_targets.semc")

    log.info("exported %d examples, skipped %d", summary.exported, len(summary.skipped))
    return summary
