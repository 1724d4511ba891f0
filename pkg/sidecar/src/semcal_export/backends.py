"""Model backends for the exporter.

Two implementations of the same small surface: `RealBackend` drives the
actual pretrained captioner and text encoders (heavyweight imports are
deferred until construction), and `SyntheticBackend` produces
deterministic, structurally identical artifacts with no models or
network, for offline testing and fixtures. Identical input strings
always produce bitwise-identical embeddings in both.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

D_MODEL = 768
CLAP_DIM = 512
SBERT_DIM = 384

BOS_ID = 50258
EOS_ID = 50257


class AudioDecodeError(Exception):
    """A clip could not be loaded or decoded; the exporter skips it."""


@dataclass
class DecodedCandidate:
    caption: str
    token_ids: list[int]
    token_logprobs: list[float]
    token_mask: list[bool]
    hidden_states: np.ndarray  # (tokens, d_model) float32
    logit_rows: np.ndarray | None = None  # (content tokens, vocab) float64
    logit_targets: np.ndarray | None = None  # (content tokens,) uint32


def _digest_seed(*parts: str) -> int:
    h = hashlib.blake2b("\x1f".join(parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def _stable_token_id(word: str) -> int:
    return 300 + _digest_seed("tok", word) % 30_000


class SyntheticBackend:
    """Deterministic stand-in: every artifact derives from input text
    and audio bytes via seeded generators. No checkpoints, no network."""

    name = "synthetic"
    d_model = D_MODEL
    calib_vocab = 64

    def load_audio(self, path: str | Path, sample_rate: int, max_duration: float):
        path = Path(path)
        try:
            payload = path.read_bytes()
        except OSError as exc:
            raise AudioDecodeError(f"cannot read audio file {path}: {exc}") from None
        if not payload:
            raise AudioDecodeError(f"audio file {path} is empty")
        return {"name": path.name, "digest": hashlib.blake2b(payload, digest_size=8).hexdigest()}

    def caption(self, audio, references: list[str], mode: str, n_beams: int,
                style_prefix: str) -> list[DecodedCandidate]:
        n_candidates = 1 if mode == "greedy" else n_beams
        base_words = references[0].split() if references else ["sound"]
        prefix_ids = [_stable_token_id(w) for w in style_prefix.split()]
        candidates = []
        for j in range(n_candidates):
            rng = np.random.default_rng(_digest_seed("cand", audio["digest"], str(j)))
            # later beams drift further from the first reference
            words = list(base_words)
            n_swaps = min(len(words), j + int(rng.integers(0, 2)))
            for _ in range(n_swaps):
                pos = int(rng.integers(len(words)))
                words[pos] = f"w{int(rng.integers(1000)):03d}"
            caption = " ".join(words)
            content_ids = [_stable_token_id(w) for w in words]
            token_ids = [BOS_ID] + prefix_ids + content_ids + [EOS_ID]
            n_special = 1 + len(prefix_ids)
            content_lp = np.minimum(-0.08 - 0.35 * rng.random(len(content_ids)), -1e-3)
            token_logprobs = [0.0] * n_special + content_lp.tolist() + [-0.02]
            token_mask = [False] * n_special + [True] * len(content_ids) + [False]
            hidden = rng.standard_normal((len(token_ids), self.d_model)).astype(np.float32)
            targets = np.array([tid % self.calib_vocab for tid in content_ids], dtype=np.uint32)
            logits = rng.standard_normal((len(content_ids), self.calib_vocab)) * 1.5
            logits[np.arange(len(content_ids)), targets] += 4.0
            candidates.append(
                DecodedCandidate(
                    caption=caption,
                    token_ids=token_ids,
                    token_logprobs=token_logprobs,
                    token_mask=token_mask,
                    hidden_states=hidden,
                    logit_rows=logits,
                    logit_targets=targets,
                )
            )
        return candidates

    def _embed(self, family: str, dim: int, texts: list[str]) -> np.ndarray:
        rows = np.empty((len(texts), dim), dtype=np.float32)
        for i, text in enumerate(texts):
            rng = np.random.default_rng(_digest_seed("emb", family, text))
            v = rng.standard_normal(dim)
            rows[i] = (v / np.linalg.norm(v)).astype(np.float32)
        return rows

    def embed_clap(self, texts: list[str]) -> np.ndarray:
        return self._embed("clap", CLAP_DIM, texts)

    def embed_sbert(self, texts: list[str]) -> np.ndarray:
        return self._embed("sbert", SBERT_DIM, texts)


class RealBackend:
    """Runs the pretrained captioner and text encoders.

    Requires the `real` extra (torch, transformers,
    sentence-transformers, scipy) and locally available checkpoints.
    """

    name = "real"
    d_model = D_MODEL

    def __init__(
        self,
        caption_model_id: str = "MU-NLPC/whisper-small-audio-captioning",
        clap_model_id: str = "laion/clap-htsat-unfused",
        sbert_model_id: str = "sentence-transformers/all-MiniLM-L6-v2",
        device: str = "cpu",
    ):
        try:
            import torch
            from transformers import AutoModelForSpeechSeq2Seq, AutoProcessor
            from transformers import ClapModel, ClapProcessor
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise RuntimeError(
                "the real backend needs the 'real' extra installed "
                "(pip install 'semcal-export[real]')"
            ) from exc
        self.torch = torch
        self.device = device
        try:
            self.processor = AutoProcessor.from_pretrained(caption_model_id)
            self.model = AutoModelForSpeechSeq2Seq.from_pretrained(
                caption_model_id, trust_remote_code=True
            ).to(device).eval()
            self.clap_processor = ClapProcessor.from_pretrained(clap_model_id)
            self.clap = ClapModel.from_pretrained(clap_model_id).to(device).eval()
            self.sbert = SentenceTransformer(sbert_model_id, device=device)
        except Exception as exc:
            raise RuntimeError(f"missing or unloadable checkpoint: {exc}") from exc

    def load_audio(self, path: str | Path, sample_rate: int, max_duration: float):
        from scipy.io import wavfile
        from scipy.signal import resample_poly

        try:
            rate, data = wavfile.read(path)
        except Exception as exc:
            raise AudioDecodeError(f"cannot decode {path}: {exc}") from None
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 2:
            data = data.mean(axis=1)
        peak = np.abs(data).max()
        if peak > 0:
            data = data / max(peak, 1.0) if data.dtype.kind != "f" else data / peak
        if rate != sample_rate:
            data = resample_poly(data, sample_rate, rate)
        max_samples = int(max_duration * sample_rate)
        return data[:max_samples].astype(np.float32)

    def caption(self, audio, references, mode: str, n_beams: int,
                style_prefix: str) -> list[DecodedCandidate]:
        torch = self.torch
        inputs = self.processor(
            audio, sampling_rate=16_000, return_tensors="pt"
        ).input_features.to(self.device)
        prompt_ids = self.processor.tokenizer(
            style_prefix, add_special_tokens=False
        ).input_ids
        forced = self.processor.tokenizer("", add_special_tokens=True).input_ids
        num_return = 1 if mode == "greedy" else n_beams
        with torch.no_grad():
            out = self.model.generate(
                inputs,
                num_beams=1 if mode == "greedy" else n_beams,
                num_return_sequences=num_return,
                do_sample=False,
                output_scores=True,
                output_hidden_states=True,
                return_dict_in_generate=True,
                forced_decoder_ids=None,
                decoder_input_ids=torch.tensor(
                    [forced[:-1] + prompt_ids], device=self.device
                ).repeat(1, 1),
            )
        sequences = out.sequences
        n_prompt = sequences.shape[1] - len(out.scores)
        candidates = []
        for row in range(sequences.shape[0]):
            ids = sequences[row].tolist()
            logprobs = [0.0] * n_prompt
            mask = [False] * n_prompt
            hidden_rows = []
            eos = self.processor.tokenizer.eos_token_id
            for step, scores in enumerate(out.scores):
                token = ids[n_prompt + step] if n_prompt + step < len(ids) else eos
                step_logprobs = torch.log_softmax(scores[row], dim=-1)
                logprobs.append(float(step_logprobs[token]))
                mask.append(token != eos)
                layer = out.decoder_hidden_states[step][-1]
                beam_row = min(row, layer.shape[0] - 1)
                hidden_rows.append(layer[beam_row, -1].float().cpu().numpy())
            ids = ids[: n_prompt + len(out.scores)]
            hidden_prompt = np.zeros((n_prompt, self.d_model), dtype=np.float32)
            hidden = np.concatenate(
                [hidden_prompt, np.stack(hidden_rows).astype(np.float32)], axis=0
            )
            caption = self.processor.tokenizer.decode(
                [t for t, m in zip(ids, mask) if m], skip_special_tokens=True
            ).strip()
            candidates.append(
                DecodedCandidate(
                    caption=caption,
                    token_ids=[int(t) for t in ids],
                    token_logprobs=logprobs,
                    token_mask=mask,
                    hidden_states=hidden,
                )
            )
        return candidates

    def embed_clap(self, texts: list[str]) -> np.ndarray:
        torch = self.torch
        with torch.no_grad():
            inputs = self.clap_processor(text=texts, return_tensors="pt", padding=True)
            feats = self.clap.get_text_features(**{k: v.to(self.device) for k, v in inputs.items()})
        return feats.float().cpu().numpy().astype(np.float32)

    def embed_sbert(self, texts: list[str]) -> np.ndarray:
        return np.asarray(
            self.sbert.encode(texts, convert_to_numpy=True, normalize_embeddings=False),
            dtype=np.float32,
        )


def make_backend(name: str, **kwargs):
    if name == "synthetic":
        return SyntheticBackend()
    if name == "real":
        return RealBackend(**kwargs)
    raise ValueError(f"unknown backend {name!r}")
