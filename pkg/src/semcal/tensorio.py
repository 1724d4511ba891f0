"""Binary tensor interchange format and JSONL evaluation manifests.

Tensor file layout (all integers little-endian):

    magic      4 bytes, ASCII "SEMC"
    version    u16, currently 1
    dtype_code u8, one of f32=0, f64=1, u32=2
    rank       u8, at most 4
    dims       rank x u64
    payload    row-major values, little-endian, prod(dims) elements

Reads are the exact inverse of writes, bit for bit. The manifest is JSON
Lines, one example record per line; loading validates every record and
never repairs anything. Tensor payloads referenced by a manifest are
resolved lazily; validation only touches headers.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ValidationError

MAGIC = b"SEMC"
VERSION = 1
MAX_RANK = 4

DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u4")}
CODE_BY_NAME = {"f32": 0, "f64": 1, "u32": 2}
NAME_BY_CODE = {code: name for name, code in CODE_BY_NAME.items()}

FAMILIES = ("clap", "sbert")
ROLE_CANDIDATES = "candidates"
ROLE_REFERENCES = "references"
ROLES = (ROLE_CANDIDATES, ROLE_REFERENCES)

SCHEMA_VERSION = 1

_HEADER = struct.Struct("<4sHBB")


def _dtype_code(dtype: int | str) -> int:
    if isinstance(dtype, str):
        try:
            return CODE_BY_NAME[dtype]
        except KeyError:
            raise ValidationError(f"unknown dtype name {dtype!r}") from None
    if dtype not in DTYPE_BY_CODE:
        raise ValidationError(f"unknown dtype code {dtype}")
    return int(dtype)


def write_tensor(
    values: Sequence[float] | np.ndarray,
    dims: Sequence[int],
    dtype: int | str,
    path: str | Path,
) -> None:
    """Write values as a tensor file with the given dims and dtype.

    The element count must equal prod(dims). Values are cast to the
    target dtype before writing; pass data already in that dtype for
    bit-exact round-trips.
    """
    code = _dtype_code(dtype)
    dims = [int(d) for d in dims]
    if len(dims) > MAX_RANK:
        raise ValidationError(f"rank {len(dims)} exceeds maximum {MAX_RANK}")
    if any(d < 0 for d in dims):
        raise ValidationError(f"negative dimension in {dims}")
    arr = np.asarray(values, dtype=DTYPE_BY_CODE[code]).reshape(-1)
    count = math.prod(dims)
    if arr.size != count:
        raise ValidationError(
            f"value count {arr.size} does not match prod(dims)={count} for dims {dims}"
        )
    header = _HEADER.pack(MAGIC, VERSION, code, len(dims))
    dims_bytes = struct.pack(f"<{len(dims)}Q", *dims) if dims else b""
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(dims_bytes)
            fh.write(arr.tobytes())
    except OSError as exc:
        raise ValidationError(f"cannot write tensor file {path}: {exc}") from None


def _read_header(fh, path) -> tuple[int, list[int]]:
    raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, version, code, rank = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    if code not in DTYPE_BY_CODE:
        raise ValidationError(f"{path}: unknown dtype code {code}")
    if rank > MAX_RANK:
        raise ValidationError(f"{path}: rank {rank} exceeds maximum {MAX_RANK}")
    dims_raw = fh.read(8 * rank)
    if len(dims_raw) < 8 * rank:
        raise ValidationError(f"{path}: truncated dims")
    dims = list(struct.unpack(f"<{rank}Q", dims_raw)) if rank else []
    return code, dims


def read_tensor(path: str | Path) -> tuple[np.ndarray, list[int], str]:
    """Read a tensor file, returning (values, dims, dtype name).

    Values come back shaped to dims. Errors out on bad magic, unknown
    version or dtype, and any payload size mismatch.
    """
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ValidationError(f"cannot read tensor file {path}: {exc}") from None
    with fh:
        code, dims = _read_header(fh, path)
        dtype = DTYPE_BY_CODE[code]
        count = math.prod(dims)
        payload = fh.read()
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise ValidationError(
            f"{path}: payload is {len(payload)} bytes, dims {dims} imply {expected}"
        )
    values = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return values, dims, NAME_BY_CODE[code]


def read_tensor_shape(path: str | Path) -> tuple[list[int], str]:
    """Read only the header of a tensor file: (dims, dtype name)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ValidationError(f"cannot read tensor file {path}: {exc}") from None
    with fh:
        code, dims = _read_header(fh, path)
    return dims, NAME_BY_CODE[code]


@dataclass
class CandidateRecord:
    """One generated caption with its token-level arrays.

    token_mask marks generated content tokens; prompt/BOS/EOS/pad
    positions are False and are excluded from every downstream mean,
    length, and cumulative log-probability.
    """

    caption: str
    token_ids: list[int]
    token_logprobs: list[float]
    token_mask: list[bool]
    hidden_state_ref: str | None = None
    mean_confidence: float | None = None

    def content_length(self) -> int:
        return sum(1 for m in self.token_mask if m)

    def content_logprob(self) -> float:
        return float(sum(lp for lp, m in zip(self.token_logprobs, self.token_mask) if m))


@dataclass
class ExampleRecord:
    """One audio clip: reference captions, candidates, embedding refs."""

    example_id: str
    references: list[str]
    candidates: list[CandidateRecord]
    embedding_refs: dict[tuple[str, str], str] = field(default_factory=dict)


class TensorResolver:
    """Maps tensor refs from a manifest to shapes and values."""

    def shape(self, ref: str) -> list[int]:
        raise NotImplementedError

    def load(self, ref: str) -> np.ndarray:
        raise NotImplementedError


class DiskResolver(TensorResolver):
    """Resolves refs as paths relative to the manifest directory."""

    def __init__(self, base_dir: str | Path):
        self.base_dir = Path(base_dir)
        self._cache: dict[str, np.ndarray] = {}

    def path(self, ref: str) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else self.base_dir / p

    def shape(self, ref: str) -> list[int]:
        path = self.path(ref)
        if not path.exists():
            raise ValidationError(f"dangling tensor path {ref!r}")
        dims, _ = read_tensor_shape(path)
        return dims

    def load(self, ref: str) -> np.ndarray:
        if ref not in self._cache:
            path = self.path(ref)
            if not path.exists():
                raise ValidationError(f"dangling tensor path {ref!r}")
            values, _, _ = read_tensor(path)
            self._cache[ref] = values
        return self._cache[ref]


class DictResolver(TensorResolver):
    """In-memory resolver, mainly for tests and synthetic sets."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self.tensors = dict(tensors or {})

    def shape(self, ref: str) -> list[int]:
        try:
            return list(self.tensors[ref].shape)
        except KeyError:
            raise ValidationError(f"dangling tensor path {ref!r}") from None

    def load(self, ref: str) -> np.ndarray:
        try:
            return self.tensors[ref]
        except KeyError:
            raise ValidationError(f"dangling tensor path {ref!r}") from None


@dataclass
class EvaluationSet:
    """Validated, order-preserving collection of example records."""

    records: list[ExampleRecord]
    resolver: TensorResolver

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ExampleRecord]:
        return iter(self.records)

    def embeddings(self, record: ExampleRecord, family: str, role: str) -> np.ndarray:
        """Embedding matrix (captions x dim) for one family and role."""
        key = (family, role)
        if key not in record.embedding_refs:
            raise ValidationError(
                f"example {record.example_id!r} has no {family!r} embeddings for {role!r}"
            )
        return np.asarray(self.resolver.load(record.embedding_refs[key]), dtype=np.float64)

    def hidden_states(self, candidate: CandidateRecord) -> np.ndarray:
        if candidate.hidden_state_ref is None:
            raise ValidationError("candidate has no hidden_state_ref")
        return np.asarray(self.resolver.load(candidate.hidden_state_ref), dtype=np.float64)


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ValidationError(f"{where}: {msg}")


def _parse_candidate(obj: dict, where: str) -> CandidateRecord:
    _require(isinstance(obj, dict), where, "candidate must be an object")
    for key in ("caption", "token_ids", "token_logprobs", "token_mask"):
        _require(key in obj, where, f"candidate missing field {key!r}")
    caption = obj["caption"]
    _require(isinstance(caption, str), where, "caption must be a string")
    ids = obj["token_ids"]
    lps = obj["token_logprobs"]
    mask = obj["token_mask"]
    _require(
        isinstance(ids, list) and all(isinstance(t, int) and not isinstance(t, bool) for t in ids),
        where,
        "token_ids must be a list of integers",
    )
    _require(
        isinstance(lps, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in lps),
        where,
        "token_logprobs must be a list of numbers",
    )
    _require(
        isinstance(mask, list) and all(isinstance(b, bool) for b in mask),
        where,
        "token_mask must be a list of booleans",
    )
    _require(
        len(ids) == len(lps) == len(mask),
        where,
        f"token arrays differ in length ({len(ids)}, {len(lps)}, {len(mask)})",
    )
    _require(all(x <= 0.0 for x in lps), where, "token_logprobs must all be <= 0")
    ref = obj.get("hidden_state_ref")
    if ref is not None:
        _require(isinstance(ref, str), where, "hidden_state_ref must be a string")
    conf = obj.get("mean_confidence")
    if conf is not None:
        _require(isinstance(conf, (int, float)) and not isinstance(conf, bool), where, "mean_confidence must be a number")
        _require(0.0 <= conf <= 1.0, where, f"mean_confidence {conf} outside [0,1]")
        conf = float(conf)
    return CandidateRecord(
        caption=caption,
        token_ids=list(ids),
        token_logprobs=[float(x) for x in lps],
        token_mask=list(mask),
        hidden_state_ref=ref,
        mean_confidence=conf,
    )


def _parse_embedding_refs(obj: dict, where: str) -> dict[tuple[str, str], str]:
    _require(isinstance(obj, dict), where, "embedding_refs must be an object")
    refs: dict[tuple[str, str], str] = {}
    for key, path in obj.items():
        parts = key.split("/")
        _require(
            len(parts) == 2,
            where,
            f"embedding_refs key {key!r} is not of the form family/role",
        )
        family, role = parts
        _require(family in FAMILIES, where, f"unknown embedding family {family!r}")
        _require(role in ROLES, where, f"unknown embedding role {role!r}")
        _require(isinstance(path, str), where, f"embedding_refs[{key!r}] must be a path string")
        refs[(family, role)] = path
    return refs


def parse_record(obj: dict, where: str) -> ExampleRecord:
    """Parse and structurally validate one manifest record object."""
    _require(isinstance(obj, dict), where, "record must be a JSON object")
    version = obj.get("schema_version", SCHEMA_VERSION)
    _require(version == SCHEMA_VERSION, where, f"unsupported schema_version {version}")
    for key in ("example_id", "references", "candidates"):
        _require(key in obj, where, f"missing field {key!r}")
    example_id = obj["example_id"]
    _require(isinstance(example_id, str) and example_id, where, "example_id must be a non-empty string")
    references = obj["references"]
    _require(
        isinstance(references, list) and references and all(isinstance(r, str) for r in references),
        where,
        "references must be a non-empty list of strings",
    )
    candidates_raw = obj["candidates"]
    _require(isinstance(candidates_raw, list), where, "candidates must be a list")
    candidates = [
        _parse_candidate(c, f"{where} candidate {i}") for i, c in enumerate(candidates_raw)
    ]
    refs = _parse_embedding_refs(obj.get("embedding_refs", {}), where)
    return ExampleRecord(example_id, list(references), candidates, refs)


def validate_record_tensors(record: ExampleRecord, resolver: TensorResolver, where: str) -> None:
    """Check tensor-backed invariants: paths resolve, leading dims match."""
    expected = {
        ROLE_CANDIDATES: len(record.candidates),
        ROLE_REFERENCES: len(record.references),
    }
    for (family, role), ref in record.embedding_refs.items():
        dims = resolver.shape(ref)
        _require(
            len(dims) == 2,
            where,
            f"embedding tensor {ref!r} must be rank 2, got rank {len(dims)}",
        )
        _require(
            dims[0] == expected[role],
            where,
            f"embedding tensor {ref!r} has leading dim {dims[0]}, expected {expected[role]} ({family}/{role})",
        )
    for i, cand in enumerate(record.candidates):
        if cand.hidden_state_ref is not None:
            dims = resolver.shape(cand.hidden_state_ref)
            _require(
                len(dims) == 2,
                where,
                f"hidden-state tensor {cand.hidden_state_ref!r} must be rank 2",
            )
            _require(
                dims[0] == len(cand.token_ids),
                where,
                f"candidate {i}: hidden-state leading dim {dims[0]} != token count {len(cand.token_ids)}",
            )


def load_manifest(path: str | Path, resolver: TensorResolver | None = None) -> EvaluationSet:
    """Load and validate a JSONL manifest. Record i corresponds to line i.

    Raises ValidationError naming the offending line on any malformed
    record, duplicate example_id, dangling tensor path, or shape
    mismatch.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest {path} does not exist")
    if resolver is None:
        resolver = DiskResolver(path.parent)
    records: list[ExampleRecord] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                raise ValidationError(f"{path} line {line_no}: blank line")
            where = f"{path} line {line_no}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{where}: malformed JSON ({exc.msg})") from None
            record = parse_record(obj, where)
            if record.example_id in seen:
                raise ValidationError(
                    f"{where}: duplicate example_id {record.example_id!r} "
                    f"(first seen on line {seen[record.example_id]})"
                )
            seen[record.example_id] = line_no
            validate_record_tensors(record, resolver, where)
            records.append(record)
    return EvaluationSet(records=records, resolver=resolver)


def record_to_json(record: ExampleRecord, schema_version: int | None = None) -> dict:
    """Serialize a record back to the manifest object form."""
    obj: dict = {
        "example_id": record.example_id,
        "references": record.references,
        "candidates": [
            {
                "caption": c.caption,
                "token_ids": c.token_ids,
                "token_logprobs": c.token_logprobs,
                "token_mask": c.token_mask,
                **({"hidden_state_ref": c.hidden_state_ref} if c.hidden_state_ref else {}),
                **({"mean_confidence": c.mean_confidence} if c.mean_confidence is not None else {}),
            }
            for c in record.candidates
        ],
        "embedding_refs": {
            f"{family}/{role}": ref for (family, role), ref in sorted(record.embedding_refs.items())
        },
    }
    if schema_version is not None:
        obj["schema_version"] = schema_version
    return obj


def write_manifest(
    records: Sequence[ExampleRecord],
    path: str | Path,
    schema_version: int | None = None,
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record, schema_version), sort_keys=True))
            fh.write("\n")
