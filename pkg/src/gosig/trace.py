"""Structured trace records and their line-delimited JSON encoding."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

TRACE_SCHEMA = "gosig.trace/1"

# Fixed key order keeps the encoding byte-stable.
RECORD_KEYS = ("t", "kind", "player", "round", "stage", "phase_from", "phase_to",
               "block", "height", "signers", "honest")


class TraceError(ValueError):
    def __init__(self, message: str, line: int = 0, offset: int = 0):
        super().__init__(f"{message} (line {line}, byte offset {offset})")
        self.line = line
        self.offset = offset


class Tracer:
    """Collects transition records; the simulator advances ``now``/``stage``."""

    def __init__(self):
        self.records: list[dict[str, Any]] = []
        self.now = 0.0
        self.stage = 0

    def emit(self, kind: str, **fields: Any) -> dict[str, Any]:
        rec: dict[str, Any] = {"t": round(self.now, 6), "kind": kind, "stage": self.stage}
        rec.update(fields)
        self.records.append(rec)
        return rec


class NullTracer(Tracer):
    def emit(self, kind: str, **fields: Any) -> dict[str, Any]:
        return {}


def _ordered(rec: dict[str, Any]) -> dict[str, Any]:
    out = {k: rec[k] for k in RECORD_KEYS if k in rec}
    for k in sorted(rec):
        if k not in out:
            out[k] = rec[k]
    return out


def encode_record(rec: dict[str, Any]) -> str:
    return json.dumps(_ordered(rec), separators=(",", ":"), allow_nan=False)


def encode_trace(records: Iterable[dict[str, Any]], header: dict[str, Any]) -> bytes:
    lines = [encode_record({"kind": "header", "schema": TRACE_SCHEMA, **header})]
    n = 0
    for rec in records:
        lines.append(encode_record(rec))
        n += 1
    lines.append(encode_record({"kind": "footer", "records": n}))
    return ("\n".join(lines) + "\n").encode()


def trace_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_trace(path: Path, records: Iterable[dict[str, Any]], header: dict[str, Any]) -> str:
    data = encode_trace(records, header)
    Path(path).write_bytes(data)
    return trace_hash(data)


def iter_lines(data: bytes) -> Iterator[tuple[int, int, bytes]]:
    offset = 0
    for lineno, line in enumerate(data.split(b"\n"), start=1):
        yield lineno, offset, line
        offset += len(line) + 1


def parse_trace(data: bytes) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    """Decode a trace, returning (header, records); raises TraceError with offsets."""
    header: Optional[dict[str, Any]] = None
    records: list[dict[str, Any]] = []
    footer: Optional[dict[str, Any]] = None
    last_line, last_offset = 0, 0
    for lineno, offset, line in iter_lines(data):
        last_line, last_offset = lineno, offset
        if not line:
            continue
        if footer is not None:
            raise TraceError("records after footer", lineno, offset)
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"corrupt record: {exc.msg}", lineno, offset + exc.pos) from None
        if not isinstance(rec, dict) or "kind" not in rec:
            raise TraceError("record is not an object with a kind", lineno, offset)
        if header is None:
            if rec["kind"] != "header" or rec.get("schema") != TRACE_SCHEMA:
                raise TraceError("missing or unsupported trace header", lineno, offset)
            header = rec
        elif rec["kind"] == "footer":
            footer = rec
        else:
            records.append(rec)
    if header is None:
        raise TraceError("empty trace", last_line, last_offset)
    if footer is None:
        raise TraceError("truncated trace: no footer", last_line, last_offset)
    if footer.get("records") != len(records):
        raise TraceError(f"footer announces {footer.get('records')} records, found {len(records)}",
                         last_line, last_offset)
    return header, records


def read_trace(path: Path) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    return parse_trace(Path(path).read_bytes())
