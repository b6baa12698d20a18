"""noduleagent/memory.py.

Append-only case memory.  Every case owns one JSON-lines file
`<root>/<case_id>.jsonl`; each line is one record

    {"case_id": str, "kind": str, "payload": {...},
     "sequence": int, "timestamp": ISO-8601 str}

with sequences 1, 2, ... in file order.
"""

import json
import logging
import os
import re
import threading
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta, timezone
from os.path import exists, join
from typing import Dict, List, Sequence

from noduleagent.exceptions import MemoryStoreError, RecordSchemaError

logger = logging.getLogger(__name__)

KINDS = {
    "NoduleImage": ("z_indices", "masks"),
    "NoduleSize": ("long_diameter_mm", "short_diameter_mm", "height_mm", "volume_mm3"),
    "CTReport": ("text", "provenance"),
    "Conversation": ("round", "agent_id", "grade", "confidence", "rationale", "citations"),
    "Summary": ("round", "text"),
}
"""Record kinds and the payload keys each requires."""

_CASE_ID = re.compile(r"^[A-Za-z0-9._-]+$")


@dataclass(frozen=True)
class MemoryRecord:
    case_id: str
    kind: str
    payload: dict
    sequence: int
    timestamp: str

    @classmethod
    def inflate(cls, data):
        return cls(**data)


class LogicalClock:
    """Timestamps derived from the sequence number alone, one second apart."""

    def __init__(self, epoch=datetime(2000, 1, 1, tzinfo=timezone.utc)):
        self.epoch = epoch

    def __call__(self, sequence):
        return (self.epoch + timedelta(seconds=sequence)).isoformat()


def wall_clock(sequence):
    return datetime.now(timezone.utc).isoformat()


def validate_payload(kind, payload):
    if kind not in KINDS:
        raise RecordSchemaError(f"unknown record kind {kind!r}")
    if not isinstance(payload, dict):
        raise RecordSchemaError(f"{kind} payload must be an object")
    missing = [key for key in KINDS[kind] if key not in payload]
    if missing:
        raise RecordSchemaError(f"{kind} payload lacks {missing}")
    try:
        json.dumps(payload)
    except (TypeError, ValueError) as err:
        raise RecordSchemaError(f"{kind} payload is not JSON: {err}") from err


def _string_values(value):
    """Every string leaf of a JSON value, depth first."""
    if isinstance(value, str):
        yield value
    elif isinstance(value, dict):
        for item in value.values():
            yield from _string_values(item)
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _string_values(item)


class CaseMemory:
    """Durable per-case record store.

    Writes to one case are serialized; readers never see a half-written
    record, because an unterminated trailing line is ignored.
    """

    def __init__(self, root, clock=wall_clock):
        self.root = root
        self.clock = clock
        self._locks: Dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        try:
            os.makedirs(root, exist_ok=True)
        except OSError as err:
            raise MemoryStoreError(f"cannot create memory root {root}: {err}") from err

    def _path(self, case_id):
        if not isinstance(case_id, str) or not _CASE_ID.match(case_id):
            raise RecordSchemaError(f"invalid case id {case_id!r}")
        return join(self.root, f"{case_id}.jsonl")

    def _lock(self, case_id):
        with self._locks_guard:
            return self._locks.setdefault(case_id, threading.Lock())

    def _read(self, case_id) -> List[MemoryRecord]:
        path = self._path(case_id)
        if not exists(path):
            return []
        try:
            with open(path, "r", encoding="utf-8") as f:
                content = f.read()
        except OSError as err:
            raise MemoryStoreError(f"cannot read {path}: {err}") from err

        lines = content.split("\n")
        # the last piece is either empty or an unterminated partial write
        records = []
        for number, line in enumerate(lines[:-1], start=1):
            try:
                records.append(MemoryRecord.inflate(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as err:
                raise MemoryStoreError(f"{path}:{number} is corrupt: {err}") from err
        if lines[-1]:
            logger.warning("%s ends in a partial record, ignored", path)
        return records

    @staticmethod
    def _drop_partial(path):
        """Truncates an unterminated trailing line, so that the next append
        starts on a fresh line."""
        if not exists(path):
            return
        try:
            with open(path, "rb+") as f:
                content = f.read()
                if content and not content.endswith(b"\n"):
                    f.truncate(content.rfind(b"\n") + 1)
        except OSError as err:
            raise MemoryStoreError(f"cannot repair {path}: {err}") from err

    def put(self, case_id, kind, payload) -> int:
        """Appends one record and returns its sequence number."""
        validate_payload(kind, payload)
        path = self._path(case_id)
        with self._lock(case_id):
            sequence = len(self._read(case_id)) + 1
            self._drop_partial(path)
            record = MemoryRecord(case_id, kind, payload, sequence, self.clock(sequence))
            line = json.dumps(asdict(record), sort_keys=True)
            try:
                with open(path, "a", encoding="utf-8") as f:
                    f.write(line + "\n")
                    f.flush()
                    os.fsync(f.fileno())
            except OSError as err:
                raise MemoryStoreError(f"cannot append to {path}: {err}") from err
        logger.debug("memory %s #%d %s", case_id, sequence, kind)
        return sequence

    def records(self, case_id) -> List[MemoryRecord]:
        return self._read(case_id)

    def get(self, case_id, kind) -> List[MemoryRecord]:
        return [r for r in self._read(case_id) if r.kind == kind]

    def recall(self, case_id, keywords: Sequence[str]) -> List[MemoryRecord]:
        """Records with a payload string value containing at least one
        keyword, case-insensitively.  Payload keys never match.  No keywords
        recall nothing."""
        needles = [k.lower() for k in keywords if k]
        if not needles:
            return []
        recalled = []
        for record in self._read(case_id):
            texts = [s.lower() for s in _string_values(record.payload)]
            if any(n in t for n in needles for t in texts):
                recalled.append(record)
        return recalled

    def cases(self) -> List[str]:
        return sorted(
            name[: -len(".jsonl")] for name in os.listdir(self.root) if name.endswith(".jsonl")
        )
