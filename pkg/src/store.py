"""Append-only newline-delimited JSON store of RunRecords.

One record per line.  The in-memory index (``(config_hash, seed)`` to the
latest record) is rebuilt from the file on open; when a key appears twice
the later line wins, which is how ``--force-rerun`` replaces a result.  A
trailing line cut short by a crash is skipped.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .harness import RunRecord

STORE_NAME = "records.ndjson"


class ResultsStore:
    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._index: dict[tuple[str, int], RunRecord] = {}
        self.skipped_lines = 0
        self._rebuild()

    @classmethod
    def in_dir(cls, out_dir: str | os.PathLike) -> ResultsStore:
        return cls(Path(out_dir) / STORE_NAME)

    def _rebuild(self) -> None:
        if not self.path.exists():
            return
        lines = self.path.read_text(encoding="utf-8").splitlines()
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                record = RunRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, TypeError) as exc:
                self.skipped_lines += 1
                print(f"[store] skip-line path={self.path} line={lineno} err={exc}")
                continue
            self._index[record.key] = record
        print(f"[store] loaded path={self.path} records={len(self._index)} skipped={self.skipped_lines}")

    def _terminate_partial_line(self) -> None:
        if not self.path.exists() or self.path.stat().st_size == 0:
            return
        with self.path.open("rb") as fh:
            fh.seek(-1, os.SEEK_END)
            last = fh.read(1)
        if last != b"\n":
            with self.path.open("ab") as fh:
                fh.write(b"\n")

    def append(self, record: RunRecord) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._terminate_partial_line()
        line = json.dumps(record.to_dict(), sort_keys=True, separators=(",", ":"))
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._index[record.key] = record

    def has(self, config_hash: str, seed: int) -> bool:
        return (config_hash, seed) in self._index

    def get(self, config_hash: str, seed: int) -> RunRecord | None:
        return self._index.get((config_hash, seed))

    def records(self) -> list[RunRecord]:
        return list(self._index.values())

    def __len__(self) -> int:
        return len(self._index)
