"""Append-only JSONL result store."""
import hashlib
import json
import os
from pathlib import Path


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    return hashlib.sha256(canonical(obj).encode()).hexdigest()[:20]


class Store:
    """One JSON object per line. Rows are only ever appended.

    A trailing line without a newline is an interrupted write and is ignored
    by readers.
    """

    def __init__(self, path):
        self.path = Path(path)

    def rows(self, kind=None):
        if not self.path.exists():
            return []
        out = []
        with open(self.path) as fh:
            for line in fh:
                if not line.endswith("\n"):
                    break
                row = json.loads(line)
                if kind is None or row.get("kind") == kind:
                    out.append(row)
        return out

    def completed(self, kind=None):
        return {r["job_id"] for r in self.rows(kind) if r.get("status") == "ok"}

    def append(self, row):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._truncate_partial()
        with open(self.path, "a") as fh:
            fh.write(canonical(row) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _truncate_partial(self):
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        if data and not data.endswith(b"\n"):
            cut = data.rfind(b"\n") + 1
            with open(self.path, "r+b") as fh:
                fh.truncate(cut)

    def __len__(self):
        return len(self.rows())
