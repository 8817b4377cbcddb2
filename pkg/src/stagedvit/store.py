"""Run store: a plain directory of JSON records, CSV histories, checkpoints.

Layout under the store root::

    records/<cell>.json       one RunRecord per grid cell
    history/<name>.csv        per-epoch loss rows: epoch,phase,lr,mean_loss
    checkpoints/<name>.ckpt   cached pre-train/intermediate (and optional final)
    locks/<name>.lock         per-cell lock files while a cell is running
    tables/, plots/           emitted artifacts

Everything is inspectable with a text editor and diffable; records are
written atomically (temp file + rename) and never rewritten once complete.
Cell names look like ``p2000-noint-f400-r0``; cached phase artifacts are
keyed by what they depend on, e.g. ``pretrain-s2000-r0``.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

HISTORY_FIELDS = ("epoch", "phase", "lr", "mean_loss")


@dataclass
class RunRecord:
    cell: dict
    config_hash: str
    seeds: dict
    status: str = "running"  # running | complete | failed
    error: str | None = None
    metrics: dict | None = None
    phase_seconds: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)
    created: str = ""
    finished: str = ""

    @property
    def complete(self) -> bool:
        return self.status == "complete"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")


class RunStore:
    def __init__(self, root, create: bool = True):
        self.root = Path(root)
        if create:
            for sub in ("records", "history", "checkpoints", "locks", "tables", "plots"):
                (self.root / sub).mkdir(parents=True, exist_ok=True)

    # -- records ---------------------------------------------------------

    def record_path(self, cell_name: str) -> Path:
        return self.root / "records" / f"{cell_name}.json"

    def load_record(self, cell_name: str) -> RunRecord | None:
        path = self.record_path(cell_name)
        if not path.is_file():
            return None
        with open(path, "r", encoding="utf-8") as fh:
            return RunRecord(**json.load(fh))

    def write_record(self, cell_name: str, record: RunRecord, force: bool = False):
        existing = self.load_record(cell_name)
        if existing is not None and existing.complete and not force:
            raise RuntimeError(f"record {cell_name} is complete; refusing to rewrite")
        path = self.record_path(cell_name)
        tmp = path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(asdict(record), fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)

    def record_names(self):
        return sorted(p.stem for p in (self.root / "records").glob("*.json"))

    def records(self):
        return [self.load_record(name) for name in self.record_names()]

    # -- histories -------------------------------------------------------

    def history_path(self, name: str) -> Path:
        return self.root / "history" / f"{name}.csv"

    def write_history(self, name: str, logs, append: bool = False) -> str:
        """Write per-epoch rows (any objects with the HISTORY_FIELDS attrs)."""
        path = self.history_path(name)
        fresh = not (append and path.is_file())
        with open(path, "w" if fresh else "a", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(HISTORY_FIELDS)
            for log in logs:
                writer.writerow([getattr(log, f) for f in HISTORY_FIELDS])
        return str(path.relative_to(self.root))

    def read_history(self, name: str):
        with open(self.history_path(name), "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            row["epoch"] = int(row["epoch"])
            row["lr"] = float(row["lr"])
            row["mean_loss"] = float(row["mean_loss"])
        return rows

    # -- checkpoints and locks ------------------------------------------

    def checkpoint_path(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.ckpt"

    def lock_path(self, name: str) -> Path:
        return self.root / "locks" / f"{name}.lock"

    def try_lock(self, name: str) -> bool:
        """Take the named lock; False means another worker holds it."""
        try:
            fd = os.open(self.lock_path(name), os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            return False
        os.write(fd, f"pid={os.getpid()} at={_now()}\n".encode())
        os.close(fd)
        return True

    def unlock(self, name: str):
        try:
            os.unlink(self.lock_path(name))
        except FileNotFoundError:
            pass

    def clear_locks(self) -> int:
        locks = list((self.root / "locks").glob("*.lock"))
        for path in locks:
            path.unlink()
        return len(locks)

    # -- emitted artifacts ----------------------------------------------

    def table_path(self, name: str) -> Path:
        return self.root / "tables" / name

    def plot_path(self, name: str) -> Path:
        return self.root / "plots" / name
