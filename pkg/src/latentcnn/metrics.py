"""Append-only JSON-lines metrics log."""
from __future__ import annotations

import json
import time
import uuid
from datetime import datetime, timezone
from pathlib import Path

# One object per line. ``stage`` tells apart records of the same
# (epoch, split) written by different parts of a run, e.g. backbone
# pretraining vs. SVM-head training.
METRICS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["run_id", "timestamp", "epoch", "split", "error_rate", "mean_objective", "wall_time"],
    "additionalProperties": False,
    "properties": {
        "run_id": {"type": "string", "minLength": 1},
        "timestamp": {"type": "string", "format": "date-time"},
        "epoch": {"type": "integer", "minimum": 0},
        "split": {"enum": ["train", "test"]},
        "error_rate": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "mean_objective": {"type": ["number", "null"]},
        "wall_time": {"type": "number", "minimum": 0},
        "stage": {"type": "string"},
        "seed": {"type": "integer"},
    },
}


class MetricsWriter:
    def __init__(self, path, run_id=None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id or uuid.uuid4().hex[:12]
        self._t0 = time.perf_counter()

    def __call__(self, record):
        rec = {
            "run_id": self.run_id,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "epoch": int(record.get("epoch", 0)),
            "split": record.get("split", "train"),
            "error_rate": record.get("error_rate"),
            "mean_objective": record.get("mean_objective"),
            "wall_time": round(time.perf_counter() - self._t0, 4),
        }
        for key in ("stage", "seed"):
            if key in record:
                rec[key] = record[key]
        with open(self.path, "a") as f:
            f.write(json.dumps(rec) + "\n")
        return rec


def read_metrics(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
