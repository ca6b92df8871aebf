"""Line-delimited JSON metrics log shared by training and rendering runtimes."""

from __future__ import annotations

import json
from pathlib import Path


class MetricsLog:
    """Appends one JSON object per line; None path disables logging."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def read(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
