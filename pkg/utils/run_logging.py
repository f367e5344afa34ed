"""
Run logging
-----------

Diagnostics go through structlog (`configure_logging` once per process).
Run records that tools read back are written separately as JSON lines and
CSV by `RunRecorder`:
  - events.jsonl      search loop state machine events
  - controller.jsonl  one row per REINFORCE step
  - metrics.jsonl     evaluation reports
  - metrics.csv       the same reports as a flat curve
"""

import csv
import io
import json
import logging
import os
from typing import Iterable

import structlog

METRIC_FIELDS = ("phase", "iteration", "genotype", "IS_mean", "IS_std", "FID", "reward", "n_samples")
EVENTS_FILE = "events.jsonl"
CONTROLLER_FILE = "controller.jsonl"
METRICS_FILE = "metrics.jsonl"
METRICS_CSV = "metrics.csv"


def configure_logging(level: str = "INFO", json_output: bool = False) -> None:
    processors = [
        structlog.processors.add_log_level,
        structlog.processors.TimeStamper(fmt="iso"),
    ]
    renderer = structlog.processors.JSONRenderer() if json_output else structlog.dev.ConsoleRenderer(colors=False)
    structlog.configure(
        processors=processors + [renderer],
        wrapper_class=structlog.make_filtering_bound_logger(logging.getLevelName(level.upper())),
        cache_logger_on_first_use=False,
    )


def _jsonable(value):
    if isinstance(value, float) and value != value:
        return None
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def to_json_line(row: dict) -> str:
    return json.dumps(_jsonable(row), sort_keys=True, default=str)


def read_json_lines(path: str) -> list[dict]:
    if not os.path.exists(path):
        return []
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def rows_to_csv(rows: Iterable[dict], fieldnames: Iterable[str]) -> str:
    output = io.StringIO()
    writer = csv.DictWriter(output, fieldnames=list(fieldnames), quoting=csv.QUOTE_MINIMAL, extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow(_jsonable(row))
    return output.getvalue()


class RunRecorder:
    """
    Collects the run's records in memory and, when given an output directory,
    appends each row to its file as it arrives.
    """

    def __init__(self, out_dir: str | None = None):
        """
        :param out_dir: run directory; None keeps records in memory only
        """
        self.out_dir = out_dir
        self.events: list[dict] = []
        self.controller_rows: list[dict] = []
        self.metric_rows: list[dict] = []
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    def _append(self, filename: str, row: dict) -> None:
        if not self.out_dir:
            return
        with open(os.path.join(self.out_dir, filename), "a", encoding="utf-8") as f:
            f.write(to_json_line(row) + "\n")

    def event(self, kind: str, iteration: int, **fields) -> dict:
        row = {"event": kind, "iteration": iteration, **fields}
        self.events.append(row)
        self._append(EVENTS_FILE, row)
        return row

    def controller_step(self, **fields) -> dict:
        self.controller_rows.append(fields)
        self._append(CONTROLLER_FILE, fields)
        return fields

    def metrics(self, phase: str, iteration: int, genotype: str, is_mean, is_std, fid, reward, n_samples) -> dict:
        row = dict(zip(METRIC_FIELDS, (phase, iteration, genotype, is_mean, is_std, fid, reward, n_samples)))
        self.metric_rows.append(row)
        self._append(METRICS_FILE, row)
        if self.out_dir:
            path = os.path.join(self.out_dir, METRICS_CSV)
            new_file = not os.path.exists(path)
            with open(path, "a", encoding="utf-8", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=METRIC_FIELDS, quoting=csv.QUOTE_MINIMAL)
                if new_file:
                    writer.writeheader()
                writer.writerow(_jsonable(row))
        return row

    def event_trace(self) -> list[tuple[str, int]]:
        """(event, iteration) pairs, the part of the log the state machine determines."""
        return [(e["event"], e["iteration"]) for e in self.events]

    def counts(self) -> dict[str, int]:
        return {"events": len(self.events), "controller": len(self.controller_rows), "metrics": len(self.metric_rows)}

    def clear(self) -> None:
        """Drop every record, on disk too; a fresh run starts from empty files."""
        self.events, self.controller_rows, self.metric_rows = [], [], []
        if not self.out_dir:
            return
        for filename in (EVENTS_FILE, CONTROLLER_FILE, METRICS_FILE, METRICS_CSV):
            path = os.path.join(self.out_dir, filename)
            if os.path.exists(path):
                os.remove(path)

    def restore(self, counts: dict[str, int]) -> None:
        """Reload the rows written up to a checkpoint and drop anything after it."""
        if not self.out_dir:
            return
        self.events = read_json_lines(os.path.join(self.out_dir, EVENTS_FILE))[: counts["events"]]
        self.controller_rows = read_json_lines(os.path.join(self.out_dir, CONTROLLER_FILE))[: counts["controller"]]
        self.metric_rows = read_json_lines(os.path.join(self.out_dir, METRICS_FILE))[: counts["metrics"]]
        for filename, rows in (
            (EVENTS_FILE, self.events),
            (CONTROLLER_FILE, self.controller_rows),
            (METRICS_FILE, self.metric_rows),
        ):
            with open(os.path.join(self.out_dir, filename), "w", encoding="utf-8") as f:
                f.writelines(to_json_line(row) + "\n" for row in rows)
        with open(os.path.join(self.out_dir, METRICS_CSV), "w", encoding="utf-8", newline="") as f:
            f.write(rows_to_csv(self.metric_rows, METRIC_FIELDS))
