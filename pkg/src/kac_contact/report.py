"""Study reports: per-rung rows, a verdict, CSV and JSON export."""
import csv
import hashlib
import json
import os
from dataclasses import dataclass, field


@dataclass
class StudyReport:
    study: str
    rows: list
    verdict: dict
    config: dict
    extra: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.verdict.get("passed"))


@dataclass
class ConvergenceReport(StudyReport):
    """Ladder report; every row carries ``sup_error`` and ``max_se``."""

    @property
    def errors(self):
        return [r["sup_error"] for r in self.rows]

    @property
    def monotone(self):
        e = self.errors
        return all(b < a for a, b in zip(e, e[1:]))

    @property
    def final_error(self):
        return self.errors[-1]


def content_hash(config):
    """Git-style blob hash (sha256) of the canonical config JSON and any kernel table."""
    data = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    table = (config.get("kernel") or {}).get("table")
    if isinstance(table, str) and os.path.exists(table):
        with open(table, "rb") as fh:
            data += b"\0" + fh.read()
    return hashlib.sha256(b"blob %d\0" % len(data) + data).hexdigest()


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return str(v).lower()
    return v


def emit_report(report, out_dir):
    """Write ``<study>_rungs.csv`` and ``<study>_summary.json``; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{report.study}_rungs.csv")
    json_path = os.path.join(out_dir, f"{report.study}_summary.json")
    cols = []
    for row in report.rows:
        cols += [c for c in row if c not in cols]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in report.rows:
            w.writerow([_cell(row.get(c, "")) for c in cols])
    summary = {
        "study": report.study,
        "kind": type(report).__name__,
        "config": report.config,
        "content_hash": content_hash(report.config),
        "rows": report.rows,
        "extra": report.extra,
        "verdict": report.verdict,
    }
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, json_path


def load_report(path):
    """Reload a ``*_summary.json`` written by :func:`emit_report`."""
    with open(path) as fh:
        s = json.load(fh)
    cls = ConvergenceReport if s.get("kind") == "ConvergenceReport" else StudyReport
    return cls(s["study"], s["rows"], s["verdict"], s["config"], s.get("extra", {}))
