"""Run artifacts: CSV tables, SVG figures, the manifest and a plain-text report."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np


def blob_sha1(data: bytes) -> str:
    """Content hash in git's blob convention."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        # repr round-trips exactly, so reruns are byte-comparable
        return repr(float(v))
    return v


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


def log_plot(path: Path, series: dict, xlabel: str, ylabel: str, title: str, logy: bool = False) -> Path:
    """One SVG figure: each entry of ``series`` is ``label -> (x, y)``, ``x`` on a log axis."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "kwl", "svg.fonttype": "none",
                                "font.size": 9, "axes.grid": True, "grid.alpha": 0.3}):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for label, (x, y) in series.items():
            ax.plot(x, y, marker="o", ms=3, lw=1.2, label=label)
        ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        if len(series) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


class CheckLog:
    """Ordered ``(stage, name, ok, detail)`` entries shared by all stages."""

    def __init__(self):
        self.entries = []

    def add(self, stage: str, name: str, ok: bool, detail: str = ""):
        self.entries.append((stage, name, bool(ok), detail))

    def extend(self, stage: str, checks):
        for name, ok, detail in checks:
            self.add(stage, name, ok, detail)

    @property
    def failed(self):
        return [e for e in self.entries if not e[2]]

    def as_list(self):
        return [{"stage": s, "check": n, "passed": ok, "detail": d} for s, n, ok, d in self.entries]

    def render(self) -> str:
        lines = []
        for stage, name, ok, detail in self.entries:
            lines.append(f"[{'PASS' if ok else 'FAIL'}] {stage:<9} {name}" + (f"  ({detail})" if detail else ""))
        return "\n".join(lines) + "\n"
