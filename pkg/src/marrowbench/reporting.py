"""Report assembly, byte-stable serialization and atomic file output."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import __version__
from .bootstrap import BootstrapResult

TOOL = "marrowbench"
FORMATS = ("json", "csv", "markdown")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _clean(obj: Any) -> Any:
    """JSON-ready copy: numpy scalars unwrapped, non-finite floats as null."""
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj: Any) -> str:
    """Canonical JSON: sorted keys, two-space indent, trailing newline."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def metric_entry(estimate: float, ci: BootstrapResult | None = None) -> dict:
    entry: dict[str, Any] = {"estimate": estimate}
    if ci is not None:
        entry["ci"] = {"lower": ci.lower, "upper": ci.upper, "b": ci.B, "alpha": ci.alpha,
                       "mode": ci.mode, "seed": ci.seed, "z0": ci.z0, "a": ci.a, "dropped": ci.dropped}
    return entry


def make_report(command: str, config: Mapping, inputs: Mapping[str, str | Path] | None = None,
                **sections: Any) -> dict:
    """Top-level report: tool version, config echo, input hashes, then ``sections``."""
    report: dict[str, Any] = {
        "tool": TOOL,
        "version": __version__,
        "command": command,
        "config": dict(config),
        "inputs": {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in sorted((inputs or {}).items())},
    }
    report.update(sections)
    return report


# ----------------------------------------------------------------- rendering

def _missing(v: Any) -> bool:
    return v is None or (isinstance(v, (float, np.floating)) and not math.isfinite(v))


def _fmt(v: Any) -> str:
    if _missing(v):
        return "n/a"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def _with_ci(entry: Mapping) -> str:
    text = _fmt(entry.get("estimate"))
    ci = entry.get("ci")
    if ci:
        text += f" ({_fmt(ci['lower'])} - {_fmt(ci['upper'])})"
    return text


def per_class_rows(report: Mapping) -> list[list[str]]:
    """Per-class rows: class, precision, recall, F1, each with its interval when present."""
    rows = []
    for pc in report.get("per_class", []):
        row = [pc["class"]]
        for m in ("precision", "recall", "f1"):
            v = pc[m]
            row.append(_with_ci(v) if isinstance(v, Mapping) else _fmt(v))
        rows.append(row)
    return rows


def _sections(report: Mapping) -> list[tuple[str, Mapping]]:
    """Report parts that hold a metrics block and/or a per-class table."""
    found = []
    if "metrics" in report or "per_class" in report:
        found.append((report.get("command", "report"), report))
    for key in sorted(report):
        val = report[key]
        if isinstance(val, Mapping) and ("metrics" in val or "per_class" in val):
            found.append((key, val))
    return found


def _seed(config: Mapping) -> Any:
    if "seed" in config:
        return config["seed"]
    inner = config.get("config")
    return inner.get("seed", "n/a") if isinstance(inner, Mapping) else "n/a"


def render_markdown(report: Mapping) -> str:
    out = io.StringIO()
    out.write(f"# {report.get('tool', TOOL)} {report.get('command', '')} report\n\n")
    out.write(f"version {report.get('version', '?')}, seed {_seed(report.get('config', {}))}\n")
    for title, sec in _sections(report):
        out.write(f"\n## {title}\n")
        metrics = sec.get("metrics", {})
        if metrics:
            out.write("\n| metric | value |\n|---|---|\n")
            for name in sorted(metrics):
                out.write(f"| {name} | {_with_ci(metrics[name])} |\n")
        rows = per_class_rows(sec)
        if rows:
            out.write("\n| class | precision | recall | F1 |\n|---|---|---|---|\n")
            for r in rows:
                out.write("| " + " | ".join(r) + " |\n")
    return out.getvalue()


def render_csv(report: Mapping) -> str:
    """Flat ``section,name,estimate,lower,upper`` table of every metric and per-class value."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["section", "name", "estimate", "lower", "upper"])

    def emit(section: str, name: str, entry: Any) -> None:
        if isinstance(entry, Mapping):
            ci = entry.get("ci") or {}
            w.writerow([section, name, _raw(entry.get("estimate")), _raw(ci.get("lower")), _raw(ci.get("upper"))])
        else:
            w.writerow([section, name, _raw(entry), "", ""])

    for title, sec in _sections(report):
        for name in sorted(sec.get("metrics", {})):
            emit(title, name, sec["metrics"][name])
        for pc in sec.get("per_class", []):
            for m in ("precision", "recall", "f1"):
                emit(title, f"{m}:{pc['class']}", pc[m])
    return out.getvalue()


def _raw(v: Any) -> str:
    if _missing(v):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(report: Mapping, fmt: str) -> str:
    if fmt == "json":
        return dumps(report)
    if fmt == "markdown":
        return render_markdown(report)
    if fmt == "csv":
        return render_csv(report)
    raise ValueError(f"unknown report format {fmt!r}")


# ------------------------------------------------------------------ file output

def atomic_write_many(files: Mapping[str | Path, str]) -> None:
    """Write every file to a temporary sibling first, then rename them all.

    If any write fails, no target is touched and the temporaries are removed.
    """
    staged: list[tuple[str, Path]] = []
    try:
        for target, text in files.items():
            target = Path(target)
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
            staged.append((tmp, target))
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        for tmp, target in staged:
            os.replace(tmp, target)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise


def atomic_write(path: str | Path, text: str) -> None:
    atomic_write_many({path: text})
