"""Batch evaluation, real-time factor and report files.

CSV rows are ``utterance_id,metric,value``. The JSON report carries the
aggregates (mean, std, count per metric), the RTF summary, an echo of the
run configuration and a run id hashed from the content.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import statistics
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EvalError
from .signal import lsd

REPORT_SCHEMA_VERSION = 1
SI_SDR_CAP_DB = 60.0


def trim_pair(clean, estimate) -> tuple[np.ndarray, np.ndarray]:
    clean = np.asarray(clean, dtype=np.float64).reshape(-1)
    estimate = np.asarray(estimate, dtype=np.float64).reshape(-1)
    n = min(len(clean), len(estimate))
    if n == 0:
        raise EvalError("clean and estimate have no overlapping samples")
    return clean[:n], estimate[:n]


def si_sdr(clean, estimate, cap_db: float = SI_SDR_CAP_DB) -> float:
    """Scale-invariant SDR in dB, capped at ``cap_db`` (a perfect estimate reports the cap)."""
    s, e = trim_pair(clean, estimate)
    ss = float(np.dot(s, s))
    if ss == 0:
        raise EvalError("clean reference is silent")
    target = (np.dot(e, s) / ss) * s
    resid = e - target
    num, den = float(np.dot(target, target)), float(np.dot(resid, resid))
    if den == 0:
        return cap_db
    if num == 0:
        return -cap_db
    return float(min(cap_db, 10 * math.log10(num / den)))


def evaluate_pair(clean, estimate) -> dict[str, float]:
    s, e = trim_pair(clean, estimate)
    return {"lsd": lsd(s, e), "si_sdr": si_sdr(s, e)}


# ---------------------------------------------------------------------------
# Real-time factor


def measure_rtf(enhancer, clips, rate: int, repeats: int = 3, clock=time.perf_counter) -> float:
    """Total processing time over total audio duration, median of ``repeats`` passes.

    One call on the first clip is made first and discarded (warm-up).
    """
    clips = list(clips)
    if not clips:
        raise EvalError("RTF needs at least one clip")
    total_s = sum(len(c) for c in clips) / rate
    if total_s <= 0:
        raise EvalError("RTF test set has zero duration")
    enhancer(clips[0])
    runs = []
    for _ in range(repeats):
        t0 = clock()
        for c in clips:
            enhancer(c)
        runs.append(clock() - t0)
    return statistics.median(runs) / total_s


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    rows: list[tuple[str, str, float]] = field(default_factory=list)
    rtf: dict | None = None
    config: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def add(self, utterance_id: str, metrics: dict[str, float]) -> None:
        for k in sorted(metrics):
            self.rows.append((utterance_id, k, float(metrics[k])))

    def aggregates(self) -> dict[str, dict]:
        return aggregate(self.rows)

    def mean(self, metric: str) -> float:
        return self.aggregates()[metric]["mean"]


def aggregate(rows) -> dict[str, dict]:
    by: dict[str, list[float]] = {}
    for _, m, v in rows:
        by.setdefault(m, []).append(float(v))
    return {m: {"mean": float(np.mean(v)), "std": float(np.std(v)), "count": len(v)}
            for m, v in sorted(by.items())}


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["utterance_id", "metric", "value"])
    for u, m, v in rows:
        w.writerow([u, m, repr(float(v))])
    return buf.getvalue()


def read_rows(path) -> list[tuple[str, str, float]]:
    with open(path, newline="") as fh:
        return [(r["utterance_id"], r["metric"], float(r["value"])) for r in csv.DictReader(fh)]


def emit_report(report: EvalReport, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.json``; identical reports give identical bytes."""
    if not report.rows:
        raise EvalError("refusing to write an empty report")
    base = Path(path)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_text = _csv_text(report.rows)
    body = {"schema_version": REPORT_SCHEMA_VERSION, "aggregates": report.aggregates(),
            "rtf": report.rtf, "config": report.config, "notes": list(report.notes)}
    run_id = hashlib.sha1((csv_text + json.dumps(body, sort_keys=True)).encode()).hexdigest()
    body["run_id"] = run_id
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    for p, text in ((csv_path, csv_text), (json_path, json.dumps(body, indent=1, sort_keys=True) + "\n")):
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(text)
        tmp.replace(p)
    return csv_path, json_path


# ---------------------------------------------------------------------------
# External scorers (PESQ, ESTOI, DNSMOS, ...)


def run_external_scorer(command: list[str], pairs: list[dict], timeout: float = 600.0) -> list[dict]:
    """Run a scorer process.

    Protocol: stdin receives a JSON list of ``{"utterance_id", "clean", "estimate"}``
    (WAV paths); stdout must be a JSON list of ``{"utterance_id", <metric>: value, ...}``.
    """
    try:
        proc = subprocess.run(command, input=json.dumps(pairs), capture_output=True, text=True,
                              timeout=timeout, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise EvalError(f"external scorer failed to run: {exc}") from exc
    if proc.returncode != 0:
        raise EvalError(f"external scorer exited {proc.returncode}: {proc.stderr.strip()[:200]}")
    try:
        scores = json.loads(proc.stdout)
    except json.JSONDecodeError as exc:
        raise EvalError(f"external scorer wrote invalid JSON: {exc}") from exc
    if not isinstance(scores, list) or len(scores) != len(pairs):
        raise EvalError("external scorer must return one score object per pair")
    return scores
