import json
import math
import sys

import numpy as np
import pytest

from stillflow.errors import EvalError
from stillflow.evaluation import (
    EvalReport,
    aggregate,
    emit_report,
    evaluate_pair,
    measure_rtf,
    read_rows,
    run_external_scorer,
    si_sdr,
)


def direct_si_sdr(s, e):
    alpha = sum(a * b for a, b in zip(e, s)) / sum(a * a for a in s)
    target = [alpha * a for a in s]
    noise = [b - t for b, t in zip(e, target)]
    return 10 * math.log10(sum(t * t for t in target) / sum(n * n for n in noise))


def test_identity_metrics(gen):
    x = gen.standard_normal(4000)
    m = evaluate_pair(x, x)
    assert m == {"lsd": 0.0, "si_sdr": 60.0}


def test_si_sdr_formula(gen):
    s = gen.standard_normal(2000)
    e = s + 0.05 * gen.standard_normal(2000)
    assert abs(si_sdr(s, e) - direct_si_sdr(s, e)) < 1e-6
    assert si_sdr(s, 3 * e) == pytest.approx(si_sdr(s, e), abs=1e-9)


def test_trim_and_errors(gen):
    x = gen.standard_normal(500)
    assert evaluate_pair(x, np.r_[x, np.ones(30)]) == evaluate_pair(x, x)
    with pytest.raises(EvalError):
        evaluate_pair([], x)
    with pytest.raises(EvalError):
        si_sdr(np.zeros(10), x[:10])


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


def test_rtf_stub_clock():
    clock = FakeClock()

    def enhancer(clip):
        clock.now += 0.5 * len(clip) / 8000

    rtf = measure_rtf(enhancer, [np.zeros(8000)] * 3, 8000, clock=clock)
    assert abs(rtf - 0.5) < 0.05
    with pytest.raises(EvalError):
        measure_rtf(enhancer, [], 8000)


def test_rtf_real_sleep_and_warmup():
    import time

    calls = []

    def enhancer(clip):
        calls.append(1)
        time.sleep(0.05 * len(clip) / 800)

    rtf = measure_rtf(enhancer, [np.zeros(800)] * 2, 8000, repeats=3)
    assert rtf > 0 and abs(rtf - 0.5) < 0.05
    assert len(calls) == 1 + 3 * 2


def make_report(gen):
    r = EvalReport(config={"k": 1}, notes=["n"])
    for i in range(5):
        r.add(f"utt{i}", {"lsd": float(gen.uniform(1, 20)), "si_sdr": float(gen.normal(5, 3))})
    r.rtf = {"rtf": 0.25}
    return r


def test_report_round_trip(tmp_path, gen):
    r = make_report(gen)
    csv_path, json_path = emit_report(r, tmp_path / "out" / "report")
    assert read_rows(csv_path) == r.rows
    doc = json.loads(json_path.read_text())
    recomputed = np.mean([v for _, m, v in read_rows(csv_path) if m == "lsd"])
    assert abs(doc["aggregates"]["lsd"]["mean"] - recomputed) < 1e-9
    assert doc["aggregates"] == aggregate(read_rows(csv_path))
    assert doc["schema_version"] == 1 and len(doc["run_id"]) == 40


def test_report_byte_stable(tmp_path, gen):
    r = make_report(gen)
    a = emit_report(r, tmp_path / "a")
    b = emit_report(r, tmp_path / "b.json")
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()
    with pytest.raises(EvalError):
        emit_report(EvalReport(), tmp_path / "empty")


def test_external_scorer(tmp_path):
    script = tmp_path / "scorer.py"
    script.write_text(
        "import json, sys\n"
        "pairs = json.load(sys.stdin)\n"
        "json.dump([{'utterance_id': p['utterance_id'], 'pesq': 1.5} for p in pairs], sys.stdout)\n")
    pairs = [{"utterance_id": "a", "clean": "c.wav", "estimate": "e.wav"}]
    assert run_external_scorer([sys.executable, str(script)], pairs) == [{"utterance_id": "a", "pesq": 1.5}]
    with pytest.raises(EvalError):
        run_external_scorer([sys.executable, "-c", "import sys; sys.exit(3)"], pairs)
