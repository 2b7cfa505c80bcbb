import json
import math
from fractions import Fraction

import numpy as np
import pytest

from kserver_lab.harness import (
    CSV_HEADER, STEP_COLUMNS, PipelineConfig, StageError, UnknownKind, default_sigma,
    emit_report, evaluate_fractional, gap_witness, gap_witness_exact, gen_gap_instance,
    gen_requests, predicted_bound, report_json, run_pipeline, save_requests,
)
from kserver_lab.hst import uniform_hst
from kserver_lab.metric import random_metric, uniform_metric


def test_gap_instance_shape():
    inst = gen_gap_instance(3, 4)
    assert [s.location for s in inst.steps] == [0, 1, 0, 1]
    assert inst.steps[0].h == (1.0, 1.0, 1.0, 0.0)
    assert inst.steps[1].h == (1.0, 0.0, 0.0, 0.0)
    assert all(s.kappa == 3 for s in inst.steps)
    assert len(gen_gap_instance(2, 1).steps) == 1
    with pytest.raises(ValueError):
        gen_gap_instance(0, 3)


@pytest.mark.parametrize("k,T", [(3, 7), (5, 20), (4, 1)])
def test_gap_witness_cost(k, T):
    hit, move = evaluate_fractional(gen_gap_instance(k, T), gap_witness_exact(k))
    assert move == 0
    assert hit == Fraction(math.ceil(T / 2), k)


def test_gap_witness_single_step():
    inst = gen_gap_instance(5, 1)
    hit, move = evaluate_fractional(inst, gap_witness_exact(5))
    assert (hit, move) == (Fraction(1, 5), 0)
    hit_f, _ = evaluate_fractional(inst, gap_witness(5))
    assert hit_f == Fraction(1, 5)


def test_evaluate_per_step_movement():
    inst = gen_gap_instance(1, 2)
    a = [[1, 0], [0, 1]]
    b = [[0, 1], [0, 1]]
    hit, move = evaluate_fractional(inst, [a, b], per_step=True)
    assert hit == 1 and move == 1


def test_request_generators(tmp_path):
    a = gen_requests("random-leaf", {"n": 4, "T": 10}, np.random.default_rng(7))
    b = gen_requests("random-leaf", {"n": 4, "T": 10}, np.random.default_rng(7))
    assert a == b and len(a) == 10 and set(a) <= {0, 1, 2, 3}
    assert gen_requests("adversarial-alternating", {"T": 5}, None) == [0, 1, 0, 1, 0]
    pages = gen_requests("uniform-paging", {"n": 6, "k": 2, "T": 9}, np.random.default_rng(1))
    assert sorted(pages[:3]) == [0, 1, 2]
    save_requests(a, tmp_path / "r.json")
    assert gen_requests("replay", {"path": tmp_path / "r.json"}, None) == a
    with pytest.raises(UnknownKind):
        gen_requests("zipf", {}, None)


def test_predicted_bound_recurrence():
    p = predicted_bound(2, 4, 0.5, 20.0)
    g = (1.5) * (1 + 3 / 20) + math.log(8) / 20
    assert p["gamma"] == pytest.approx(g)
    assert p["beta"] == pytest.approx(g * (g + math.log(8)) + math.log(8))
    assert p["heuristic"]
    assert default_sigma(1, 2) == 16
    assert default_sigma(10, 100) == math.ceil(10 * math.log(1001))


def test_pipeline_uniform_has_no_violations():
    r = run_pipeline(PipelineConfig(k=2, T=20, seed=3, metric=uniform_metric(4), sigma=Fraction(16)))
    assert r.violation_count == 0
    assert math.isfinite(r.ratios["rounding_vs_metric_opt"])
    assert len(r.steps) == 20 and len(r.samples) == 20
    assert all(step["request"] in sample for step, sample in zip(r.steps, r.samples))


def test_saturated_servers_cost_nothing():
    r = run_pipeline(PipelineConfig(k=4, T=12, seed=0, metric=uniform_metric(4)))
    assert r.totals["rounding_cost"] == 0 and r.violation_count == 0


def test_single_point_metric():
    r = run_pipeline(PipelineConfig(k=1, T=5, seed=0, metric=uniform_metric(1)))
    assert all(v == 0 for v in r.totals.values())
    assert r.opt["metric"] == 0


def test_pipeline_on_given_tree():
    t = uniform_hst([2, 3], 10)
    r = run_pipeline(PipelineConfig(k=2, T=10, seed=1, tree=t))
    assert r.opt["metric"] is None and r.violation_count == 0


def test_stage_errors_are_annotated():
    with pytest.raises(StageError) as info:
        run_pipeline(PipelineConfig(k=2, T=3, seed=0, metric=uniform_metric(3), start=[0]))
    assert info.value.stage == "compose"


def test_report_bytes_are_stable(tmp_path):
    cfg = PipelineConfig(k=2, T=8, seed=5, metric=random_metric(4, np.random.default_rng(2)))
    p1, j1 = emit_report(run_pipeline(cfg), tmp_path / "a.csv")
    p2, j2 = emit_report(run_pipeline(cfg), tmp_path / "b.csv")
    assert p1.read_bytes() == p2.read_bytes()
    assert j1.read_bytes() == j2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == CSV_HEADER
    assert lines[1].split(",") == STEP_COLUMNS + ["violations"]
    data = json.loads(j1.read_text())
    assert "wall_times" not in data and data["schema"] == 1


def test_empty_report_is_header_only(tmp_path):
    path, side = emit_report(None, tmp_path / "e.csv")
    assert side is None
    assert path.read_text() == CSV_HEADER + "\n" + ",".join(STEP_COLUMNS + ["violations"]) + "\n"
