import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from kserver_lab.allocation import (
    AllocationInstance, AllocState, AllocStep, BadDistribution, CostVector, Diagnostics,
    EpsOutOfRange, NotMonotone, QuotaInfeasible, check_step_inequalities, event_budget,
    fix_stage, hit_stage, init_state, lambda_from_cost_vector, load_instance,
    potential_phi_h, potential_phi_m, random_instance, run_allocation, save_instance, serve,
    state_to_distributions, cost_bound_report,
)
from kserver_lab.harness import gen_gap_instance
from kserver_lab.oracle import brute_force_allocation_opt


def test_parameters():
    s = init_state([1.0], 3, 1.0, [[0, 0, 0, 1]])
    assert s.beta == pytest.approx(0.25)
    assert s.alpha == pytest.approx(math.log(5))


def test_point_mass_and_cumulative_rows():
    assert init_state([1.0], 3, 1.0, [[0, 1, 0, 0]]).y.tolist() == [[0, 1, 1]]
    assert init_state([1.0], 2, 1.0, [[0.5, 0, 0.5]]).y.tolist() == [[0.5, 0.5]]


def test_distribution_round_trip_examples():
    s = init_state([1.0], 2, 1.0, [[0, 0, 1]])
    assert state_to_distributions(s).tolist() == [[0, 0, 1]]
    s.y[:] = 1.0
    assert state_to_distributions(s).tolist() == [[1, 0, 0]]
    s.y[:] = [0.25, 0.75]
    assert state_to_distributions(s).tolist() == [[0.25, 0.5, 0.25]]


def test_bad_inputs():
    with pytest.raises(EpsOutOfRange):
        init_state([1.0], 1, 0.0, [[0, 1]])
    with pytest.raises(EpsOutOfRange):
        init_state([1.0], 1, 1.5, [[0, 1]])
    with pytest.raises(BadDistribution):
        init_state([1.0], 1, 1.0, [[0.5, 0.6]])
    with pytest.raises(BadDistribution):
        init_state([1.0, 1.0], 1, 1.0, [[0, 1], [0, 1]]) if False else init_state(
            [1.0, 1.0, 1.0], 1, 1.0, [[0, 1], [0, 1], [0.5, 0.5]])
    with pytest.raises(NotMonotone):
        lambda_from_cost_vector([0, 1])
    s = init_state([1.0], 2, 1.0, [[0, 0, 1]])
    with pytest.raises(QuotaInfeasible):
        fix_stage(s, 3)
    with pytest.raises(QuotaInfeasible):
        fix_stage(s, -1)
    with pytest.raises(QuotaInfeasible):
        serve(s, CostVector(0, (math.inf, math.inf, 0.0)), 1)


def test_lambda_examples():
    assert lambda_from_cost_vector([1, 1, 1, 0]).tolist() == [0, 0, 1]
    assert lambda_from_cost_vector([1, 0, 0, 0]).tolist() == [1, 0, 0]
    assert lambda_from_cost_vector([2, 2, 2]).tolist() == [0, 0]
    lam = lambda_from_cost_vector([math.inf, 1, 0])
    assert math.isinf(lam[0]) and lam[1] == 1


def test_fix_stage_at_quota_is_noop():
    s = init_state([1.0, 2.0], 2, 1.0, [[0, 1, 0], [0, 1, 0]])
    out, move = fix_stage(s, 2)
    assert move == 0 and np.array_equal(out.y, s.y)


def test_fix_stage_single_coordinate():
    s = init_state([1.0], 1, 1.0, [[0, 1]])
    out, move = fix_stage(s, 0)
    assert out.y.tolist() == [[1.0]] and move == pytest.approx(1.0)


def _raw(w, k, eps, y):
    y = np.asarray(y, dtype=float)
    return AllocState(np.asarray(w, dtype=float), k, eps, y, [(j, j + 1) for j in range(k)])


def test_fix_stage_forced_to_full():
    s = _raw([1.0, 1.0], 1, 1.0, [[0.2], [0.6]])
    out, move = fix_stage(s, 0)
    assert out.y.tolist() == [[1.0], [1.0]]
    assert move == pytest.approx(0.8 + 0.4)


def test_fix_stage_matches_exponential_closed_form():
    w = np.array([1.0, 2.0, 0.5])
    s = _raw(w, 1, 0.6, [[0.2], [0.1], [0.3]])
    target = 3 - 1  # kd - kappa
    b = s.beta
    y0 = s.y[:, 0].copy()
    path = lambda tau: np.minimum(1.0, (y0 + b) * np.exp(tau / w) - b)
    tau = brentq(lambda t: path(t).sum() - target, 0, 10, xtol=1e-15)
    assert 0 < path(tau).min() and path(tau).max() == 1  # one coordinate saturates on the way
    out, move = fix_stage(s, 1)
    assert np.allclose(out.y[:, 0], path(tau), atol=1e-10)
    assert move == pytest.approx(float((w * (path(tau) - y0)).sum()), abs=1e-10)


def test_zero_field_leaves_state():
    s = init_state([1.0, 2.0], 2, 1.0, [[0.2, 0.3, 0.5], [0.4, 0.6, 0.0]])
    out, hit, move, events, _ = hit_stage(s, [0.0, 0.0], 2, 0)
    assert np.array_equal(out.y, s.y) and hit == 0 and move == 0


@pytest.mark.parametrize("lam", [0.1, 0.3, 0.5])
def test_slack_scalar_closed_form(lam):
    s = init_state([1.0], 1, 0.5, [[0.5, 0.5]])
    b, a = s.beta, s.alpha
    expected = (0.5 + b) * math.exp(-a * lam) - b
    assert expected > 0
    out, hit, move, _, _ = hit_stage(s, [lam], 1, 0)
    assert out.y[0, 0] == pytest.approx(expected, abs=1e-9)
    integral = (0.5 + b) * (1 - math.exp(-a * lam)) / (a * lam) - b
    assert hit == pytest.approx(lam * integral, abs=1e-9)


def test_slack_scalar_hits_zero():
    s = init_state([1.0], 1, 1.0, [[0.5, 0.5]])
    out, *_ = hit_stage(s, [5.0], 1, 0)
    assert out.y[0, 0] == 0.0


def test_equal_neighbours_merge_immediately():
    s = init_state([1.0], 2, 1.0, [[0.3, 0.0, 0.7]])
    assert s.y[0, 0] == s.y[0, 1]
    out, *_ = hit_stage(s, [0.2, 1.0], 2, 0)
    assert (0, 2) in out.blocks
    assert out.y[0, 0] == out.y[0, 1]


def test_serve_zero_cost_vector():
    s = init_state([1.0, 1.0], 2, 1.0, [[0, 1, 0], [0, 1, 0]])
    out, c = serve(s, CostVector(1, (0.0, 0.0, 0.0)), 2)
    assert (c.hit, c.movement, c.fix_movement, c.movement_abs) == (0, 0, 0, 0)
    assert np.array_equal(out.y, s.y)


def test_infinite_prefix_empties_the_coordinate():
    s = init_state([1.0, 1.0], 2, 1.0, [[0, 0, 1], [1, 0, 0]])
    out, c = serve(s, CostVector(1, (math.inf, 1.0, 0.0)), 2)
    assert out.y[1, 0] == 0.0
    assert out.y.sum() >= 2 * 2 - 2 - 1e-9


def test_potential_examples():
    s = init_state([3.0], 2, 1.0, [[0.5, 0.5, 0.0]])
    assert s.y.tolist() == [[0.5, 1.0]]
    assert potential_phi_h(s) == pytest.approx(4.5 / s.alpha)
    s.y[:] = 0
    assert potential_phi_h(s) == 0
    s.y[:] = 1
    assert potential_phi_h(s) == pytest.approx(2 * 3 / s.alpha)
    one = init_state([1.0], 1, 1.0, [[0, 1]])
    assert potential_phi_m(one, np.array([[1.0]])) == pytest.approx(2 * one.alpha)
    assert potential_phi_m(one, np.zeros((1, 1))) == 0
    same = init_state([1.0, 2.0], 2, 0.5, [[0, 1, 0], [1, 0, 0]])
    assert potential_phi_m(same, same.y) == pytest.approx(0.0, abs=1e-12)


def _euler_hit(s, lam, kappa, loc, n):
    """Explicit Euler on the block-averaged field with bisection for the normalizer."""
    y = s.y.copy()
    k, d = s.k, s.d
    b, a = s.beta, s.alpha
    target = k * d - kappa
    blocks = [[j] for j in range(k)]
    hit = 0.0
    h = 1.0 / n
    lam = np.asarray(lam, dtype=float)
    for _ in range(n):
        changed = True
        while changed:
            changed = False
            for p in range(len(blocks) - 1):
                b0, b1 = blocks[p], blocks[p + 1]
                if y[loc, b0[0]] >= y[loc, b1[0]] - 1e-7 and lam[b0].mean() < lam[b1].mean():
                    blocks[p:p + 2] = [b0 + b1]
                    changed = True
                    break
        le = np.zeros(k)
        for blk in blocks:
            le[blk] = lam[blk].mean()
        c = np.zeros((d, k))
        c[loc] = a * le
        u = (y + b) / s.w[:, None]

        def rates(N):
            r = u * (N - c)
            r[(y <= 1e-9) & (r < 0)] = 0
            r[(y >= 1 - 1e-9) & (r > 0)] = 0
            return r

        N = 0.0
        if y.sum() <= target + 1e-7:
            lo, hi = 0.0, a * lam.max() + 1
            for _ in range(45):
                mid = (lo + hi) / 2
                lo, hi = (mid, hi) if rates(mid).sum() < 0 else (lo, mid)
            N = hi
        r = rates(N)
        hit += h * (le * y[loc]).sum()
        y = np.clip(y + h * r, 0, 1)
        for blk in blocks:
            y[loc, blk] = y[loc, blk].mean()
    return y, hit


@pytest.mark.parametrize("seed", range(6))
def test_hit_stage_matches_euler_reference(seed):
    rng = np.random.default_rng(seed)
    d, k = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    x = rng.dirichlet(np.ones(k + 1), size=d)
    while (x @ np.arange(k + 1)).sum() > k:
        x = rng.dirichlet(np.ones(k + 1), size=d)
    s = init_state(rng.uniform(0.3, 2, size=d), k, float(rng.uniform(0.2, 1)), x)
    kappa = k if seed % 2 else min(k, int(np.ceil(s.deployed() - 1e-9)))
    s, _ = fix_stage(s, kappa)
    lam = np.round(rng.exponential(1, size=k), 3)
    loc = int(rng.integers(0, d))
    out, hit, *_ = hit_stage(s, lam, kappa, loc)
    ref_y, ref_hit = _euler_hit(s, lam, kappa, loc, 3000)
    assert np.abs(out.y - ref_y).max() < 3e-3
    assert hit == pytest.approx(ref_hit, abs=3e-3)


@st.composite
def serve_case(draw):
    d = draw(st.integers(1, 3))
    k = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    x = rng.dirichlet(np.ones(k + 1), size=d)
    if (x @ np.arange(k + 1)).sum() > k:
        x = np.zeros((d, k + 1))
        x[:, 0] = 1
    w = rng.uniform(0.2, 3, size=d)
    eps = draw(st.floats(0.05, 1.0))
    lam = rng.exponential(1, size=k) * (rng.random(k) < 0.8)
    h = tuple(np.concatenate([np.cumsum(lam[::-1])[::-1], [0.0]]))
    if draw(st.booleans()):
        h = (math.inf,) + h[1:]
    kappa = draw(st.integers(1, k))
    return init_state(w, k, eps, x), CostVector(int(rng.integers(0, d)), h), kappa


@settings(max_examples=150)
@given(serve_case())
def test_serve_invariants(case):
    s, cv, kappa = case
    diag = Diagnostics()
    out, c = serve(s, cv, kappa, diag)
    assert out.y.min() >= -1e-9 and out.y.max() <= 1 + 1e-9
    assert (np.diff(out.y, axis=1) >= -1e-9).all()
    assert out.y.sum() >= s.k * s.d - kappa - 1e-9
    assert c.hit >= -1e-12 and c.movement_abs >= -1e-12
    assert c.event_count <= event_budget(s.k, s.d)
    assert not diag.violations()
    if math.isinf(cv.h[0]):
        assert out.y[cv.location, 0] == 0


def test_gap_instance_small_inequalities():
    inst = gen_gap_instance(3, 12)
    run = run_allocation(inst)
    rep = check_step_inequalities(run, brute_force_allocation_opt(inst))
    assert rep.ok and rep.min_slack >= -1e-6


def test_quiet_sequence_has_no_negative_slack():
    steps = [AllocStep(0, (0.0, 0.0, 0.0), 2)] * 5
    inst = AllocationInstance((1.0, 1.0), 2, steps, (1, 1))
    rep = check_step_inequalities(run_allocation(inst), brute_force_allocation_opt(inst))
    assert rep.ok and rep.min_slack >= 0


@pytest.mark.parametrize("seed", range(20))
def test_random_instances_satisfy_bounds(seed):
    rng = np.random.default_rng(1000 + seed)
    inst = random_instance(rng, 3, 2, 20)
    run = run_allocation(inst)
    opt = brute_force_allocation_opt(inst)
    assert check_step_inequalities(run, opt).ok
    assert cost_bound_report(run, opt).ok()
    assert not run.diag.violations()


def test_instance_json_round_trip(tmp_path):
    inst = AllocationInstance((1.0, 2.5), 2, [AllocStep(1, (math.inf, 1.0, 0.0), 2)], (1, 0), 0.5)
    save_instance(inst, tmp_path / "i.json")
    back = load_instance(tmp_path / "i.json")
    assert back == inst
