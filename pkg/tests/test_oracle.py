import itertools
from fractions import Fraction
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kserver_lab.allocation import AllocationInstance, AllocStep, random_instance
from kserver_lab.harness import gen_gap_instance
from kserver_lab.hst import leaf_distance, tree_from_children, uniform_hst
from kserver_lab.metric import random_metric
from kserver_lab.oracle import (
    INF, OracleTables, StateSpaceTooLarge, brute_force_allocation_opt, cost_difference,
    hit_cost_vector, is_inf, kserver_opt, optcost_by_recurrence, optcost_fixed, optcost_varying,
    optcost_varying_all, optimal_trajectory, quota_variation,
)

STAR = tree_from_children((1, [0, 1]), 2)
TWO_LEVEL = tree_from_children((8, [(1, [0, 1]), (1, [2, 3, 4]), 5]), 4)


def _slow_optcost(tree, p, j, requests):
    """Memoized recursion over explicit leaf multisets, free initial placement."""
    leaves = sorted(tree.subtree_leaves[p])
    configs = list(itertools.combinations_with_replacement(leaves, j))

    def move(a, b):
        if not a:
            return Fraction(0)
        return min(sum(leaf_distance(tree, x, y) for x, y in zip(a, perm))
                   for perm in itertools.permutations(b))

    @lru_cache(maxsize=None)
    def best(t, c):
        if t == 0:
            return Fraction(0)
        r = requests[t - 1]
        if r in leaves and r not in c:
            return INF
        prev = [best(t - 1, b) + move(b, c) for b in configs if not is_inf(best(t - 1, b))]
        return min(prev) if prev else INF

    out = []
    for t in range(len(requests) + 1):
        vals = [best(t, c) for c in configs]
        out.append(min(vals))
    return out


def test_leaf_base_cases():
    leaf = STAR.leaf_of[0]
    assert optcost_fixed(STAR, leaf, 1, [0, 0, 1]) == [0, 0, 0, 0]
    assert is_inf(optcost_fixed(STAR, leaf, 0, [0])[1])
    assert optcost_fixed(STAR, leaf, 0, [1, 1]) == [0, 0, 0]


def test_star_alternating_requests():
    assert optcost_fixed(STAR, STAR.root, 1, [0, 1, 0, 1])[-1] == 6


@pytest.mark.parametrize("j", [0, 1, 2])
def test_fixed_matches_slow_recursion(j):
    reqs = [0, 2, 3, 5, 1, 4, 2]
    for p in (TWO_LEVEL.root, 1, 4):
        assert optcost_fixed(TWO_LEVEL, p, j, reqs) == _slow_optcost(TWO_LEVEL, p, j, reqs)


def test_hit_cost_vector_cases():
    reqs = [0, 1, 5, 0]
    p = 1  # subtree with leaves 0, 1
    assert hit_cost_vector(TWO_LEVEL, p, 3, reqs, 2) == [0, 0, 0]
    first = hit_cost_vector(TWO_LEVEL, p, 1, reqs, 2)
    assert is_inf(first[0]) and first[1] == 0
    slow = {j: _slow_optcost(TWO_LEVEL, p, j, reqs) for j in range(3)}
    h = hit_cost_vector(TWO_LEVEL, p, 4, reqs, 2)
    assert h == [cost_difference(slow[j][4], slow[j][3]) for j in range(3)]


def test_tables_agree_with_standalone_vectors():
    reqs = [2, 3, 0, 4, 4, 1, 2]
    tabs = OracleTables(TWO_LEVEL, 2)
    for r in reqs:
        tabs.extend(r)
    for v in TWO_LEVEL.preorder:
        if v == TWO_LEVEL.root:
            continue
        for t in range(1, len(reqs) + 1):
            assert tabs.hit_cost_vector(v, t) == hit_cost_vector(TWO_LEVEL, v, t, reqs, 2)


def test_varying_quota_cases():
    reqs = [0, 3, 1, 4]
    for j in range(3):
        assert optcost_varying(TWO_LEVEL, 1, [j] * 5, reqs) == optcost_fixed(TWO_LEVEL, 1, j, reqs)[-1]
    assert optcost_varying(TWO_LEVEL, 1, [0] * 3, [2, 5]) == 0
    assert quota_variation([2, 1, 1, 2, 0]) == 4


def test_recurrence_route_matches_direct_dp():
    reqs = [0, 1, 0, 5, 1]
    allp = optcost_varying_all(TWO_LEVEL, 1, 2, reqs)
    assert len(allp) == 3 ** 6
    for pat, c in itertools.islice(allp.items(), 0, None, 7):
        assert optcost_by_recurrence(TWO_LEVEL, 1, list(pat), reqs) == c


def test_cost_difference_inf_rules():
    assert is_inf(cost_difference(INF, Fraction(3)))
    assert cost_difference(Fraction(5), Fraction(3)) == 2


def test_gap_instance_opt_is_linear():
    inst = gen_gap_instance(3, 20)
    opt = brute_force_allocation_opt(inst)
    assert opt.cost >= 20 // 2 - 3
    assert all(c[1] >= 1 for c in opt.counts)


def test_zero_cost_vectors():
    steps = [AllocStep(i % 2, (0.0, 0.0, 0.0), 2) for i in range(6)]
    inst = AllocationInstance((1.0, 2.0), 2, steps, (1, 1))
    assert brute_force_allocation_opt(inst).cost == 0


def test_empty_horizon_trajectory():
    inst = AllocationInstance((1.0, 1.0), 2, [], (2, 0))
    assert brute_force_allocation_opt(inst).counts == [(2, 0)]
    traj = optimal_trajectory(inst)
    assert len(traj) == 1 and traj[0].tolist() == [[0.0, 0.0], [1.0, 1.0]]


def _slow_allocation_opt(inst):
    states = [s for s in itertools.product(range(inst.k + 1), repeat=inst.d) if sum(s) <= inst.k]

    @lru_cache(maxsize=None)
    def best(t, s):
        if t == 0:
            return 0.0 if s == tuple(inst.start_counts) else float("inf")
        st = inst.steps[t - 1]
        if sum(s) > st.kappa:
            return float("inf")
        hit = st.h[s[st.location]]
        return hit + min(best(t - 1, q) + sum(w * abs(a - b) for w, a, b in zip(inst.w, q, s))
                         for q in states)

    return min(best(inst.horizon, s) for s in states)


@settings(max_examples=30)
@given(st.integers(0, 10**6))
def test_allocation_opt_matches_slow_recursion(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, int(rng.integers(1, 3)), int(rng.integers(1, 3)), 5)
    opt = brute_force_allocation_opt(inst)
    assert opt.cost == pytest.approx(_slow_allocation_opt(inst), abs=1e-9)
    assert sum(opt.hit) + sum(opt.movement) == pytest.approx(opt.cost, abs=1e-9)


@settings(max_examples=20)
@given(st.integers(0, 10**6))
def test_kserver_opt_single_server_is_path_length(seed):
    rng = np.random.default_rng(seed)
    m = random_metric(4, rng)
    reqs = [int(v) for v in rng.integers(0, 4, size=6)]
    cost, traj = kserver_opt(m.dist, 1, reqs, [0])
    path = [0] + reqs
    assert cost == sum(m(a, b) for a, b in zip(path, path[1:]))
    assert [c[0] for c in traj] == path


def test_kserver_opt_on_tree_matches_fixed_quota_with_start():
    t = uniform_hst([2, 2], 4)
    table = [[leaf_distance(t, a, b) for b in range(4)] for a in range(4)]
    reqs = [0, 3, 1, 2, 0]
    cost, _ = kserver_opt(table, 2, reqs, [0, 1])
    assert cost == optcost_fixed(t, t.root, 2, reqs, start=[0, 1])[-1]


def test_state_space_cap():
    t = uniform_hst([4, 4], 4)
    with pytest.raises(StateSpaceTooLarge):
        optcost_fixed(t, t.root, 3, [0] * 10, cap=100)
