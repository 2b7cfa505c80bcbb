"""Brute-force offline optima.

Two families of exact dynamic programs live here:

* configuration DPs on a subtree T(p) of a weighted HST, where servers are an
  unlabelled multiset of leaves and a quota change injects or removes servers
  at p;
* the integral allocation problem on a weighted star.

Infinite cost is ``INF`` (``math.inf``) and is never produced by overflow or
by a large finite sentinel; feasibility is tracked with boolean masks inside
the DPs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .hst import Hst

INF = math.inf
DEFAULT_CAP = 200_000


class StateSpaceTooLarge(RuntimeError):
    pass


def is_inf(v) -> bool:
    return isinstance(v, float) and math.isinf(v)


def cost_difference(later, earlier):
    """Increment between two prefix optima at a step whose request lies inside.

    An infinite later optimum stays infinite even if the earlier one already
    was: the new request alone makes the zero-server solution infeasible.
    """
    if is_inf(later):
        return INF
    if is_inf(earlier):
        raise ValueError("prefix optimum became finite after being infinite")
    return later - earlier


def quota_variation(kappa: Sequence[int]) -> int:
    return sum(abs(a - b) for a, b in zip(kappa[1:], kappa[:-1]))


# ---------------------------------------------------------------------------
# configurations inside a subtree

class SubtreeSpace:
    """Leaves, inner edges and integer-scaled edge lengths of T(p)."""

    def __init__(self, tree: Hst, p: int):
        self.tree = tree
        self.p = p
        nodes = []
        stack = [p]
        while stack:
            v = stack.pop()
            nodes.append(v)
            stack.extend(tree.children[v])
        self.nodes = [v for v in nodes if v != p]  # edges below p, one per node
        self.leaves = sorted(tree.labels[v] for v in nodes if tree.is_leaf(v))
        self.leaf_set = frozenset(self.leaves)
        denom = math.lcm(*(tree.length[v].denominator for v in self.nodes)) if self.nodes else 1
        self.scale = denom
        ints = [int(tree.length[v] * denom) for v in self.nodes]
        # int64 stays exact unless horizon * k * total length approaches 2^62
        self.dtype = np.int64 if sum(ints) < 2**22 else object
        self.weights = np.array(ints, dtype=self.dtype)
        # membership[leaf][edge index] = 1 if the leaf lies below that edge
        pos = {v: i for i, v in enumerate(self.nodes)}
        self.membership = {}
        for v in nodes:
            if tree.is_leaf(v):
                row = np.zeros(len(self.nodes), dtype=np.int64)
                for u in tree.ancestors(v):
                    if u == p:
                        break
                    row[pos[u]] = 1
                self.membership[tree.labels[v]] = row
        self._configs: dict[int, list[tuple[int, ...]]] = {}
        self._counts: dict[int, np.ndarray] = {}

    def configs(self, j: int) -> list[tuple[int, ...]]:
        if j not in self._configs:
            self._configs[j] = list(itertools.combinations_with_replacement(self.leaves, j))
        return self._configs[j]

    def counts(self, j: int) -> np.ndarray:
        """Servers below each inner edge, one row per configuration of size j."""
        if j not in self._counts:
            rows = [sum((self.membership[q] for q in c), np.zeros(len(self.nodes), dtype=np.int64))
                    for c in self.configs(j)]
            self._counts[j] = np.array(rows, dtype=np.int64).reshape(len(rows), len(self.nodes))
        return self._counts[j]

    def counts_of(self, config: Sequence[int]) -> np.ndarray:
        out = np.zeros(len(self.nodes), dtype=np.int64)
        for q in config:
            out = out + self.membership[q]
        return out

    def move_cost(self, a: int, b: int) -> np.ndarray:
        """Scaled cost matrix from size-a to size-b configurations.

        The cheapest way to turn one multiset into another, with surplus or
        missing servers leaving or entering through p, pays each inner edge
        its length times the change in the number of servers below it.
        """
        ca, cb = self.counts(a), self.counts(b)
        diff = np.abs(ca[:, None, :] - cb[None, :, :]).astype(self.dtype)
        return (diff * self.weights).sum(axis=2) if len(self.nodes) else np.zeros(
            (len(ca), len(cb)), dtype=self.dtype)

    def from_counts(self, start: np.ndarray, b: int) -> np.ndarray:
        diff = np.abs(self.counts(b) - start[None, :]).astype(self.dtype)
        return (diff * self.weights).sum(axis=1) if len(self.nodes) else np.zeros(
            len(self.configs(b)), dtype=self.dtype)

    def unscale(self, v):
        return Fraction(int(v), self.scale)


def _step(values, feasible, cost, allowed):
    """One min-plus DP step restricted to feasible predecessors."""
    if not feasible.any():
        return np.zeros(cost.shape[1], dtype=cost.dtype), np.zeros(cost.shape[1], dtype=bool)
    cand = values[feasible][:, None] + cost[feasible]
    new = cand.min(axis=0)
    return new, allowed.copy()


def _allowed(space: SubtreeSpace, j: int, request) -> np.ndarray:
    cfgs = space.configs(j)
    if request is None or request not in space.leaf_set:
        return np.ones(len(cfgs), dtype=bool)
    return np.array([request in c for c in cfgs], dtype=bool)


def _check_cap(n_configs: int, horizon: int, cap: int):
    if n_configs * (horizon + 1) > cap:
        raise StateSpaceTooLarge(f"{n_configs} configurations x {horizon + 1} steps exceeds cap {cap}")


def _finish(space, values, feasible):
    if not feasible.any():
        return INF
    return space.unscale(values[feasible].min())


def optcost_fixed(tree: Hst, p: int, j: int, requests: Sequence[int], start=None,
                  cap: int = DEFAULT_CAP) -> list:
    """optcost(p, j, t) for t = 0..T with exactly j servers inside T(p).

    Requests outside T(p) impose nothing.  With ``start=None`` the initial
    placement is free; otherwise ``start`` is a multiset of leaves whose part
    inside T(p) is topped up or thinned out through p at time 0.
    Returns the list of prefix optima (Fraction or INF), index t.
    """
    space = SubtreeSpace(tree, p)
    _check_cap(len(space.configs(j)), len(requests), cap)
    n_cfg = len(space.configs(j))
    if start is None:
        values = np.zeros(n_cfg, dtype=space.dtype)
    else:
        inside = [q for q in start if q in space.leaf_set]
        values = space.from_counts(space.counts_of(inside), j)
    feasible = np.ones(n_cfg, dtype=bool)
    cost = space.move_cost(j, j)
    out = [_finish(space, values, feasible)]
    for r in requests:
        values, feasible = _step(values, feasible, cost, _allowed(space, j, r))
        feasible &= _allowed(space, j, r)
        out.append(_finish(space, values, feasible))
    return out


def optcost_varying(tree: Hst, p: int, kappa: Sequence[int], requests: Sequence[int],
                    cap: int = DEFAULT_CAP):
    """Optimum inside T(p) when the server count follows kappa(0..T).

    kappa[0] is the initial count (placed freely); servers added or removed
    at step t enter or leave through p.
    """
    if len(kappa) != len(requests) + 1:
        raise ValueError("kappa must have one entry per time step plus the initial one")
    space = SubtreeSpace(tree, p)
    _check_cap(max(len(space.configs(j)) for j in set(kappa)), len(requests), cap)
    values = np.zeros(len(space.configs(kappa[0])), dtype=space.dtype)
    feasible = np.ones(len(values), dtype=bool)
    for t, r in enumerate(requests, start=1):
        allowed = _allowed(space, kappa[t], r)
        values, feasible = _step(values, feasible, space.move_cost(kappa[t - 1], kappa[t]), allowed)
        feasible &= allowed
    return _finish(space, values, feasible)


def optcost_varying_all(tree: Hst, p: int, k: int, requests: Sequence[int],
                        cap: int = DEFAULT_CAP) -> dict[tuple[int, ...], object]:
    """optcost_varying for every pattern in {0..k}^(T+1), sharing prefixes.

    Patterns that currently end in the same quota j are stacked into one
    array of shape (patterns, configurations of size j); unreachable entries
    hold a sentinel at least ``big``.
    """
    space = SubtreeSpace(tree, p)
    _check_cap(sum(len(space.configs(j)) for j in range(k + 1)), len(requests), cap)
    costs = {(a, b): space.move_cost(a, b) for a in range(k + 1) for b in range(k + 1)}
    big = 2**61 if space.dtype is np.int64 else 10**30 * (1 + int(space.weights.sum())) * (len(requests) + 1)
    pats = {j: [(j,)] for j in range(k + 1)}
    vals = {j: np.zeros((1, len(space.configs(j))), dtype=space.dtype) for j in range(k + 1)}
    for r in requests:
        new_pats, new_vals = {}, {}
        for b in range(k + 1):
            blocked = ~_allowed(space, b, r)
            rows, names = [], []
            for a in range(k + 1):
                cand = (vals[a][:, :, None] + costs[a, b][None, :, :]).min(axis=1)
                cand = np.minimum(cand, big)
                cand[:, blocked] = big
                rows.append(cand)
                names.extend(pt + (b,) for pt in pats[a])
            new_vals[b] = np.concatenate(rows, axis=0)
            new_pats[b] = names
        pats, vals = new_pats, new_vals
    out = {}
    for j in range(k + 1):
        best = vals[j].min(axis=1) if vals[j].shape[1] else np.full(len(pats[j]), big)
        for pt, v in zip(pats[j], best):
            out[pt] = INF if v >= big else space.unscale(v)
    return dict(sorted(out.items()))


def optcost_by_recurrence(tree: Hst, p: int, kappa: Sequence[int], requests: Sequence[int]):
    """Right-hand side of the child-split recurrence, by exhaustive enumeration.

    min over child patterns summing to kappa at every time (time 0 included)
    of sum_i optcost(p_i, kappa_i) + w(p, i) * g(kappa_i).
    """
    kids = tree.children[p]
    if not kids:
        return 0 if all(kappa[t] >= 1 for t, r in enumerate(requests, 1)
                        if r == tree.labels[p]) else INF
    k = max(kappa)
    tables = [optcost_varying_all(tree, c, k, requests) for c in kids]
    per_time = [[s for s in itertools.product(range(kappa[t] + 1), repeat=len(kids))
                 if sum(s) == kappa[t]] for t in range(len(kappa))]
    best = INF
    for split in itertools.product(*per_time):
        total = Fraction(0)
        for i, c in enumerate(kids):
            pat = tuple(s[i] for s in split)
            v = tables[i][pat]
            if is_inf(v):
                total = INF
                break
            total += v + tree.length[c] * quota_variation(pat)
        if not is_inf(total) and (is_inf(best) or total < best):
            best = total
    return best


# ---------------------------------------------------------------------------
# incremental tables used by the composer

class OracleTables:
    """optcost(p, j, t) for every non-root node p and j = 0..k, grown online."""

    def __init__(self, tree: Hst, k: int, cap: int = DEFAULT_CAP):
        self.tree = tree
        self.k = k
        self.cap = cap
        self.t = 0
        self.requests: list[int] = []
        self.nodes = [v for v in tree.preorder if v != tree.root]
        self.spaces = {v: SubtreeSpace(tree, v) for v in self.nodes}
        self.state = {}
        self.prefix = {}
        for v in self.nodes:
            sp = self.spaces[v]
            for j in range(k + 1):
                n = len(sp.configs(j))
                self.state[v, j] = (np.zeros(n, dtype=sp.dtype), np.ones(n, dtype=bool),
                                    sp.move_cost(j, j))
                self.prefix[v, j] = [Fraction(0)]

    def extend(self, request: int) -> None:
        self.t += 1
        self.requests.append(request)
        for v in self.nodes:
            sp = self.spaces[v]
            if request not in sp.leaf_set:
                for j in range(self.k + 1):
                    self.prefix[v, j].append(self.prefix[v, j][-1])
                continue
            for j in range(self.k + 1):
                values, feasible, cost = self.state[v, j]
                _check_cap(len(values), self.t, self.cap)
                allowed = _allowed(sp, j, request)
                values, feasible = _step(values, feasible, cost, allowed)
                feasible &= allowed
                self.state[v, j] = (values, feasible, cost)
                self.prefix[v, j].append(_finish(sp, values, feasible))

    def optcost(self, v: int, j: int, t: int):
        return self.prefix[v, j][t]

    def hit_cost_vector(self, v: int, t: int | None = None) -> list:
        """h^t_v(j) = optcost(v, j, t) - optcost(v, j, t-1), j = 0..k."""
        t = self.t if t is None else t
        if t < 1:
            raise ValueError("hit costs start at t = 1")
        r = self.requests[t - 1]
        if r not in self.spaces[v].leaf_set:
            return [Fraction(0)] * (self.k + 1)
        return [cost_difference(self.prefix[v, j][t], self.prefix[v, j][t - 1])
                for j in range(self.k + 1)]


def hit_cost_vector(tree: Hst, p_i: int, t: int, requests: Sequence[int], k: int) -> list:
    """Stand-alone hit-cost vector of child p_i at time t (recomputes its tables)."""
    sp = SubtreeSpace(tree, p_i)
    if requests[t - 1] not in sp.leaf_set:
        return [Fraction(0)] * (k + 1)
    out = []
    for j in range(k + 1):
        pre = optcost_fixed(tree, p_i, j, requests[:t])
        out.append(cost_difference(pre[t], pre[t - 1]))
    return out


# ---------------------------------------------------------------------------
# integral k-server optimum on an explicit distance table

def kserver_opt(dist, k: int, requests: Sequence[int], start: Sequence[int],
                cap: int = DEFAULT_CAP):
    """Offline k-server optimum over multiset configurations.

    ``dist`` is any square table supporting ``dist[a][b]``; arithmetic stays
    exact for Fraction entries.  Returns (cost, configuration trajectory).
    """
    n = len(dist)
    configs = list(itertools.combinations_with_replacement(range(n), k))
    _check_cap(len(configs), len(requests), cap)
    index = {c: i for i, c in enumerate(configs)}

    def match(a, b):
        return min(sum(dist[x][y] for x, y in zip(a, perm)) for perm in itertools.permutations(b))

    move = [[match(a, b) for b in configs] for a in configs]
    s = index[tuple(sorted(start))]
    values = {s: 0}
    back = []
    for r in requests:
        nxt, arg = {}, {}
        for i, c in enumerate(configs):
            if r not in c:
                continue
            best_j = min(values, key=lambda j: (values[j] + move[j][i], j))
            nxt[i] = values[best_j] + move[best_j][i]
            arg[i] = best_j
        values = nxt
        back.append(arg)
    if not values:
        return INF, []
    end = min(values, key=lambda i: (values[i], i))
    cost = values[end]
    traj = [end]
    for arg in reversed(back):
        traj.append(arg[traj[-1]])
    traj.reverse()
    return cost, [configs[i] for i in traj]


# ---------------------------------------------------------------------------
# integral allocation optimum on a weighted star

@dataclass
class AllocationOpt:
    cost: float
    counts: list[tuple[int, ...]]  # integral server counts, index t = 0..T
    hit: list[float] = field(default_factory=list)  # per step t = 1..T
    movement: list[float] = field(default_factory=list)


def _alloc_states(d, k, cap_total):
    return [s for s in itertools.product(range(k + 1), repeat=d) if sum(s) <= cap_total]


def brute_force_allocation_opt(instance, cap: int = DEFAULT_CAP) -> AllocationOpt:
    """Exact integral optimum of an allocation instance.

    Movement between count vectors n and m costs sum_i w_i |n_i - m_i|; the
    number of deployed servers may be anything up to kappa(t).
    """
    d, k = instance.d, instance.k
    states = _alloc_states(d, k, k)
    _check_cap(len(states), instance.horizon, cap)
    arr = np.array(states, dtype=np.int64).reshape(len(states), d)
    w = np.asarray(instance.w, dtype=float)
    move = (np.abs(arr[:, None, :] - arr[None, :, :]) * w).sum(axis=2)
    start = tuple(int(v) for v in instance.start_counts)
    if start not in states:
        raise ValueError(f"start counts {start} are not a valid integral state")
    s0 = states.index(start)
    values = np.full(len(states), np.inf)
    values[s0] = 0.0
    backs = []
    totals = arr.sum(axis=1)
    for step in instance.steps:
        h = np.array([float(x) for x in step.h])
        hit = h[arr[:, step.location]]
        ok = totals <= step.kappa
        cand = values[:, None] + move
        arg = cand.argmin(axis=0)
        new = cand[arg, np.arange(len(states))] + hit
        new[~ok] = np.inf
        backs.append(arg)
        values = new
    end = int(np.argmin(values))
    cost = float(values[end])
    path = [end]
    for arg in reversed(backs):
        path.append(int(arg[path[-1]]))
    path.reverse()
    counts = [states[i] for i in path]
    res = AllocationOpt(cost, counts)
    for t, step in enumerate(instance.steps, start=1):
        res.hit.append(float(step.h[counts[t][step.location]]))
        res.movement.append(float(sum(wi * abs(a - b) for wi, a, b in zip(instance.w, counts[t], counts[t - 1]))))
    return res


def counts_to_y(counts: Sequence[int], k: int) -> np.ndarray:
    """Integral y-state: y[i, j-1] = 1 iff location i holds fewer than j servers."""
    return np.array([[1.0 if n < j else 0.0 for j in range(1, k + 1)] for n in counts])


def optimal_trajectory(instance, opt: AllocationOpt | None = None) -> list[np.ndarray]:
    opt = opt if opt is not None else brute_force_allocation_opt(instance)
    return [counts_to_y(c, instance.k) for c in opt.counts]
