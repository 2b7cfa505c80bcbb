"""Online rounding of fractional k-server states on a plain σ-HST.

A distribution over configurations (sets of k distinct leaves) is kept
consistent with the fractional leaf masses x and balanced: every supported
configuration holds floor(x_p) or ceil(x_p) servers below every node p.  A
change of x is split into leaf-to-leaf transfers; each transfer is applied
to the distribution directly and the balance is then repaired by swapping
leaves between pairs of configurations.

All masses are Fractions, so consistency and balance are checked exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from .hst import Hst, leaf_distance_table
from .metric import as_fraction


class RoundingError(ValueError):
    pass


class MassNotK(RoundingError):
    pass


class InsufficientMass(RoundingError):
    pass


class SigmaTooSmall(RoundingError):
    pass


class RoundingInvariantError(AssertionError):
    pass


class _TreeInfo:
    """Per-tree constants shared by every distribution on that tree."""

    def __init__(self, tree: Hst):
        self.tree = tree
        self.nodes = [v for v in tree.preorder if v != tree.root]
        self.under = {v: tree.subtree_leaves[v] for v in tree.preorder}
        self.dist = leaf_distance_table(tree)
        self.depth = tree.node_depth
        self.sigma = Fraction(tree.sigma)
        self.order = [tree.labels[v] for v in tree.leaves]  # DFS leaf order

    def d(self, a: int, b: int) -> Fraction:
        return self.dist[a, b]

    def child_edge(self, p: int) -> Fraction:
        return max(self.tree.length[c] for c in self.tree.children[p])


_INFO: dict[int, _TreeInfo] = {}


def _info(tree: Hst) -> _TreeInfo:
    key = id(tree)
    if key not in _INFO or _INFO[key].tree is not tree:
        _INFO[key] = _TreeInfo(tree)
    return _INFO[key]


@dataclass
class ConfigDistribution:
    tree: Hst
    k: int
    x: dict[int, Fraction]
    mu: dict[frozenset, Fraction]

    def copy(self) -> "ConfigDistribution":
        return ConfigDistribution(self.tree, self.k, dict(self.x), dict(self.mu))

    @property
    def info(self) -> _TreeInfo:
        return _info(self.tree)

    def node_mass(self, v: int) -> Fraction:
        return sum((self.x[q] for q in self.info.under[v]), Fraction(0))

    def marginals(self) -> dict[int, Fraction]:
        out = {q: Fraction(0) for q in self.x}
        for c, m in self.mu.items():
            for q in c:
                out[q] += m
        return out

    def is_consistent(self) -> bool:
        return (sum(self.mu.values()) == 1 and all(m > 0 for m in self.mu.values())
                and all(len(c) == self.k for c in self.mu) and self.marginals() == self.x)

    def unbalanced(self) -> list[tuple[int, frozenset]]:
        bad = []
        info = self.info
        for v in info.nodes:
            xp = self.node_mass(v)
            lo, hi = math.floor(xp), math.ceil(xp)
            for c in self.mu:
                n = len(c & info.under[v])
                if n < lo or n > hi:
                    bad.append((v, c))
        return bad

    def is_balanced(self) -> bool:
        return not self.unbalanced()

    def unbalanced_mass(self) -> Fraction:
        bad = {c for _, c in self.unbalanced()}
        return sum((self.mu[c] for c in bad), Fraction(0))

    def support(self) -> list[tuple[tuple[int, ...], Fraction]]:
        return sorted((tuple(sorted(c)), m) for c, m in self.mu.items())


def _check_x(tree: Hst, k: int, x) -> dict[int, Fraction]:
    labels = set(tree.leaf_labels)
    xs = {q: as_fraction(v) for q, v in dict(x).items()}
    for q in labels:
        xs.setdefault(q, Fraction(0))
    if set(xs) != labels:
        raise RoundingError(f"unknown leaves {sorted(set(xs) - labels)}")
    if sum(xs.values()) != k:
        raise MassNotK(f"leaf masses sum to {sum(xs.values())}, not {k}")
    bad = [q for q, v in xs.items() if v < 0 or v > 1]
    if bad:
        raise MassNotK(f"leaf masses outside [0, 1] at {bad}")
    return xs


def init_distribution(tree: Hst, x0, k: int | None = None) -> ConfigDistribution:
    """Systematic sampling along the depth-first leaf order.

    Leaves are laid out as consecutive intervals of lengths x_i on [0, k) and
    a configuration is read off by the points u, u+1, ..., u+k-1.  Every
    subtree occupies a contiguous interval, so each configuration is balanced;
    the measure of u selecting leaf i is x_i, so the marginals are exact.
    """
    k = int(sum(as_fraction(v) for v in dict(x0).values())) if k is None else k
    xs = _check_x(tree, k, x0)
    order = _info(tree).order
    starts, pos = {}, Fraction(0)
    for q in order:
        starts[q] = pos
        pos += xs[q]
    cuts = sorted({s - math.floor(s) for s in starts.values()} | {Fraction(0)})
    cuts.append(Fraction(1))
    mu: dict[frozenset, Fraction] = {}
    for a, b in zip(cuts, cuts[1:]):
        if a == b:
            continue
        u = (a + b) / 2
        conf = frozenset(q for q in order if xs[q] > 0 and _hits(starts[q], xs[q], u))
        mu[conf] = mu.get(conf, Fraction(0)) + (b - a)
    d = ConfigDistribution(tree, k, xs, mu)
    return d


def _hits(start: Fraction, length: Fraction, u: Fraction) -> bool:
    """Does [start, start+length) contain a point of u + Z?"""
    m = math.ceil(start - u)
    return u + m < start + length


def balance_gap(d: ConfigDistribution) -> Fraction:
    info = d.info
    total = Fraction(0)
    for v in info.nodes:
        xp = d.node_mass(v)
        lo, hi = math.floor(xp), math.ceil(xp)
        wv = d.tree.length[v]
        acc = Fraction(0)
        for c, m in d.mu.items():
            n = len(c & info.under[v])
            if n < lo:
                acc += m * (lo - n)
            elif n > hi:
                acc += m * (n - hi)
        total += wv * acc
    return total


def _shift(mu: dict, src: frozenset, dst: frozenset, amount: Fraction) -> None:
    mu[src] -= amount
    if mu[src] == 0:
        del mu[src]
    elif mu[src] < 0:
        raise RoundingInvariantError("negative configuration mass")
    mu[dst] = mu.get(dst, Fraction(0)) + amount


def _by_mass(mu: dict, pred) -> list[frozenset]:
    return sorted((c for c in mu if pred(c)), key=lambda c: (-mu[c], sorted(c)))


@dataclass
class RebalanceStats:
    iterations: int = 0
    gap_initial: Fraction = Fraction(0)
    cost: Fraction = Fraction(0)
    bound_violations: int = 0


def _require_sigma(tree: Hst) -> Fraction:
    sigma = Fraction(tree.sigma)
    if sigma <= 5:
        raise SigmaTooSmall(f"rebalancing needs sigma > 5, got {sigma}")
    return sigma


def rebalance(d: ConfigDistribution, check: bool = True) -> tuple[ConfigDistribution, Fraction, RebalanceStats]:
    """Swap leaves between configuration pairs until every node is balanced."""
    sigma = _require_sigma(d.tree)
    d = d.copy()
    info = d.info
    tree = d.tree
    stats = RebalanceStats(gap_initial=balance_gap(d))
    gap = stats.gap_initial
    while gap > 0:
        bad = d.unbalanced()
        p = min((v for v, _ in bad), key=lambda v: (info.depth[v], v))
        xp = d.node_mass(p)
        lo, hi = math.floor(xp), math.ceil(xp)
        under_p = info.under[p]

        def n_p(c):
            return len(c & under_p)

        viol = _by_mass(d.mu, lambda c: n_p(c) < lo or n_p(c) > hi)
        c0 = viol[0]
        if n_p(c0) < lo:
            low, high = c0, _by_mass(d.mu, lambda c: n_p(c) >= lo + 1)[0]
        else:
            high, low = c0, _by_mass(d.mu, lambda c: n_p(c) <= hi - 1)[0]
        parent = tree.parent[p]
        other = next(c for c in tree.children[parent]
                     if c != p and len(high & info.under[c]) < len(low & info.under[c]))
        i = min(q for q in high - low if q in under_p)
        i2 = min(q for q in low - high if q in info.under[other])
        delta = min(d.mu[low], d.mu[high])
        _shift(d.mu, low, (low - {i2}) | {i}, delta)
        _shift(d.mu, high, (high - {i}) | {i2}, delta)
        cost = 2 * delta * info.d(i, i2)
        new_gap = balance_gap(d)
        wp = tree.length[p]
        if check and (gap - new_gap < delta * wp * (sigma - 5) / (sigma - 1)
                      or cost > 4 * delta * wp * sigma / (sigma - 1)):
            stats.bound_violations += 1
        stats.cost += cost
        stats.iterations += 1
        gap = new_gap
    if check and stats.cost > 4 * sigma / (sigma - 5) * stats.gap_initial:
        stats.bound_violations += 1
    return d, stats.cost, stats


@dataclass
class ElementaryStats:
    submoves: int = 0
    phase_cost: Fraction = Fraction(0)
    rebalance_cost: Fraction = Fraction(0)
    rebalance_iterations: int = 0
    max_unbalanced_ratio: Fraction = Fraction(0)  # unbalanced mass / delta, at most 3
    bound_violations: int = 0
    rebalances: list = field(default_factory=list)


def _substep_limit(d: ConfigDistribution, path_up: list[int], path_down: list[int]) -> Fraction:
    """Largest transfer keeping every changed subtree mass on one side of each integer."""
    lim = Fraction(1)
    for v in path_up:
        xp = d.node_mass(v)
        lim = min(lim, (math.ceil(xp) - xp) or Fraction(1))
    for v in path_down:
        xp = d.node_mass(v)
        lim = min(lim, (xp - math.floor(xp)) or Fraction(1))
    return lim


def apply_elementary(d: ConfigDistribution, move: tuple[int, int, Fraction],
                     stats: ElementaryStats | None = None) -> tuple[ConfigDistribution, Fraction]:
    """Transfer delta server mass from leaf src to leaf dst, then rebalance.

    ``move`` is (src, dst, delta).  Returns the new distribution and the total
    cost paid (direct transfers, pigeonhole swaps and rebalancing).
    """
    src, dst, delta = move
    delta = as_fraction(delta)
    stats = stats if stats is not None else ElementaryStats()
    if delta == 0 or src == dst:
        return d.copy(), Fraction(0)
    if delta < 0:
        raise InsufficientMass("delta must be non-negative")
    if delta > d.x[src] or delta > 1 - d.x[dst]:
        raise InsufficientMass(f"cannot move {delta} from leaf {src} ({d.x[src]}) to {dst} ({d.x[dst]})")
    sigma = _require_sigma(d.tree)
    tree, info = d.tree, d.info
    a, b = tree.leaf_of[dst], tree.leaf_of[src]
    p = tree.lca(a, b)
    path_up = tree.ancestors(a)[:tree.ancestors(a).index(p)]
    path_down = tree.ancestors(b)[:tree.ancestors(b).index(p)]
    wp = info.child_edge(p)
    total = Fraction(0)
    remaining = delta
    while remaining > 0:
        step = min(remaining, _substep_limit(d, path_up, path_down))
        d, phase = _transfer(d, src, dst, step, p)
        if phase > 4 * step * wp * sigma / (sigma - 1):
            stats.bound_violations += 1
        ratio = d.unbalanced_mass() / step
        stats.max_unbalanced_ratio = max(stats.max_unbalanced_ratio, ratio)
        if ratio > 3:
            stats.bound_violations += 1
        d, rcost, rst = rebalance(d)
        stats.bound_violations += rst.bound_violations
        stats.rebalance_cost += rcost
        stats.rebalance_iterations += rst.iterations
        stats.rebalances.append((rst.gap_initial, rcost))
        stats.phase_cost += phase
        stats.submoves += 1
        total += phase + rcost
        remaining -= step
    return d, total


def _transfer(d: ConfigDistribution, src: int, dst: int, delta: Fraction, p: int):
    """Move delta mass from src to dst inside the configurations (no rebalance)."""
    d = d.copy()
    info = d.info
    under_p = info.under[p]
    cost = Fraction(0)
    rem = delta
    for c in _by_mass(d.mu, lambda c: dst not in c and src in c):
        if rem == 0:
            break
        amt = min(rem, d.mu[c])
        _shift(d.mu, c, (c - {src}) | {dst}, amt)
        cost += amt * info.d(src, dst)
        rem -= amt
    while rem > 0:
        lacking = _by_mass(d.mu, lambda c: dst not in c)
        holding = _by_mass(d.mu, lambda c: src in c)
        if not lacking or not holding:
            raise InsufficientMass("not enough configuration mass for the transfer")
        c, c2 = lacking[0], holding[0]
        amt = min(rem, d.mu[c], d.mu[c2])
        grown = c | {dst}
        shrunk = c2 - {src}
        cands = [j for j in grown - shrunk if j in under_p]
        if not cands:
            raise RoundingInvariantError("no leaf to swap under the common ancestor")
        j = min(cands, key=lambda q: (info.d(q, dst) + info.d(src, q), q))
        _shift(d.mu, c, grown - {j}, amt)
        _shift(d.mu, c2, shrunk | {j}, amt)
        cost += amt * (info.d(j, dst) + info.d(src, j))
        rem -= amt
    d.x[src] -= delta
    d.x[dst] += delta
    return d, cost


def decompose_transfers(tree: Hst, x_prev: dict, x_new: dict) -> list[tuple[int, int, Fraction]]:
    """Leaf-to-leaf transfers (src, dst, delta), matched at the lowest common ancestor.

    Their total tree cost equals the earthmover distance between the two states.
    """
    up: dict[int, list] = {}
    down: dict[int, list] = {}
    moves = []
    for v in reversed(tree.preorder):
        if tree.is_leaf(v):
            q = tree.labels[v]
            diff = as_fraction(x_new[q]) - as_fraction(x_prev[q])
            up[v] = [[q, diff]] if diff > 0 else []
            down[v] = [[q, -diff]] if diff < 0 else []
            continue
        ups = [e for c in tree.children[v] for e in up[c]]
        downs = [e for c in tree.children[v] for e in down[c]]
        while ups and downs:
            amt = min(ups[0][1], downs[0][1])
            moves.append((downs[0][0], ups[0][0], amt))
            ups[0][1] -= amt
            downs[0][1] -= amt
            if ups[0][1] == 0:
                ups.pop(0)
            if downs[0][1] == 0:
                downs.pop(0)
        up[v], down[v] = ups, downs
    if up[tree.root] or down[tree.root]:
        raise MassNotK("the two states carry different total mass")
    return moves


def fractional_cost(tree: Hst, x_prev: dict, x_new: dict) -> Fraction:
    total = Fraction(0)
    for v in tree.preorder:
        if v == tree.root:
            continue
        diff = sum((as_fraction(x_new[q]) - as_fraction(x_prev[q]) for q in tree.subtree_leaves[v]),
                   Fraction(0))
        total += tree.length[v] * abs(diff)
    return total


@dataclass
class RoundStats:
    fractional_cost: Fraction = Fraction(0)
    cost: Fraction = Fraction(0)
    moves: int = 0
    elementary: ElementaryStats = field(default_factory=ElementaryStats)


def round_step(d: ConfigDistribution, x_new) -> tuple[ConfigDistribution, Fraction, RoundStats]:
    """Follow a change of the fractional state with a consistent, balanced distribution."""
    xs = _check_x(d.tree, d.k, x_new)
    stats = RoundStats(fractional_cost=fractional_cost(d.tree, d.x, xs))
    moves = decompose_transfers(d.tree, d.x, xs)
    for mv in moves:
        d, c = apply_elementary(d, mv, stats.elementary)
        stats.cost += c
        stats.moves += 1
    if d.x != xs:
        raise RoundingInvariantError("transfers did not reach the target state")
    return d, stats.cost, stats


def sample_configuration(d: ConfigDistribution, rng) -> tuple[int, ...]:
    u = Fraction(float(rng.random()))
    acc = Fraction(0)
    support = d.support()
    for conf, m in support:
        acc += m
        if u < acc:
            return conf
    return support[-1][0]


def quantize_state(x: dict[int, float], k: int, bits: int = 24,
                   pin: int | None = None) -> dict[int, Fraction]:
    """Round float leaf masses to multiples of 2^-bits, keeping [0, 1] and the sum k.

    ``pin`` names a leaf whose mass is forced to exactly 1 (a leaf that must
    hold a server); the rounding residue is absorbed by the other leaves.
    """
    scale = 1 << bits
    units = {q: min(scale, max(0, round(v * scale))) for q, v in x.items()}
    if pin is not None:
        units[pin] = scale
    need = k * scale - sum(units.values())
    order = sorted(units, key=lambda q: (-(x[q] * scale - units[q]) if need > 0 else (x[q] * scale - units[q]), q))
    order = [q for q in order if q != pin]
    while need != 0:
        moved = False
        for q in order:
            if need > 0 and units[q] < scale:
                units[q] += 1
                need -= 1
                moved = True
            elif need < 0 and units[q] > 0:
                units[q] -= 1
                need += 1
                moved = True
            if need == 0:
                break
        if not moved:
            raise MassNotK("cannot place k servers on the available leaves")
    return {q: Fraction(u, scale) for q, u in units.items()}
