"""Fractional k-server on a weighted HST from ensembles of allocation instances.

Every internal node p keeps a convex combination of allocation instances
over its children.  All instances at p see the same hit-cost vectors (the
increments of the children's prefix optima) and differ only in their quota
histories.  After the instances at p serve a step, the aggregated
distribution of server counts for each child c is pushed down: the change is
split into moves of probability mass between adjacent counts, and each move
relabels a slice of c's ensemble from quota j to j +- 1.

Unused quota of an instance sits on an implicit zero-length dummy leaf under
p; it counts towards the subtree mass of p but never towards a real leaf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .allocation import (AllocState, CostVector, Diagnostics, init_state_from_counts, serve,
                         state_to_distributions)
from .hst import Hst
from .oracle import OracleTables

MOVE_TINY = 1e-15
DEFAULT_ENSEMBLE_CAP = 4096
QUANTUM = 2.0 ** -20


class ComposerError(RuntimeError):
    pass


class FeasibilityViolated(ComposerError):
    pass


class ConsistencyViolated(ComposerError):
    pass


class BadStartConfig(ValueError):
    pass


class NotADistribution(ValueError):
    pass


@dataclass
class Instance:
    weight: float
    kappa: int
    state: AllocState
    history: tuple = ()


@dataclass
class NodeLedger:
    hit: float = 0.0
    movement: float = 0.0  # accounted movement, weighted by the instance fractions
    movement_abs: float = 0.0  # sum of w |dy|, weighted
    instances: int = 0
    events: int = 0


@dataclass
class StepLedger:
    t: int
    request: int
    nodes: dict[int, NodeLedger]
    kserver_movement: float
    ensemble_movement: float
    ensemble_hit: float
    z: dict[int, float]  # real leaf label -> server mass
    dummy: dict[int, float]  # internal node -> unused quota mass
    served_mass: float
    quantized_weight: float = 0.0


@dataclass
class FractionalKServerState:
    z: dict[int, float]
    dummy: dict[int, float]
    subtree: dict[int, float]  # k^t(p) for every node, dummy mass included

    def total(self) -> float:
        return sum(self.z.values()) + sum(self.dummy.values())


@dataclass
class ComposerState:
    tree: Hst
    k: int
    eps: float
    oracle: OracleTables
    ens: dict[int, list[Instance]]  # internal nodes
    leaf_ens: dict[int, dict[int, float]]  # leaf node -> {quota: weight}
    t: int = 0
    diag: Diagnostics = field(default_factory=Diagnostics)
    cap: int = DEFAULT_ENSEMBLE_CAP
    subtree_prev: dict[int, float] = field(default_factory=dict)
    history: list[StepLedger] = field(default_factory=list)

    @property
    def internal(self) -> list[int]:
        return [v for v in self.tree.preorder if not self.tree.is_leaf(v)]


def default_eps(tree: Hst) -> float:
    return 1.0 / (4 * max(1, tree.depth))


def init_ensembles(tree: Hst, k: int, eps: float | None = None, start: Sequence[int] = (),
                   cap: int = DEFAULT_ENSEMBLE_CAP) -> ComposerState:
    """One instance per internal node, quota = servers initially below it."""
    if len(start) != k:
        raise BadStartConfig(f"start must place exactly k = {k} servers, got {len(start)}")
    unknown = [q for q in start if q not in tree.leaf_of]
    if unknown:
        raise BadStartConfig(f"unknown leaves in start configuration: {unknown}")
    eps = default_eps(tree) if eps is None else eps
    below = {v: 0 for v in tree.preorder}
    for q in start:
        v = tree.leaf_of[q]
        below[v] += 1
        for u in tree.ancestors(v):
            if u != v:
                below[u] += 1
    ens, leaf_ens = {}, {}
    for v in tree.preorder:
        if tree.is_leaf(v):
            leaf_ens[v] = {below[v]: 1.0}
            continue
        kids = tree.children[v]
        w = [float(tree.length[c]) for c in kids]
        state = init_state_from_counts(w, k, eps, [below[c] for c in kids])
        ens[v] = [Instance(1.0, below[v], state, (below[v],))]
    st = ComposerState(tree, k, eps, OracleTables(tree, k), ens, leaf_ens, cap=cap)
    st.subtree_prev = {v: float(below[v]) for v in tree.preorder}
    return st


def decompose_elementary(x_prev: Sequence[float], x_new: Sequence[float],
                         tol: float = 1e-9) -> list[tuple[int, int, float]]:
    """Adjacent-count moves (src, dst, delta) turning x_prev into x_new.

    The flow across the boundary between counts j and j+1 is fixed by the two
    cumulative distributions, so the total of |delta| equals the earthmover
    distance on {0..k}.  Moves are emitted in an order in which every source
    holds enough mass when it is used.
    """
    a = np.asarray(x_prev, dtype=float)
    b = np.asarray(x_new, dtype=float)
    for row in (a, b):
        if row.ndim != 1 or (row < -tol).any() or abs(row.sum() - 1) > tol:
            raise NotADistribution(f"{row} is not a probability distribution")
    if a.shape != b.shape:
        raise NotADistribution("rows must have the same length")
    flows = np.cumsum(a - b)[:-1]
    pending = []
    for j, f in enumerate(flows):
        if f > MOVE_TINY:
            pending.append([j, j + 1, float(f)])
        elif f < -MOVE_TINY:
            pending.append([j + 1, j, float(-f)])
    cur = a.copy()
    out = []
    while pending:
        progressed = False
        for mv in pending:
            src, dst, rem = mv
            amt = min(rem, cur[src])
            if amt > MOVE_TINY:
                cur[src] -= amt
                cur[dst] += amt
                mv[2] -= amt
                out.append((src, dst, amt))
                progressed = True
        pending = [mv for mv in pending if mv[2] > MOVE_TINY]
        if not progressed and pending:
            # only rounding dust is left; push it through as is
            for src, dst, rem in pending:
                if rem > tol:
                    raise NotADistribution("moves cannot be sequenced")
                out.append((src, dst, rem))
            break
    return out


def _merge_instances(lst: list[Instance]) -> list[Instance]:
    out: dict = {}
    for inst in lst:
        key = (inst.kappa, inst.state.y.tobytes())
        if key in out:
            out[key].weight += inst.weight
        else:
            out[key] = inst
    return sorted(out.values(), key=lambda s: -s.weight)


def _apply_moves_internal(lst: list[Instance], moves) -> list[Instance]:
    """Relabel delta-measures of instances; heaviest instances are chosen first."""
    for src, dst, delta in moves:
        rem = delta
        pool = sorted((s for s in lst if s.kappa == src), key=lambda s: -s.weight)
        for inst in pool:
            if rem <= MOVE_TINY:
                break
            if inst.weight <= rem + MOVE_TINY:
                inst.kappa = dst
                rem -= inst.weight
            else:
                clone = Instance(rem, dst, inst.state.copy(), inst.history)
                inst.weight -= rem
                lst.append(clone)
                rem = 0.0
    return lst


def _apply_moves_leaf(dist: dict[int, float], moves) -> dict[int, float]:
    for src, dst, delta in moves:
        amt = min(delta, dist.get(src, 0.0))
        dist[src] = dist.get(src, 0.0) - amt
        dist[dst] = dist.get(dst, 0.0) + amt
    return {j: v for j, v in dist.items() if v > MOVE_TINY}


def _quota_row(st: ComposerState, v: int) -> np.ndarray:
    row = np.zeros(st.k + 1)
    if st.tree.is_leaf(v):
        for j, wgt in st.leaf_ens[v].items():
            row[j] += wgt
    else:
        for inst in st.ens[v]:
            row[inst.kappa] += inst.weight
    return row


def _mixture(lst: list[Instance], k: int) -> np.ndarray:
    """Weighted child count distributions, shape (children, k+1)."""
    return sum(inst.weight * state_to_distributions(inst.state) for inst in lst)


def _quantize(lst: list[Instance], cap: int) -> tuple[list[Instance], float]:
    """Fold light instances into the heaviest instance with the same quota."""
    if len(lst) <= cap:
        return lst, 0.0
    lst = sorted(lst, key=lambda s: -s.weight)
    keep, moved = [], 0.0
    heaviest: dict[int, Instance] = {}
    for inst in lst:
        if len(keep) < cap or inst.kappa not in heaviest:
            keep.append(inst)
            heaviest.setdefault(inst.kappa, inst)
        else:
            heaviest[inst.kappa].weight += inst.weight
            moved += inst.weight
    for inst in keep:
        inst.weight = round(inst.weight / QUANTUM) * QUANTUM or inst.weight
    total = sum(s.weight for s in keep)
    for inst in keep:
        inst.weight /= total
    return keep, moved


def subtree_mass(st: ComposerState, p: int) -> float:
    """k^t(p): servers below p, dummy leaves included."""
    if st.tree.is_leaf(p):
        return sum(j * wgt for j, wgt in st.leaf_ens[p].items())
    return sum(inst.weight * inst.kappa for inst in st.ens[p])


def dummy_mass(st: ComposerState, p: int) -> float:
    return sum(inst.weight * (float(inst.state.y.sum()) - inst.state.k * inst.state.d + inst.kappa)
               for inst in st.ens[p])


def fractional_state(st: ComposerState) -> FractionalKServerState:
    tree = st.tree
    z = {tree.labels[v]: subtree_mass(st, v) for v in tree.leaves}
    dummy = {v: dummy_mass(st, v) for v in st.internal}
    sub = {v: subtree_mass(st, v) for v in tree.preorder}
    return FractionalKServerState(z, dummy, sub)


def step(st: ComposerState, request: int) -> tuple[FractionalKServerState, StepLedger]:
    tree = st.tree
    if request not in tree.leaf_of:
        raise KeyError(f"request {request} is not a leaf label")
    st.oracle.extend(request)
    st.t += 1
    t = st.t
    target = tree.leaf_of[request]
    on_path = set(tree.ancestors(target)) | {target}
    ledgers: dict[int, NodeLedger] = {}
    quantized = 0.0
    for p in st.internal:
        kids = tree.children[p]
        loc = next((i for i, c in enumerate(kids) if c in on_path), None)
        if loc is None:
            cv = CostVector(0, (0.0,) * (st.k + 1))
        else:
            h = st.oracle.hit_cost_vector(kids[loc], t)
            cv = CostVector(loc, tuple(float(v) for v in h))
        led = NodeLedger()
        lst = st.ens[p]
        for inst in lst:
            new, costs = serve(inst.state, cv, inst.kappa, st.diag)
            inst.state = new
            led.hit += inst.weight * costs.hit
            led.movement += inst.weight * costs.movement
            led.movement_abs += inst.weight * costs.movement_abs
            led.events += costs.event_count
        led.instances = len(lst)
        ledgers[p] = led
        mix = _mixture(lst, st.k)
        for i, c in enumerate(kids):
            prev = _quota_row(st, c)
            new_row = np.clip(mix[i], 0.0, None)
            new_row /= new_row.sum()
            moves = decompose_elementary(prev / prev.sum(), new_row)
            if tree.is_leaf(c):
                st.leaf_ens[c] = _apply_moves_leaf(st.leaf_ens[c], moves)
            else:
                child = _apply_moves_internal(st.ens[c], moves)
                for inst in child:
                    inst.history = inst.history + (inst.kappa,)
                child = _merge_instances(child)
                child, moved = _quantize(child, st.cap)
                quantized += moved
                st.ens[c] = child
    frac = fractional_state(st)
    kmove = sum(float(tree.length[v]) * abs(frac.subtree[v] - st.subtree_prev[v])
                for v in tree.preorder if v != tree.root)
    st.subtree_prev = dict(frac.subtree)
    ens_move = sum(l.movement_abs for l in ledgers.values())
    ens_hit = sum(l.hit for l in ledgers.values())
    served = frac.z[request]
    ledger = StepLedger(t, request, ledgers, kmove, ens_move, ens_hit, frac.z, frac.dummy, served,
                        quantized)
    st.history.append(ledger)
    if served < 1 - 1e-6:
        raise FeasibilityViolated(f"only {served:.9f} servers at requested leaf {request}")
    return frac, ledger


@dataclass
class EnsembleAudit:
    consistency: float  # max deviation of the child-quota identity
    convexity: float  # max deviation of the weight sums from 1
    mass: float  # |sum of leaf and dummy mass - k|
    subtree: float  # max deviation between ensemble and leaf-sum subtree masses
    deployment: float  # max over instances of |unused quota| that is negative
    worst: tuple | None = None

    def ok(self, tol: float = 1e-9) -> bool:
        return max(self.consistency, self.convexity, self.mass, self.subtree,
                   self.deployment) <= tol


def ensemble_weights_audit(st: ComposerState) -> EnsembleAudit:
    tree = st.tree
    worst_c, where = 0.0, None
    conv = 0.0
    deploy = 0.0
    for p in st.internal:
        lst = st.ens[p]
        conv = max(conv, abs(sum(s.weight for s in lst) - 1.0))
        mix = _mixture(lst, st.k)
        for i, c in enumerate(tree.children[p]):
            row = _quota_row(st, c)
            dev = np.abs(row - mix[i])
            j = int(dev.argmax())
            if dev[j] > worst_c:
                worst_c, where = float(dev[j]), (p, c, j)
        for s in lst:
            unused = float(s.state.y.sum()) - s.state.k * s.state.d + s.kappa
            deploy = max(deploy, -unused)
    for v in tree.leaves:
        conv = max(conv, abs(sum(st.leaf_ens[v].values()) - 1.0))
    frac = fractional_state(st)
    mass = abs(frac.total() - st.k) if st.internal else 0.0
    sub = 0.0
    for v in st.internal:
        total = frac.dummy[v] + sum(frac.subtree[c] for c in tree.children[v])
        sub = max(sub, abs(total - frac.subtree[v]))
    return EnsembleAudit(worst_c, conv, mass, sub, deploy, where)


def run_composer(tree: Hst, k: int, requests: Sequence[int], start: Sequence[int],
                 eps: float | None = None) -> tuple[ComposerState, list[FractionalKServerState]]:
    st = init_ensembles(tree, k, eps, start)
    states = [fractional_state(st)]
    for r in requests:
        frac, _ = step(st, r)
        states.append(frac)
    return st, states


def leaf_mass_vector(tree: Hst, frac: FractionalKServerState) -> dict[int, float]:
    """Real-leaf masses with dummy mass spread onto spare leaf capacity.

    Mass above 1 at a leaf and the dummy mass of a node are first offered to
    leaves inside the node's own subtree, in proportion to their spare room
    1 - x; what does not fit moves one level up.  The result sums to the same
    total and has every entry in [0, 1] provided there are at least k leaves.
    """
    x = {tree.labels[v]: float(frac.z[tree.labels[v]]) for v in tree.leaves}
    order = [v for v in reversed(tree.preorder)]
    carry = {v: 0.0 for v in tree.preorder}
    for v in order:
        if tree.is_leaf(v):
            lab = tree.labels[v]
            if x[lab] > 1:
                carry[v] = x[lab] - 1
                x[lab] = 1.0
        else:
            carry[v] += frac.dummy.get(v, 0.0) + sum(carry[c] for c in tree.children[v])
            pending = carry[v]
            if pending > 0:
                labs = sorted(tree.subtree_leaves[v])
                room = {q: max(0.0, 1.0 - x[q]) for q in labs}
                total_room = sum(room.values())
                put = min(pending, total_room)
                if put > 0:
                    for q in labs:
                        x[q] += put * room[q] / total_room
                carry[v] = pending - put
    left = carry[tree.root]
    if left > 1e-9:
        raise ValueError(f"{left} server mass does not fit on the leaves")
    return {q: min(1.0, max(0.0, v)) for q, v in x.items()}


def kserver_cost(tree: Hst, xs: Sequence[dict[int, float]]) -> float:
    """Movement of a sequence of leaf-mass vectors: sum_p W(p) |x_p(t) - x_p(t-1)|."""
    total = 0.0
    for a, b in zip(xs, xs[1:]):
        total += tree_emd(tree, a, b)
    return total


def tree_emd(tree: Hst, a: dict, b: dict) -> float:
    diff = {v: 0.0 for v in tree.preorder}
    for v in reversed(tree.preorder):
        if tree.is_leaf(v):
            lab = tree.labels[v]
            diff[v] = float(b.get(lab, 0.0)) - float(a.get(lab, 0.0))
        else:
            diff[v] = sum(diff[c] for c in tree.children[v])
    return sum(float(tree.length[v]) * abs(diff[v]) for v in tree.preorder if v != tree.root)


def _is_finite(v) -> bool:
    return not (isinstance(v, float) and math.isinf(v))
