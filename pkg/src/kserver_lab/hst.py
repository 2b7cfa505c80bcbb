"""Hierarchically separated trees: FRT sampling, depth-reducing contraction, audits.

Trees are stored as a parent array with one edge length per node (the length
of the edge to its parent; the root carries 0).  Leaves carry the label of the
metric point they represent.  All lengths are exact fractions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from itertools import combinations
from pathlib import Path

from .metric import FiniteMetric, as_fraction, diameter


class NotAnHst(ValueError):
    pass


class UnknownLeaf(KeyError):
    pass


@dataclass(frozen=True, eq=False)
class Hst:
    parent: tuple[int, ...]
    length: tuple[Fraction, ...]
    labels: tuple[int | None, ...]
    sigma: Fraction

    def __post_init__(self):
        n = len(self.parent)
        if not (len(self.length) == len(self.labels) == n) or n == 0:
            raise NotAnHst("parent, length and labels must have the same nonzero size")
        roots = [v for v, p in enumerate(self.parent) if p < 0]
        if len(roots) != 1:
            raise NotAnHst(f"expected exactly one root, found {len(roots)}")
        # every node must reach the root without revisiting
        for v in range(n):
            seen = 0
            u = v
            while self.parent[u] >= 0:
                u = self.parent[u]
                seen += 1
                if seen > n:
                    raise NotAnHst("parent array contains a cycle")
        for v in range(n):
            leaf = not self.children[v]
            if leaf and self.labels[v] is None:
                raise NotAnHst(f"leaf {v} has no label")
            if not leaf and self.labels[v] is not None:
                raise NotAnHst(f"internal node {v} carries a label")
        if len(set(self.leaf_labels)) != len(self.leaf_labels):
            raise NotAnHst("duplicate leaf labels")

    @cached_property
    def root(self) -> int:
        return self.parent.index(-1)

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        kids = [[] for _ in self.parent]
        for v, p in enumerate(self.parent):
            if p >= 0:
                kids[p].append(v)
        return tuple(tuple(c) for c in kids)

    @property
    def size(self) -> int:
        return len(self.parent)

    def is_leaf(self, v: int) -> bool:
        return not self.children[v]

    @cached_property
    def leaves(self) -> tuple[int, ...]:
        """Leaf nodes in depth-first order, so every subtree is a contiguous run."""
        return tuple(v for v in self.preorder if not self.children[v])

    @cached_property
    def leaf_labels(self) -> tuple[int, ...]:
        return tuple(self.labels[v] for v in self.leaves)

    @cached_property
    def leaf_of(self) -> dict[int, int]:
        return {self.labels[v]: v for v in self.leaves}

    @cached_property
    def preorder(self) -> tuple[int, ...]:
        order = []
        stack = [self.root]
        while stack:
            v = stack.pop()
            order.append(v)
            stack.extend(reversed(self.children[v]))
        return tuple(order)

    @cached_property
    def node_depth(self) -> tuple[int, ...]:
        dep = [0] * self.size
        for v in self.preorder:
            if self.parent[v] >= 0:
                dep[v] = dep[self.parent[v]] + 1
        return tuple(dep)

    @property
    def depth(self) -> int:
        """Number of edges on the longest root-leaf path."""
        return max(self.node_depth)

    @cached_property
    def subtree_leaves(self) -> tuple[frozenset[int], ...]:
        """Leaf labels under each node."""
        out: list[frozenset] = [frozenset()] * self.size
        for v in reversed(self.preorder):
            if not self.children[v]:
                out[v] = frozenset([self.labels[v]])
            else:
                out[v] = frozenset().union(*(out[c] for c in self.children[v]))
        return tuple(out)

    @cached_property
    def subtree_size(self) -> tuple[int, ...]:
        out = [1] * self.size
        for v in reversed(self.preorder):
            out[v] = 1 + sum(out[c] for c in self.children[v])
        return tuple(out)

    @cached_property
    def height(self) -> tuple[Fraction, ...]:
        """Largest distance from each node down to a leaf of its subtree."""
        out = [Fraction(0)] * self.size
        for v in reversed(self.preorder):
            if self.children[v]:
                out[v] = max(self.length[c] + out[c] for c in self.children[v])
        return tuple(out)

    def ancestors(self, v: int) -> list[int]:
        """v and its ancestors, bottom-up."""
        path = [v]
        while self.parent[path[-1]] >= 0:
            path.append(self.parent[path[-1]])
        return path

    def lca(self, a: int, b: int) -> int:
        up = set(self.ancestors(a))
        for v in self.ancestors(b):
            if v in up:
                return v
        raise AssertionError("nodes in different trees")

    def node_distance(self, a: int, b: int) -> Fraction:
        top = self.lca(a, b)
        total = Fraction(0)
        for v in (a, b):
            while v != top:
                total += self.length[v]
                v = self.parent[v]
        return total

    def to_json(self) -> dict:
        return {
            "sigma": _enc(self.sigma),
            "parent": list(self.parent),
            "length": [_enc(x) for x in self.length],
            "labels": list(self.labels),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Hst":
        return cls(
            parent=tuple(int(p) for p in data["parent"]),
            length=tuple(as_fraction(x) for x in data["length"]),
            labels=tuple(None if x is None else int(x) for x in data["labels"]),
            sigma=as_fraction(data["sigma"]),
        )


def _enc(v: Fraction):
    return int(v) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"


def save_tree(t: Hst, path) -> None:
    Path(path).write_text(json.dumps(t.to_json()) + "\n")


def load_tree(path) -> Hst:
    return Hst.from_json(json.loads(Path(path).read_text()))


def leaf_distance(t: Hst, a: int, b: int) -> Fraction:
    """Tree distance between the leaves labelled a and b."""
    try:
        va, vb = t.leaf_of[a], t.leaf_of[b]
    except KeyError as exc:
        raise UnknownLeaf(exc.args[0]) from None
    if va == vb:
        return Fraction(0)
    return t.node_distance(va, vb)


def leaf_distance_table(t: Hst) -> dict[tuple[int, int], Fraction]:
    labels = t.leaf_labels
    out = {(a, a): Fraction(0) for a in labels}
    for a, b in combinations(labels, 2):
        out[a, b] = out[b, a] = leaf_distance(t, a, b)
    return out


# ---------------------------------------------------------------------------
# construction helpers

def tree_from_children(spec, sigma) -> Hst:
    """Build a tree from a nested description.

    ``spec`` is either an int (a leaf label) or a pair ``(edge_lengths,
    children)`` where ``edge_lengths`` is a single length shared by all
    children or a list with one length per child.
    """
    parent: list[int] = []
    length: list[Fraction] = []
    labels: list[int | None] = []

    def add(node_spec, par, edge):
        idx = len(parent)
        parent.append(par)
        length.append(as_fraction(edge))
        if isinstance(node_spec, int):
            labels.append(node_spec)
            return
        labels.append(None)
        lens, kids = node_spec
        if not isinstance(lens, (list, tuple)):
            lens = [lens] * len(kids)
        for e, kid in zip(lens, kids):
            add(kid, idx, e)

    add(spec, -1, 0)
    return Hst(tuple(parent), tuple(length), tuple(labels), as_fraction(sigma))


def uniform_hst(branching: list[int], sigma, top=None) -> Hst:
    """Complete plain σ-HST; ``branching[i]`` children per node at depth i."""
    sigma = as_fraction(sigma)
    top = as_fraction(top) if top is not None else sigma ** (len(branching) - 1)
    counter = iter(range(10**9))

    def build(level):
        if level == len(branching):
            return next(counter)
        edge = top / sigma**level
        return (edge, [build(level + 1) for _ in range(branching[level])])

    return tree_from_children(build(0), sigma)


def caterpillar_hst(n_leaves: int, sigma) -> Hst:
    """A geometric spine with one leaf hanging off every spine node."""
    sigma = as_fraction(sigma)
    if n_leaves == 1:
        return tree_from_children(0, sigma)

    def build(i):
        if i == n_leaves - 2:
            return (sigma ** -i, [i, i + 1])
        return (sigma ** -i, [i, build(i + 1)])

    return tree_from_children(build(0), sigma)


def random_hst(rng, sigma, max_leaves: int = 64, max_depth: int = 6,
               max_children: int = 4) -> Hst:
    """Random plain σ-HST, including unary chains and uneven leaf depths."""
    sigma = as_fraction(sigma)
    target = int(rng.integers(2, max_leaves + 1))
    counter = iter(range(10**9))
    leaves_made = 0

    def build(level, budget):
        nonlocal leaves_made
        if level == max_depth or budget <= 1 or (level > 0 and rng.random() < 0.15):
            leaves_made += 1
            return next(counter)
        arity = int(rng.integers(1, max_children + 1))
        arity = min(arity, budget) if budget > 1 else 1
        parts = _split(rng, budget, arity)
        edge = sigma ** (max_depth - level)
        return (edge, [build(level + 1, b) for b in parts])

    return tree_from_children(build(0, target), sigma)


def _split(rng, total, parts):
    if parts <= 1:
        return [total]
    cuts = sorted(rng.choice(range(1, total), size=parts - 1, replace=False).tolist())
    bounds = [0] + cuts + [total]
    return [b - a for a, b in zip(bounds, bounds[1:])]


# ---------------------------------------------------------------------------
# FRT sampling

def sample_frt_embedding(m: FiniteMetric, sigma, rng) -> Hst:
    """Sample a dominating plain σ-HST over the points of ``m``.

    Standard random-partition construction: a random permutation of the points
    and a random radius factor beta in [1, 2).  Level-i clusters are cut by
    balls of radius beta * sigma**i * u around the first permutation point that
    covers each vertex, with u a quarter of the smallest distance.  The edge
    above a level-i cluster has length 2 * sigma**(i+1) * u, which makes every
    leaf pair at least as far apart in the tree as in the metric.
    """
    sigma = as_fraction(sigma)
    if sigma <= 1:
        raise ValueError("sigma must exceed 1")
    n = m.n
    if n == 1:
        return Hst((-1,), (Fraction(0),), (0,), sigma)
    dmin = min(m.dist[a][b] for a in range(n) for b in range(n) if a != b)
    unit = dmin / 4
    beta = 1 + Fraction(int(rng.integers(0, 2**20)), 2**20)
    perm = [int(v) for v in rng.permutation(n)]
    delta = diameter(m)
    top = 1
    while beta * sigma**top * unit < delta:
        top += 1

    parent: list[int] = [-1]
    length: list[Fraction] = [Fraction(0)]
    labels: list[int | None] = [None]
    clusters = [(0, list(range(n)))]  # (node id, members) at the current level
    for level in range(top - 1, 0, -1):
        radius = beta * sigma**level * unit
        edge = 2 * sigma ** (level + 1) * unit
        nxt = []
        for node, members in clusters:
            groups: dict[int, list[int]] = {}
            for v in members:
                centre = next(c for c in perm if m.dist[c][v] <= radius)
                groups.setdefault(centre, []).append(v)
            for centre in perm:
                if centre in groups:
                    parent.append(node)
                    length.append(edge)
                    labels.append(None)
                    nxt.append((len(parent) - 1, groups[centre]))
        clusters = nxt
    edge = 2 * sigma * unit
    for node, members in clusters:
        for v in sorted(members):
            parent.append(node)
            length.append(edge)
            labels.append(v)
    return Hst(tuple(parent), tuple(length), tuple(labels), sigma)


# ---------------------------------------------------------------------------
# contraction

@dataclass
class Contraction:
    tree: Hst
    contracted: frozenset[int]  # input nodes merged into their parent
    node_map: dict[int, int]  # input node -> output node (contracted nodes map to their host)
    input_nodes: int
    output_nodes: int


def check_plain_hst(t: Hst, sigma) -> None:
    sigma = as_fraction(sigma)
    for v in range(t.size):
        kids = t.children[v]
        if not kids:
            continue
        if len({t.length[c] for c in kids}) != 1:
            raise NotAnHst(f"children of node {v} have unequal edge lengths")
        if any(t.length[c] <= 0 for c in kids):
            raise NotAnHst(f"node {v} has a non-positive child edge")
        if v != t.root and t.length[v] < sigma * t.length[kids[0]]:
            raise NotAnHst(f"node {v}: parent edge {t.length[v]} < sigma * {t.length[kids[0]]}")


def contract_to_weighted(t: Hst, sigma=None, *, details: bool = False):
    """Contract heavy child edges bottom-up so the result has logarithmic depth.

    After the subtrees of a node are processed, a child whose processed
    subtree holds strictly more than half of the nodes of the processed tree
    is merged into the node; its children are re-attached with their own edge
    lengths.  Node counts include internal nodes.
    """
    sigma = as_fraction(sigma if sigma is not None else t.sigma)
    check_plain_hst(t, sigma)
    kids: dict[int, list[int]] = {}
    size: dict[int, int] = {}
    contracted: set[int] = set()
    host: dict[int, int] = {}
    for v in reversed(t.preorder):
        cur = list(t.children[v])
        total = 1 + sum(size[c] for c in cur)
        heavy = [c for c in cur if 2 * size[c] > total]
        if heavy:
            (c,) = heavy
            contracted.add(c)
            i = cur.index(c)
            cur[i:i + 1] = kids[c]
            total -= 1
        kids[v] = cur
        size[v] = total

    parent: list[int] = []
    length: list[Fraction] = []
    labels: list[int | None] = []
    node_map: dict[int, int] = {}
    stack = [(t.root, -1)]
    while stack:
        v, par = stack.pop()
        idx = len(parent)
        parent.append(par)
        length.append(t.length[v] if par >= 0 else Fraction(0))
        labels.append(t.labels[v])
        node_map[v] = idx
        stack.extend((c, idx) for c in reversed(kids[v]))
    for v in t.preorder:
        if v in contracted:
            node_map[v] = node_map[t.parent[v]]
    out = Hst(tuple(parent), tuple(length), tuple(labels), sigma)
    if details:
        return Contraction(out, frozenset(contracted), node_map, t.size, out.size)
    return out


@dataclass
class StretchReport:
    violations: list[tuple[int, int, Fraction, Fraction]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_stretch(t: Hst, sigma=None) -> StretchReport:
    """Every non-root internal node p with W(p) < sigma * w(p, i) for some child i."""
    sigma = as_fraction(sigma if sigma is not None else t.sigma)
    rep = StretchReport()
    for v in range(t.size):
        if v == t.root or t.is_leaf(v):
            continue
        for c in t.children[v]:
            if t.length[v] < sigma * t.length[c]:
                rep.violations.append((v, c, t.length[v], t.length[c]))
    return rep


# ---------------------------------------------------------------------------
# audits

@dataclass
class ContractionAudit:
    same_leaves: bool
    depth: int
    depth_bound: int
    depth_bound_leaves: int
    min_ratio: Fraction
    max_ratio: Fraction
    ratio_bound: Fraction
    balanced: bool
    stretch_ok: bool
    longest_edge_kept: bool

    @property
    def ok(self) -> bool:
        return (self.same_leaves and self.depth <= self.depth_bound
                and self.min_ratio >= 1 and self.max_ratio <= self.ratio_bound
                and self.balanced and self.stretch_ok and self.longest_edge_kept)


def is_balanced(t: Hst) -> bool:
    sz = t.subtree_size
    return all(2 * sz[c] <= sz[v] for v in range(t.size) for c in t.children[v])


def audit_contraction(t: Hst, c: Contraction) -> ContractionAudit:
    out = c.tree
    sigma = out.sigma
    ratios = []
    kept = True
    leaf_in = t.leaf_of
    for a, b in combinations(sorted(t.leaf_labels), 2):
        d_in = t.node_distance(leaf_in[a], leaf_in[b])
        d_out = leaf_distance(out, a, b)
        ratios.append(d_in / d_out)
        # the longest edge on the input path must survive somewhere on it
        top = t.lca(leaf_in[a], leaf_in[b])
        edges = []
        for v in (leaf_in[a], leaf_in[b]):
            while v != top:
                edges.append(v)
                v = t.parent[v]
        longest = max(t.length[e] for e in edges)
        if not any(t.length[e] == longest and e not in c.contracted for e in edges):
            kept = False
    nodes = out.size
    n_leaves = len(out.leaves)
    return ContractionAudit(
        same_leaves=set(out.leaf_labels) == set(t.leaf_labels),
        depth=out.depth,
        depth_bound=math.ceil(math.log2(nodes)) if nodes > 1 else 0,
        depth_bound_leaves=math.ceil(math.log2(n_leaves)) if n_leaves > 1 else 0,
        min_ratio=min(ratios, default=Fraction(1)),
        max_ratio=max(ratios, default=Fraction(1)),
        ratio_bound=2 * sigma / (sigma - 1),
        balanced=is_balanced(out),
        stretch_ok=verify_stretch(out, sigma).ok,
        longest_edge_kept=kept,
    )


@dataclass
class EmbeddingAudit:
    dominated: bool
    mean_distortion: float
    max_pair_mean: float
    bound: float
    samples: int


def audit_frt(m: FiniteMetric, sigma, rng, samples: int = 200) -> EmbeddingAudit:
    """Dominance on every sample and the per-pair mean stretch over all samples."""
    sigma = as_fraction(sigma)
    pairs = list(combinations(range(m.n), 2))
    acc = {p: Fraction(0) for p in pairs}
    dominated = True
    for _ in range(samples):
        t = sample_frt_embedding(m, sigma, rng)
        for a, b in pairs:
            d_t = leaf_distance(t, a, b)
            if d_t < m.dist[a][b]:
                dominated = False
            acc[a, b] += d_t / m.dist[a][b]
    means = [float(v / samples) for v in acc.values()] or [1.0]
    bound = 8 * float(sigma) * math.log(m.n) / math.log(float(sigma)) if m.n > 1 else 0.0
    return EmbeddingAudit(dominated, sum(means) / len(means), max(means), bound, samples)
