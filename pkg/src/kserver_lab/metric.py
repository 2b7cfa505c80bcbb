"""Finite metric spaces with exact rational distances."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path


class MetricError(ValueError):
    pass


class AsymmetricDistance(MetricError):
    pass


class ZeroOffDiagonal(MetricError):
    pass


class TriangleViolation(MetricError):
    pass


def as_fraction(value) -> Fraction:
    """Convert ints, floats, decimal strings or "p/q" strings to a Fraction.

    Floats are converted through their shortest repr so that 0.1 becomes 1/10
    rather than the nearest binary fraction.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


@dataclass(frozen=True)
class FiniteMetric:
    n: int
    dist: tuple[tuple[Fraction, ...], ...]

    def __call__(self, a: int, b: int) -> Fraction:
        return self.dist[a][b]

    def to_json(self) -> dict:
        return {"n": self.n, "dist": [[_num(v) for v in row] for row in self.dist]}


def _num(v: Fraction):
    if v.denominator == 1:
        return int(v)
    return f"{v.numerator}/{v.denominator}"


def build_metric(n: int, dist) -> FiniteMetric:
    """Validate an n x n table and return it as a FiniteMetric.

    The triangle check is exhaustive and exact, so it is cubic in n.
    """
    if len(dist) != n or any(len(row) != n for row in dist):
        raise MetricError(f"distance table must be {n}x{n}")
    table = [[as_fraction(v) for v in row] for row in dist]
    for a in range(n):
        if table[a][a] != 0:
            raise MetricError(f"dist[{a}][{a}] = {table[a][a]} is not zero")
        for b in range(a + 1, n):
            if table[a][b] != table[b][a]:
                raise AsymmetricDistance(
                    f"dist[{a}][{b}] = {table[a][b]} but dist[{b}][{a}] = {table[b][a]}"
                )
            if table[a][b] <= 0:
                raise ZeroOffDiagonal(f"dist[{a}][{b}] = {table[a][b]} must be positive")
    for a in range(n):
        ra = table[a]
        for b in range(n):
            ab = ra[b]
            rb = table[b]
            for c in range(n):
                if ra[c] > ab + rb[c]:
                    raise TriangleViolation(
                        f"d({a},{c}) = {ra[c]} > d({a},{b}) + d({b},{c}) = {ab + rb[c]}"
                    )
    return FiniteMetric(n, tuple(tuple(row) for row in table))


def diameter(m: FiniteMetric) -> Fraction:
    return max((v for row in m.dist for v in row), default=Fraction(0))


def uniform_metric(n: int, d=1) -> FiniteMetric:
    d = as_fraction(d)
    return build_metric(n, [[0 if a == b else d for b in range(n)] for a in range(n)])


def line_metric(positions) -> FiniteMetric:
    pos = [as_fraction(p) for p in positions]
    return build_metric(len(pos), [[abs(p - q) for q in pos] for p in pos])


def random_metric(n: int, rng, low: int = 1, high: int = 10) -> FiniteMetric:
    """Shortest-path closure of random integer edge weights on the complete graph."""
    w = [[0] * n for _ in range(n)]
    for a in range(n):
        for b in range(a + 1, n):
            w[a][b] = w[b][a] = int(rng.integers(low, high + 1))
    for m in range(n):
        for a in range(n):
            for b in range(n):
                if w[a][m] + w[m][b] < w[a][b]:
                    w[a][b] = w[a][m] + w[m][b]
    return build_metric(n, w)


def load_metric(path) -> FiniteMetric:
    data = json.loads(Path(path).read_text())
    return build_metric(int(data["n"]), data["dist"])


def save_metric(m: FiniteMetric, path) -> None:
    Path(path).write_text(json.dumps(m.to_json()) + "\n")
