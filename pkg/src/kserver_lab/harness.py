"""Instance generators, the end-to-end pipeline and report files."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import composer as comp
from .allocation import AllocStep, AllocationInstance
from .hst import (Hst, audit_contraction, audit_frt, contract_to_weighted, leaf_distance_table,
                  sample_frt_embedding, verify_stretch)
from .metric import FiniteMetric
from .oracle import kserver_opt
from .rounding import init_distribution, quantize_state, round_step, sample_configuration

SCHEMA_VERSION = 1
CSV_HEADER = f"# kserver-lab v{SCHEMA_VERSION}"


class UnknownKind(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"{stage}: {type(err).__name__}: {err}")
        self.stage = stage
        self.error = err


# ---------------------------------------------------------------------------
# generators

def gen_gap_instance(k: int, T: int, start: Sequence[int] | None = None) -> AllocationInstance:
    """Two unit-weight locations, quota k, alternating cost vectors.

    Odd steps charge 1 at location 0 unless it holds all k servers; even
    steps charge 1 at location 1 unless it holds at least one server.
    """
    if k < 1 or T < 1:
        raise ValueError("need k >= 1 and T >= 1")
    odd = tuple([1.0] * k + [0.0])
    even = tuple([1.0] + [0.0] * k)
    steps = [AllocStep(0, odd, k) if t % 2 == 1 else AllocStep(1, even, k)
             for t in range(1, T + 1)]
    start = tuple(start) if start is not None else (k - 1, 1)
    return AllocationInstance((1.0, 1.0), k, steps, start, 1.0)


def gap_witness(k: int) -> np.ndarray:
    """Static fractional solution: location 0 empty w.p. 1/k, else full; location 1 one server."""
    x = np.zeros((2, k + 1))
    x[0, 0] = 1.0 / k
    x[0, k] = 1.0 - 1.0 / k
    x[1, 1] = 1.0
    return x


def evaluate_fractional(inst: AllocationInstance, xs, per_step: bool = False) -> tuple[Fraction, Fraction]:
    """Exact hit and movement cost of fractional solutions x[i][j].

    ``xs`` is one d x (k+1) table used at every step, or with ``per_step`` a
    list holding one table per step.  Pass Fractions to keep values like 1/k
    exact; floats are snapped to the nearest fraction with denominator at most
    2^20.
    """
    static = not per_step
    hit = move = Fraction(0)
    prev = None
    for t, st in enumerate(inst.steps):
        x = xs if static else xs[t]
        row = [_frac(v) for v in x[st.location]]
        hit += sum((Fraction(_frac(h)) * p for h, p in zip(st.h, row)), Fraction(0))
        if prev is not None:
            for i, w in enumerate(inst.w):
                cum_a = cum_b = Fraction(0)
                for j in range(inst.k):
                    cum_a += _frac(prev[i][j])
                    cum_b += _frac(x[i][j])
                    move += _frac(w) * abs(cum_a - cum_b)
        prev = x
    return hit, move


def _frac(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, float):
        return Fraction(v).limit_denominator(1 << 20)
    return Fraction(v)


def gap_witness_exact(k: int) -> list[list[Fraction]]:
    x = [[Fraction(0)] * (k + 1) for _ in range(2)]
    x[0][0] = Fraction(1, k)
    x[0][k] = 1 - Fraction(1, k)
    x[1][1] = Fraction(1)
    return x


REQUEST_KINDS = ("uniform-paging", "random-leaf", "adversarial-alternating", "replay")


def gen_requests(kind: str, params: dict, rng) -> list[int]:
    """Request sequences over points 0..n-1.

    uniform-paging cycles through k+1 points in random order each round,
    random-leaf draws points uniformly, adversarial-alternating repeats
    params["pair"] (default (0, 1)), replay reads a JSON list from params["path"].
    """
    T = int(params.get("T", 0))
    if kind == "random-leaf":
        return [int(v) for v in rng.integers(0, int(params["n"]), size=T)]
    if kind == "uniform-paging":
        pages = list(range(min(int(params["n"]), int(params["k"]) + 1)))
        out: list[int] = []
        while len(out) < T:
            out.extend(int(v) for v in rng.permutation(pages))
        return out[:T]
    if kind == "adversarial-alternating":
        a, b = params.get("pair", (0, 1))
        return [a if t % 2 == 0 else b for t in range(T)]
    if kind == "replay":
        return [int(v) for v in json.loads(Path(params["path"]).read_text())]
    raise UnknownKind(f"unknown request kind {kind!r}; expected one of {REQUEST_KINDS}")


def save_requests(reqs: Sequence[int], path) -> None:
    Path(path).write_text(json.dumps(list(reqs)) + "\n")


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class PipelineConfig:
    k: int
    T: int
    seed: int = 0
    metric: FiniteMetric | None = None
    tree: Hst | None = None  # a plain σ-HST used instead of sampling one
    sigma: Fraction | None = None
    eps: float | None = None
    kind: str = "random-leaf"
    request_params: dict = field(default_factory=dict)
    requests: list[int] | None = None
    start: list[int] | None = None
    samples: int = 0  # extra embeddings for the distortion estimate
    tol: float = 1e-6

    def echo(self) -> dict:
        return {
            "k": self.k, "T": self.T, "seed": self.seed,
            "n": self.metric.n if self.metric is not None else len(self.tree.leaf_labels),
            "sigma": None if self.sigma is None else str(self.sigma),
            "eps": self.eps, "kind": self.kind, "samples": self.samples, "tol": self.tol,
            "start": self.start,
        }


@dataclass
class ExperimentReport:
    config: dict
    seed: int
    sigma: str
    depth_plain: int
    depth_weighted: int
    eps: float
    requests: list[int]
    steps: list[dict]
    totals: dict
    opt: dict
    ratios: dict
    predicted: dict
    violations: dict
    samples: list[list[int]]
    wall_times: dict = field(default_factory=dict)

    @property
    def violation_count(self) -> int:
        return int(sum(self.violations.values()))


def default_sigma(depth: int, k: int) -> Fraction:
    return Fraction(max(16, math.ceil(depth * math.log(k * depth + 1))))


def predicted_bound(depth: int, k: int, eps: float, sigma: float) -> dict:
    """Level recurrence with every hidden constant set to one (heuristic only)."""
    log_term = math.log(k / eps)
    gamma = (1 + eps) * (1 + 3 / sigma) + log_term / sigma
    beta = 1.0
    for _ in range(depth):
        beta = gamma * beta + log_term
    return {"gamma": gamma, "beta": beta, "levels": depth, "heuristic": True,
            "sigma_proxy_ok": sigma >= depth * math.log(k * depth + 1)}


def run_pipeline(cfg: PipelineConfig) -> ExperimentReport:
    rng = np.random.default_rng(cfg.seed)
    walls: dict[str, float] = {}
    viol: dict[str, int] = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        except Exception as err:  # annotate and re-raise
            raise StageError(name, err) from err
        finally:
            walls[name] = walls.get(name, 0.0) + time.perf_counter() - t0

    k = cfg.k
    # embed
    if cfg.tree is not None:
        tree = cfg.tree
        sigma = Fraction(tree.sigma)
        dist = None
    else:
        m = cfg.metric
        dist = [list(row) for row in m.dist]
        sigma = cfg.sigma
        if sigma is None:
            probe = stage("embed", lambda: sample_frt_embedding(m, Fraction(16), rng))
            probe_w = stage("contract", lambda: contract_to_weighted(probe))
            sigma = default_sigma(max(1, probe_w.depth), k)
        tree = stage("embed", lambda: sample_frt_embedding(m, sigma, rng))
        table = leaf_distance_table(tree)
        viol["dominance"] = sum(1 for a in range(m.n) for b in range(m.n)
                                if table[a, b] < m.dist[a][b])
    labels = sorted(tree.leaf_labels)
    n = len(labels)
    if cfg.requests is not None:
        requests = list(cfg.requests)
    else:
        params = {"n": n, "k": k, "T": cfg.T, **cfg.request_params}
        requests = [labels[i] for i in gen_requests(cfg.kind, params, rng)]
    start = list(cfg.start) if cfg.start is not None else labels[:k]

    # contract
    con = stage("contract", lambda: contract_to_weighted(tree, details=True))
    wtree = con.tree
    audit = audit_contraction(tree, con)
    viol["contraction"] = 0 if audit.ok else 1
    viol["stretch"] = len(verify_stretch(wtree).violations)
    eps = cfg.eps if cfg.eps is not None else comp.default_eps(wtree)

    # compose, map back and round
    st = stage("compose", lambda: comp.init_ensembles(wtree, k, eps, start))
    x0 = quantize_state(comp.leaf_mass_vector(wtree, comp.fractional_state(st)), k)
    dist_r = stage("round", lambda: init_distribution(tree, x0, k))
    steps = []
    counts = {"feasibility": 0, "consistency": 0, "movement_excess": 0, "mass": 0,
              "rounding_bounds": 0, "rounding_state": 0}
    samples = []
    tot = {"ensemble_hit": 0.0, "ensemble_movement": 0.0, "kserver_movement_weighted": 0.0,
           "fractional_cost_plain": Fraction(0), "rounding_cost": Fraction(0)}
    for t, r in enumerate(requests, start=1):
        frac, led = stage("compose", lambda: comp.step(st, r))
        aud = comp.ensemble_weights_audit(st)
        if not aud.ok(1e-9):
            counts["consistency"] += 1
        if abs(frac.total() - k) > 1e-9:
            counts["mass"] += 1
        if led.served_mass < 1 - 1e-6:
            counts["feasibility"] += 1
        if led.kserver_movement > led.ensemble_movement + 1e-8:
            counts["movement_excess"] += 1
        x_new = quantize_state(comp.leaf_mass_vector(wtree, frac), k, pin=r)
        dist_r, cost, rs = stage("round", lambda: round_step(dist_r, x_new))
        counts["rounding_bounds"] += rs.elementary.bound_violations
        if not (dist_r.is_consistent() and dist_r.is_balanced()):
            counts["rounding_state"] += 1
        sample = list(sample_configuration(dist_r, rng))
        samples.append(sample)
        tot["ensemble_hit"] += led.ensemble_hit
        tot["ensemble_movement"] += led.ensemble_movement
        tot["kserver_movement_weighted"] += led.kserver_movement
        tot["fractional_cost_plain"] += rs.fractional_cost
        tot["rounding_cost"] += cost
        steps.append({
            "t": t, "request": r, "served_mass": led.served_mass,
            "ensemble_movement": led.ensemble_movement, "kserver_movement": led.kserver_movement,
            "fractional_cost_plain": float(rs.fractional_cost), "rounding_cost": float(cost),
            "instances": sum(len(v) for v in st.ens.values()),
            "support": len(dist_r.mu), "sample": " ".join(map(str, sample)),
        })
    viol.update(counts)
    viol["allocation"] = len(st.diag.violations())
    embedding = {}
    if dist is not None and cfg.samples > 0:
        emb = stage("embed", lambda: audit_frt(cfg.metric, sigma, np.random.default_rng(cfg.seed + 1),
                                               cfg.samples))
        embedding = {"samples": emb.samples, "mean_distortion": emb.mean_distortion,
                     "max_pair_mean": emb.max_pair_mean, "bound": float(emb.bound)}
        viol["dominance"] += 0 if emb.dominated else 1

    # offline optima
    tdist = leaf_distance_table(tree)
    tmat = [[tdist[a, b] for b in range(max(labels) + 1)] if a in labels else []
            for a in range(max(labels) + 1)]
    opt_tree, _ = stage("oracle", lambda: kserver_opt(tmat, k, requests, start))
    opt_metric = None
    if dist is not None:
        opt_metric, _ = stage("oracle", lambda: kserver_opt(dist, k, requests, start))
    rounding = float(tot["rounding_cost"])

    def ratio(a, b):
        if b == 0:
            return 0.0 if a == 0 else math.inf
        return a / b

    ratios = {
        "rounding_vs_tree_opt": ratio(rounding, float(opt_tree)),
        "rounding_vs_metric_opt": None if opt_metric is None else ratio(rounding, float(opt_metric)),
        "rounding_vs_fractional": ratio(rounding, float(tot["fractional_cost_plain"])),
    }
    totals = {key: float(v) for key, v in tot.items()}
    return ExperimentReport(
        config=cfg.echo(), seed=cfg.seed, sigma=str(sigma), depth_plain=tree.depth,
        depth_weighted=wtree.depth, eps=eps, requests=requests, steps=steps, totals=totals,
        opt={"tree": float(opt_tree), "metric": None if opt_metric is None else float(opt_metric)},
        ratios=ratios,
        predicted={**predicted_bound(max(1, wtree.depth), k, eps, float(sigma)),
                   "embedding": embedding},
        violations=dict(sorted(viol.items())), samples=samples, wall_times=walls,
    )


# ---------------------------------------------------------------------------
# report files

STEP_COLUMNS = ["t", "request", "served_mass", "ensemble_movement", "kserver_movement",
                "fractional_cost_plain", "rounding_cost", "instances", "support", "sample"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def report_csv(r: ExperimentReport | None) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STEP_COLUMNS + ["violations"])
    if r is not None:
        for row in r.steps:
            w.writerow([_fmt(row[c]) for c in STEP_COLUMNS] + [r.violation_count])
    return buf.getvalue()


def report_json(r: ExperimentReport) -> str:
    data = asdict(r)
    data.pop("wall_times")
    data["schema"] = SCHEMA_VERSION
    data["violation_count"] = r.violation_count
    return json.dumps(data, sort_keys=True, indent=1, default=_json_default) + "\n"


def _json_default(v):
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    raise TypeError(f"cannot serialise {type(v)}")


def emit_report(r: ExperimentReport | None, path) -> tuple[Path, Path | None]:
    """Write ``path`` (CSV, one row per step) and ``path`` with a .json suffix.

    Wall-clock times are left out of both files so that a rerun with the same
    configuration reproduces them byte for byte.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_csv(r))
    if r is None:
        return path, None
    side = path.with_suffix(".json")
    side.write_text(report_json(r))
    return path, side
