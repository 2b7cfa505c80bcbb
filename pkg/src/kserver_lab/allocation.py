"""Fractional allocation on a weighted star.

State is kept in cumulative form: ``y[i, j-1]`` is the probability that
location i holds fewer than j servers, for j = 1..k.  A step runs the fix
stage (restore the quota), an optional pre-phase for infinite marginal costs,
and the hit stage, an ODE in a fictitious time eta in [0, 1].

Between two events the hit-stage field has a closed-form flow.  Writing
z = y + beta for the active coordinates and M(s) for the integral of the
normaliser N over the segment,

    z_m(s) = z_m(0) * exp((M(s) - c_m * s) / w_m),     c_m = alpha * lambda_m.

Off quota M = 0.  On quota M(s) is the unique root of
sum_m z_m(0) * exp((M - c_m s) / w_m) = sum_m z_m(0), which keeps the total
mass of the active set constant.  Since N = M' never increases inside a
segment, M is concave and every event time (a coordinate reaching 0 or 1, an
inactive coordinate waking up, two blocks meeting, the quota being reached)
is the root of a function with a single sign change; each is located with
``scipy.optimize.brentq``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

SNAP = 1e-12  # distance to {0, 1} below which a coordinate is put on the boundary
QUOTA_TOL = 1e-10
ROOT_XTOL = 1e-15


class AllocationError(ValueError):
    pass


class BadDistribution(AllocationError):
    pass


class EpsOutOfRange(AllocationError):
    pass


class NotMonotone(AllocationError):
    pass


class QuotaInfeasible(AllocationError):
    pass


class IntegratorStalled(RuntimeError):
    pass


class NormalizerNotFound(RuntimeError):
    pass


@dataclass
class AllocState:
    w: np.ndarray
    k: int
    eps: float
    y: np.ndarray  # shape (d, k)
    blocks: list[tuple[int, int]] = field(default_factory=list)  # half-open index runs
    location: int | None = None

    @property
    def d(self) -> int:
        return len(self.w)

    @property
    def beta(self) -> float:
        return self.eps / (1 + self.k)

    @property
    def alpha(self) -> float:
        return math.log(1 + (1 + self.k) / self.eps)

    def copy(self) -> "AllocState":
        return AllocState(self.w.copy(), self.k, self.eps, self.y.copy(), list(self.blocks),
                          self.location)

    def deployed(self) -> float:
        """Expected number of servers, kd - sum(y)."""
        return self.k * self.d - float(self.y.sum())


@dataclass(frozen=True)
class CostVector:
    location: int
    h: tuple  # h(0..k), non-increasing; math.inf allowed in a prefix


@dataclass
class StepCosts:
    hit: float = 0.0  # accounted hit cost (integral of lambda^eta . y^eta) plus h(k)
    movement: float = 0.0  # accounted movement: fix stage, pre-phase and hit stage
    fix_movement: float = 0.0
    event_count: int = 0
    prephase_movement: float = 0.0
    hit_movement: float = 0.0
    hit_actual: float = 0.0  # h evaluated at the end state
    movement_abs: float = 0.0  # sum_i w_i sum_j |y^t - y^{t-1}|
    movement_up: float = 0.0  # sum_i w_i sum_j max(y^t - y^{t-1}, 0)
    lam_integral: np.ndarray | None = None  # integral over eta of lambda^eta at the location


@dataclass
class Diagnostics:
    """Invariant bookkeeping for the hit stage, filled as segments are processed."""

    segments: int = 0
    events: int = 0
    max_events_per_step: int = 0
    budget_exceeded: int = 0
    clamp_max: float = 0.0
    y_range_violation: float = 0.0
    monotone_violation: float = 0.0
    quota_violation: float = 0.0
    block_spread: float = 0.0
    prefix_violation: float = 0.0
    n_increase: float = 0.0
    block_split: int = 0
    record_segments: bool = False
    segment_log: list = field(default_factory=list)

    def violations(self, tol: float = 1e-9, n_tol: float = 1e-8) -> list[str]:
        out = []
        if self.y_range_violation > tol:
            out.append(f"y outside [0,1] by {self.y_range_violation:.3g}")
        if self.monotone_violation > tol:
            out.append(f"row monotonicity broken by {self.monotone_violation:.3g}")
        if self.quota_violation > tol:
            out.append(f"sum(y) below kd - kappa by {self.quota_violation:.3g}")
        if self.block_spread > tol:
            out.append(f"unequal y inside a block by {self.block_spread:.3g}")
        if self.prefix_violation > tol:
            out.append(f"block prefix average exceeds block average by {self.prefix_violation:.3g}")
        if self.n_increase > n_tol:
            out.append(f"N increased inside a segment by {self.n_increase:.3g}")
        if self.block_split:
            out.append(f"{self.block_split} block splits")
        if self.budget_exceeded:
            out.append("event budget exceeded")
        return out


def event_budget(k: int, d: int) -> int:
    return 64 * k * d * (k + d)


# ---------------------------------------------------------------------------
# construction and conversion

def init_state(w: Sequence[float], k: int, eps: float, x0) -> AllocState:
    """State from per-location distributions x0[i][j] = P(j servers at i)."""
    if not (0 < eps <= 1):
        raise EpsOutOfRange(f"eps = {eps} must lie in (0, 1]")
    w = np.asarray(w, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (len(w), k + 1):
        raise BadDistribution(f"x0 must have shape ({len(w)}, {k + 1}), got {x0.shape}")
    if (x0 < -1e-12).any() or np.abs(x0.sum(axis=1) - 1).max() > 1e-9:
        raise BadDistribution("every row of x0 must be a probability distribution")
    if (x0 @ np.arange(k + 1)).sum() > k + 1e-9:
        raise BadDistribution("more than k servers in expectation")
    y = np.clip(np.cumsum(x0, axis=1)[:, :k], 0.0, 1.0)
    return AllocState(w, k, float(eps), y, [(j, j + 1) for j in range(k)])


def init_state_from_counts(w, k: int, eps: float, counts: Sequence[int]) -> AllocState:
    x0 = np.zeros((len(counts), k + 1))
    for i, n in enumerate(counts):
        x0[i, n] = 1.0
    return init_state(w, k, eps, x0)


def state_to_distributions(s: AllocState) -> np.ndarray:
    """x[i, j] = y[i, j+1] - y[i, j] with y_0 = 0 and y_{k+1} = 1."""
    d = s.d
    full = np.hstack([np.zeros((d, 1)), s.y, np.ones((d, 1))])
    return np.diff(full, axis=1)


def expected_servers(s: AllocState) -> np.ndarray:
    return s.k - s.y.sum(axis=1)


def lambda_from_cost_vector(h: Sequence) -> np.ndarray:
    """lambda_j = h(j-1) - h(j) for j = 1..k.

    Entries whose left end is infinite come back as math.inf; they always form
    a prefix because h is non-increasing.
    """
    h = [float(v) for v in h]
    for a, b in zip(h, h[1:]):
        if b > a:
            raise NotMonotone(f"cost vector increases from {a} to {b}")
    if math.isinf(h[-1]):
        raise NotMonotone("h(k) must be finite")
    return np.array([math.inf if math.isinf(a) else a - b for a, b in zip(h, h[1:])])


# ---------------------------------------------------------------------------
# potentials

def potential_phi_m(s: AllocState, opt_y: np.ndarray) -> float:
    ratio = np.log((1 + s.beta) / (s.y + s.beta))
    return float((1 + s.eps) * (s.w[:, None] * opt_y * ratio).sum())


def potential_phi_h(s: AllocState) -> float:
    return float((s.w[:, None] * s.y).sum() / s.alpha)


# ---------------------------------------------------------------------------
# fix stage

def _grow(y: np.ndarray, wf: np.ndarray, beta: float, target: float, free: np.ndarray) -> float:
    """Grow the free coordinates along dy/dtau = (y+beta)/w until sum(y) = target.

    Works on the flattened state in place and returns sum w * dy.
    """
    if y.sum() >= target:
        return 0.0
    idx = np.flatnonzero(free & (y < 1))
    fixed_sum = y.sum() - y[idx].sum()
    a = y[idx] + beta
    wi = wf[idx]
    caps = wi * np.log((1 + beta) / a)  # time at which each coordinate reaches 1

    def level(tau):
        return np.where(tau >= caps, 1.0, np.minimum(a * np.exp(tau / wi) - beta, 1.0))

    def total(tau):
        return fixed_sum + level(tau).sum() - target

    if not len(idx) or total(float(caps.max())) < -QUOTA_TOL * max(1.0, target):
        raise QuotaInfeasible("the quota cannot be met")
    if total(float(caps.max())) <= 0:
        new = np.ones(len(idx))
        move = float((wi * (new - y[idx])).sum())
        y[idx] = new
        return move
    tau = brentq(total, 0.0, float(caps.max()), xtol=ROOT_XTOL, rtol=4 * np.finfo(float).eps)
    new = level(tau)
    move = float((wi * (new - y[idx])).sum())
    y[idx] = new
    return move


def _check_quota(s: AllocState, kappa) -> None:
    if kappa < 0 or kappa > s.k:
        raise QuotaInfeasible(f"quota {kappa} outside [0, {s.k}]")


def fix_stage(s: AllocState, kappa: int) -> tuple[AllocState, float]:
    _check_quota(s, kappa)
    out = s.copy()
    flat = out.y.ravel()
    move = _grow(flat, np.repeat(out.w, out.k), out.beta, out.k * out.d - kappa,
                 np.ones(flat.size, dtype=bool))
    out.y = flat.reshape(out.y.shape)
    return out, move


# ---------------------------------------------------------------------------
# hit stage

class _Flow:
    """Closed-form flow of the active coordinates over one event-free segment."""

    def __init__(self, y, idx, c, wf, beta, on_quota):
        self.idx = idx
        self.a = y[idx] + beta
        self.loga = np.log(self.a)
        self.c = c[idx]
        self.w = wf[idx]
        self.beta = beta
        self.on_quota = on_quota and len(idx) > 0
        self.Z0 = float(self.a.sum())
        self.logZ0 = math.log(self.Z0) if len(idx) else 0.0
        self._m = {0.0: 0.0}

    def M(self, s: float) -> float:
        if not self.on_quota:
            return 0.0
        if s in self._m:
            return self._m[s]
        cs = self.c * s
        # each term alone must not exceed Z0, which bounds the root from above
        m = float((cs + self.w * (self.logZ0 - self.loga)).min())
        for _ in range(100):
            e = np.exp(self.loga + (m - cs) / self.w)
            g = e.sum() - self.Z0
            gp = (e / self.w).sum()
            step = g / gp
            m -= step
            if abs(step) <= 1e-16 * max(1.0, abs(m)):
                break
        self._m[s] = m
        return m

    def phi(self, s: float) -> np.ndarray:
        return self.M(s) - self.c * s

    def z(self, s: float) -> np.ndarray:
        return np.exp(self.loga + self.phi(s) / self.w)

    def N(self, s: float) -> float:
        if not self.on_quota:
            return 0.0
        u = self.z(s) / self.w
        return float((u * self.c).sum() / u.sum())


def _min_root(y, wf, c, beta, mask):
    """Smallest s >= 0 with sum of the candidate derivatives equal to zero.

    f(s) = sum u (s - c) over interior coordinates, u max(s - c, 0) at 0 and
    u min(s - c, 0) at 1, with u = (y + beta) / w.  f is piecewise linear and
    non-decreasing, so the first crossing is found from its breakpoints.
    """
    ys, cs, us = y[mask], c[mask], (y[mask] + beta) / wf[mask]
    at0, at1 = ys <= 0.0, ys >= 1.0
    inner = ~(at0 | at1)

    def f(s):
        return float((us[inner] * (s - cs[inner])).sum()
                     + (us[at0] * np.maximum(s - cs[at0], 0.0)).sum()
                     + (us[at1] * np.minimum(s - cs[at1], 0.0)).sum())

    f0 = f(0.0)
    scale = float((us * cs).sum())
    if f0 >= -1e-14 * max(1.0, scale):
        return 0.0
    points = sorted(set(float(v) for v in cs[at0 | at1] if v > 0))
    prev, fprev = 0.0, f0
    for b in points:
        fb = f(b)
        if fb >= 0:
            return prev - fprev * (b - prev) / (fb - fprev)
        prev, fprev = b, fb
    slope = float(us[inner].sum() + us[at0].sum())
    if slope <= 0:
        raise NormalizerNotFound("f stays negative on [0, alpha * lambda_max]")
    return prev - fprev / slope


def _block_lambda(lam, blocks):
    out = np.zeros(len(lam))
    for a, b in blocks:
        out[a:b] = lam[a:b].mean()
    return out


def hit_stage(s: AllocState, lam: Sequence[float], kappa: int, location: int | None = None,
              diag: Diagnostics | None = None):
    """Integrate the hit stage over eta in [0, 1].

    ``lam`` holds lambda_1..lambda_k at the requested location; infinite
    entries must already have their coordinates at 0 (see ``serve``) and stay
    frozen there.  Returns (new state, accounted hit cost, accounted movement,
    event count, integral of lambda^eta over eta).
    """
    _check_quota(s, kappa)
    out = s.copy()
    loc = out.location if location is None else location
    out.location = loc
    lam = np.asarray(lam, dtype=float)
    k, d = out.k, out.d
    beta, alpha = out.beta, out.alpha
    target = k * d - kappa
    y = out.y.ravel().copy()
    wf = np.repeat(out.w, k)
    base = loc * k
    frozen = np.zeros(y.size, dtype=bool)
    frozen[base:base + k] = np.isinf(lam)
    if (y[frozen] != 0).any():
        raise ValueError("coordinates with infinite lambda must start at 0")
    blocks = [(j, j + 1) for j in range(k)]
    hit = move = 0.0
    lam_int = np.zeros(k)
    events = 0
    budget = event_budget(k, d)
    eta = 0.0
    finite_lam = np.where(np.isinf(lam), 0.0, lam)

    if not finite_lam.any():
        out.blocks = blocks
        return out, 0.0, 0.0, 0, lam_int

    while eta < 1.0:
        y[(y < SNAP) & (y != 0)] = 0.0
        y[(y > 1 - SNAP) & (y != 1)] = 1.0
        total = y.sum()
        on_quota = total <= target + QUOTA_TOL * max(1.0, target)
        # merges, leftmost first, until none applies
        merged = True
        while merged:
            merged = False
            for p in range(len(blocks) - 1):
                (a0, b0), (a1, b1) = blocks[p], blocks[p + 1]
                if frozen[base + a0] or frozen[base + a1]:
                    continue
                if (abs(y[base + a0] - y[base + a1]) <= SNAP
                        and lam[a0:b0].mean() < lam[a1:b1].mean()):
                    _apply(("meet", (base + a0, b0 - a0, base + a1, b1 - a1)), y, blocks, base)
                    blocks[p:p + 2] = [(a0, b1)]
                    merged = True
                    break
        lam_eta = _block_lambda(finite_lam, blocks)
        c = np.zeros(y.size)
        c[base:base + k] = alpha * lam_eta
        live = ~frozen
        n_star = _min_root(y, wf, c, beta, live) if on_quota else 0.0
        tol_c = 1e-12 * np.maximum(1.0, c)
        active = live & (((y > 0) & (y < 1))
                         | ((y <= 0) & (n_star > c + tol_c))
                         | ((y >= 1) & (n_star <= c + tol_c)))
        idx = np.flatnonzero(active)
        flow = _Flow(y, idx, c, wf, beta, on_quota)
        S = 1.0 - eta
        cands = _events(flow, y, c, wf, beta, active, frozen, live, blocks, base, lam,
                        on_quota, target, S)
        s_end = min((t for t, _ in cands), default=S)
        s_end = min(max(s_end, 0.0), S)

        # accounting over [0, s_end]
        z_end = flow.z(s_end)
        y_new = y.copy()
        y_new[idx] = z_end - beta
        m_end = flow.M(s_end)
        dy_active = y_new[idx] - y[idx]
        seg_move = flow.Z0 * m_end if flow.on_quota else 0.0
        inactive_hit = float((finite_lam * (1 - active[base:base + k]) * y[base:base + k]).sum())
        lam_act = lam_eta * active[base:base + k]
        seg_hit = ((seg_move - float((flow.w * dy_active).sum())
                    - beta * s_end * float(flow.c.sum())) / alpha
                   + s_end * inactive_hit)
        # the identity above subtracts lambda^eta for inactive coordinates implicitly;
        # lam_act only documents which entries are integrated through the flow
        del lam_act
        hit += seg_hit
        move += seg_move
        lam_int += s_end * lam_eta

        if diag is not None:
            _audit_segment(diag, flow, s_end, y_new, blocks, base, finite_lam, target, k)

        y = y_new
        eta += s_end
        if s_end < S:
            events += 1
            for t, action in cands:
                if t <= s_end + 1e-14 * max(1.0, s_end):
                    _apply(action, y, blocks, base)
        else:
            eta = 1.0
        clamp = max(0.0, -float(y.min()), float(y.max()) - 1.0)
        if diag is not None:
            diag.clamp_max = max(diag.clamp_max, clamp)
        np.clip(y, 0.0, 1.0, out=y)
        if events > budget:
            if diag is not None:
                diag.budget_exceeded += 1
            raise IntegratorStalled(f"more than {budget} events in one hit stage")

    out.y = y.reshape(d, k)
    out.blocks = blocks
    if diag is not None:
        diag.events += events
        diag.max_events_per_step = max(diag.max_events_per_step, events)
    return out, float(hit), float(move), events, lam_int


def _events(flow, y, c, wf, beta, active, frozen, live, blocks, base, lam, on_quota, target, S):
    """All events inside (0, S] as (time, action) pairs."""
    cands = []
    idx = flow.idx
    pos = {int(m): n for n, m in enumerate(idx)}
    if S <= 0:
        return cands
    if not on_quota:
        for n, m in enumerate(idx):
            if flow.c[n] > 0 and y[m] > 0:
                t = flow.w[n] / flow.c[n] * math.log(flow.a[n] / beta)
                if t <= S:
                    cands.append((t, ("zero", int(m))))
        if len(idx):
            rest = y.sum() - y[idx].sum()

            def excess(s):
                return rest + float((flow.z(s) - beta).sum()) - target

            if excess(S) <= 0:
                cands.append((brentq(excess, 0.0, S, xtol=ROOT_XTOL), ("quota", None)))
    else:
        n0 = flow.N(0.0)
        nS = flow.N(S)
        phiS = flow.phi(S)
        peaks = {}

        def peak(n):
            if n not in peaks:
                cn = flow.c[n]
                peaks[n] = brentq(lambda s: flow.N(s) - cn, 0.0, S, xtol=ROOT_XTOL)
            return peaks[n]

        for n, m in enumerate(idx):
            m = int(m)
            cn, wn, an = flow.c[n], flow.w[n], flow.a[n]
            if y[m] > 0:
                level = wn * math.log(beta / an)
                if phiS[n] <= level:
                    t = brentq(lambda s: flow.phi(s)[n] - level, 0.0, S, xtol=ROOT_XTOL)
                    cands.append((t, ("zero", m)))
            elif phiS[n] <= 0 and nS < cn:
                sp = peak(n)
                if sp < S:
                    t = brentq(lambda s: flow.phi(s)[n], sp, S, xtol=ROOT_XTOL)
                    cands.append((t, ("zero", m)))
            if y[m] < 1 and n0 > cn:
                level = wn * math.log((1 + beta) / an)
                top = S if nS >= cn else peak(n)
                if flow.phi(top)[n] >= level:
                    t = brentq(lambda s: flow.phi(s)[n] - level, 0.0, top, xtol=ROOT_XTOL)
                    cands.append((t, ("one", m)))
        for m in np.flatnonzero(live & ~active & (y >= 1)):
            if nS <= c[m]:
                cm = c[m]
                t = brentq(lambda s: flow.N(s) - cm, 0.0, S, xtol=ROOT_XTOL)
                cands.append((t, ("wake", int(m))))
    # meetings of two active adjacent blocks at the requested location
    for p in range(len(blocks) - 1):
        (a0, b0), (a1, b1) = blocks[p], blocks[p + 1]
        m0, m1 = base + a0, base + a1
        if m0 not in pos or m1 not in pos:
            continue
        if not lam[a0:b0].mean() < lam[a1:b1].mean():
            continue
        n0_, n1_ = pos[m0], pos[m1]
        dc = flow.c[n1_] - flow.c[n0_]
        if dc <= 0 or flow.a[n1_] <= flow.a[n0_]:
            continue
        t = flow.w[n0_] * math.log(flow.a[n1_] / flow.a[n0_]) / dc
        if 0 < t <= S:
            cands.append((t, ("meet", (m0, b0 - a0, m1, b1 - a1))))
    return cands


def _apply(action, y, blocks, base):
    kind, arg = action
    if kind == "zero":
        y[arg] = 0.0
    elif kind == "one":
        y[arg] = 1.0
    elif kind == "meet":
        m0, n0, m1, n1 = arg
        v = (y[m0] * n0 + y[m1] * n1) / (n0 + n1)
        y[m0:m0 + n0] = v
        y[m1:m1 + n1] = v
    # "quota" and "wake" need no state change; the next segment re-derives them


def _audit_segment(diag, flow, s_end, y_new, blocks, base, lam, target, k):
    diag.segments += 1
    if flow.on_quota and s_end > 0:
        samples = [flow.N(s_end * f) for f in (0.0, 0.25, 0.5, 0.75, 1.0)]
        for a, b in zip(samples, samples[1:]):
            diag.n_increase = max(diag.n_increase, (b - a) / max(1.0, abs(a)))
    if diag.record_segments:
        diag.segment_log.append((s_end, flow.on_quota, list(blocks), flow.N(0.0)))
    d = y_new.size // k
    rows = y_new.reshape(d, k)
    diag.y_range_violation = max(diag.y_range_violation, -float(rows.min()), float(rows.max()) - 1)
    if k > 1:
        diag.monotone_violation = max(diag.monotone_violation, float((rows[:, :-1] - rows[:, 1:]).max()))
    diag.quota_violation = max(diag.quota_violation, target - float(y_new.sum()))
    for a, b in blocks:
        seg = y_new[base + a:base + b]
        diag.block_spread = max(diag.block_spread, float(seg.max() - seg.min()))
        avg = lam[a:b].mean()
        for r in range(1, b - a + 1):
            diag.prefix_violation = max(diag.prefix_violation, lam[a:a + r].mean() - avg)


# ---------------------------------------------------------------------------
# one full step

def serve(s: AllocState, h: CostVector, kappa: int,
          diag: Diagnostics | None = None) -> tuple[AllocState, StepCosts]:
    """Fix stage, infinite-cost pre-phase, hit stage."""
    _check_quota(s, kappa)
    lam = lambda_from_cost_vector(h.h)
    if len(lam) != s.k:
        raise ValueError(f"cost vector must have k+1 = {s.k + 1} entries")
    hk = float(h.h[-1])
    prev = s.y.copy()
    costs = StepCosts()
    cur, costs.fix_movement = fix_stage(s, kappa)
    n_inf = int(np.isinf(lam).sum())
    loc = h.location
    if n_inf:
        if kappa < n_inf:
            raise QuotaInfeasible(f"need {n_inf} servers at location {loc} but quota is {kappa}")
        flat = cur.y.ravel()
        flat[loc * s.k:loc * s.k + n_inf] = 0.0
        free = np.ones(flat.size, dtype=bool)
        free[loc * s.k:loc * s.k + n_inf] = False
        costs.prephase_movement = _grow(flat, np.repeat(cur.w, cur.k), cur.beta,
                                        cur.k * cur.d - kappa, free)
        cur.y = flat.reshape(cur.y.shape)
    before_blocks = [(j, j + 1) for j in range(s.k)]
    cur, hit, mov, events, lam_int = hit_stage(cur, lam, kappa, loc, diag)
    if diag is not None and not _coarser(cur.blocks, before_blocks):
        diag.block_split += 1
    if n_inf:
        assert (cur.y[loc, :n_inf] == 0).all()
    finite = np.where(np.isinf(lam), 0.0, lam)
    costs.hit = hit + hk
    costs.hit_movement = mov
    costs.movement = costs.fix_movement + costs.prephase_movement + mov
    costs.event_count = events
    costs.hit_actual = float((finite * cur.y[loc]).sum()) + hk
    delta = cur.y - prev
    costs.movement_abs = float((cur.w[:, None] * np.abs(delta)).sum())
    costs.movement_up = float((cur.w[:, None] * np.maximum(delta, 0)).sum())
    costs.lam_integral = lam_int
    if diag is not None:
        diag.quota_violation = max(diag.quota_violation, cur.k * cur.d - kappa - float(cur.y.sum()))
    return cur, costs


def _coarser(after, before) -> bool:
    """True if every block of ``before`` lies inside one block of ``after``."""
    return all(any(a <= x and y <= b for a, b in after) for x, y in before)


# ---------------------------------------------------------------------------
# instances

@dataclass(frozen=True)
class AllocStep:
    location: int
    h: tuple
    kappa: int


@dataclass
class AllocationInstance:
    w: tuple
    k: int
    steps: list[AllocStep]
    start_counts: tuple
    eps: float = 1.0

    @property
    def d(self) -> int:
        return len(self.w)

    @property
    def horizon(self) -> int:
        return len(self.steps)

    @property
    def kappa0(self) -> int:
        return int(sum(self.start_counts))

    def kappa_pattern(self) -> list[int]:
        return [self.kappa0] + [st.kappa for st in self.steps]

    def to_json(self) -> dict:
        return {
            "w": list(self.w), "k": self.k, "eps": self.eps, "start": list(self.start_counts),
            "steps": [{"loc": st.location, "h": ["inf" if math.isinf(v) else v for v in st.h],
                       "kappa": st.kappa} for st in self.steps],
        }

    @classmethod
    def from_json(cls, data: dict) -> "AllocationInstance":
        steps = [AllocStep(int(st["loc"]),
                           tuple(math.inf if v == "inf" else float(v) for v in st["h"]),
                           int(st["kappa"])) for st in data["steps"]]
        k = int(data["k"])
        start = tuple(int(v) for v in data.get("start", [k] + [0] * (len(data["w"]) - 1)))
        return cls(tuple(float(v) for v in data["w"]), k, steps, start, float(data.get("eps", 1.0)))


def load_instance(path) -> AllocationInstance:
    return AllocationInstance.from_json(json.loads(Path(path).read_text()))


def save_instance(inst: AllocationInstance, path) -> None:
    Path(path).write_text(json.dumps(inst.to_json()) + "\n")


def random_instance(rng, d: int, k: int, T: int, eps: float = 1.0,
                    quota_change: float = 0.2) -> AllocationInstance:
    """Random weights, monotone cost vectors and a wandering quota."""
    w = tuple(float(v) for v in np.round(rng.uniform(0.2, 3.0, size=d), 3))
    kappa = int(rng.integers(1, k + 1))
    start = [0] * d
    for _ in range(int(rng.integers(0, kappa + 1))):
        start[int(rng.integers(0, d))] += 1
    start = [min(v, k) for v in start]
    steps = []
    for _ in range(T):
        if rng.random() < quota_change:
            kappa = int(np.clip(kappa + rng.choice([-1, 1]), 0, k))
        lam = np.round(rng.exponential(1.0, size=k) * (rng.random(k) < 0.7), 3)
        h = np.concatenate([np.cumsum(lam[::-1])[::-1], [0.0]])
        steps.append(AllocStep(int(rng.integers(0, d)), tuple(float(v) for v in h), kappa))
    return AllocationInstance(w, k, steps, tuple(start), eps)


@dataclass
class AllocationRun:
    instance: AllocationInstance
    states: list[AllocState]
    costs: list[StepCosts]
    diag: Diagnostics

    def totals(self) -> dict:
        return {
            "hit": sum(c.hit for c in self.costs),
            "hit_actual": sum(c.hit_actual for c in self.costs),
            "movement": sum(c.movement for c in self.costs),
            "movement_abs": sum(c.movement_abs for c in self.costs),
            "movement_up": sum(c.movement_up for c in self.costs),
            "events": sum(c.event_count for c in self.costs),
        }


def run_allocation(inst: AllocationInstance, eps: float | None = None,
                   record_segments: bool = False) -> AllocationRun:
    eps = inst.eps if eps is None else eps
    state = init_state_from_counts(inst.w, inst.k, eps, inst.start_counts)
    diag = Diagnostics(record_segments=record_segments)
    states, costs = [state], []
    for st in inst.steps:
        state, c = serve(state, CostVector(st.location, st.h), st.kappa, diag)
        states.append(state)
        costs.append(c)
    return AllocationRun(inst, states, costs, diag)


# ---------------------------------------------------------------------------
# per-step inequalities and end-to-end bounds

@dataclass
class StepCheck:
    t: int
    slack_mov: float  # right side minus left side of the movement inequality
    slack_hit: float
    slack_charge_opt: float
    slack_charge_on: float


@dataclass
class InequalityReport:
    steps: list[StepCheck]
    tol: float
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def min_slack(self) -> float:
        vals = [min(c.slack_mov, c.slack_hit, c.slack_charge_opt, c.slack_charge_on)
                for c in self.steps]
        return min(vals, default=0.0)


def check_step_inequalities(run: AllocationRun, opt, tol: float = 1e-6) -> InequalityReport:
    """Slacks of the two potential inequalities and the two hit-charging bounds.

    ``opt`` is an AllocationOpt (integral optimum with its trajectory).  OPT's
    movement at step t is sum_i w_i |n*_i(t) - n*_i(t-1)| and its hit cost is
    h^t at its own count.
    """
    from .oracle import counts_to_y

    inst = run.instance
    w_max = max(inst.w)
    eps = run.states[0].eps
    alpha = run.states[0].alpha
    kap = inst.kappa_pattern()
    checks, bad = [], []
    for t, (st, c) in enumerate(zip(inst.steps, run.costs), start=1):
        prev, cur = run.states[t - 1], run.states[t]
        ys_prev = counts_to_y(opt.counts[t - 1], inst.k)
        ys = counts_to_y(opt.counts[t], inst.k)
        d_phi_m = potential_phi_m(cur, ys) - potential_phi_m(prev, ys_prev)
        d_phi_h = potential_phi_h(cur) - potential_phi_h(prev)
        mov_opt = opt.movement[t - 1]
        hit_opt = opt.hit[t - 1]
        rhs = w_max * abs(kap[t] - kap[t - 1]) + mov_opt + hit_opt
        lhs_mov = c.movement + d_phi_m
        rhs_mov = (1 + eps) * alpha * rhs
        lhs_hit = c.hit + d_phi_h + d_phi_m / alpha
        rhs_hit = (1 + eps) * rhs
        lam = lambda_from_cost_vector(st.h)
        finite = ~np.isinf(lam)
        ystar_loc = ys[st.location]
        charge_opt = float((lam[finite] * ystar_loc[finite]).sum()
                           - (c.lam_integral[finite] * ystar_loc[finite]).sum())
        charge_on = float(c.hit - float(st.h[-1]) - (lam[finite] * cur.y[st.location][finite]).sum())
        chk = StepCheck(t, rhs_mov - lhs_mov, rhs_hit - lhs_hit, charge_opt, charge_on)
        checks.append(chk)
        for name, slack, scale in (("movement", chk.slack_mov, rhs_mov), ("hit", chk.slack_hit, rhs_hit),
                                   ("charge-opt", chk.slack_charge_opt, 1.0),
                                   ("charge-on", chk.slack_charge_on, 1.0)):
            if slack < -tol * max(1.0, abs(scale)):
                bad.append(f"t={t} {name} slack {slack:.3g}")
    return InequalityReport(checks, tol, bad)


@dataclass
class CostBoundReport:
    hit: float
    hit_actual: float
    movement: float
    movement_abs: float
    opt: float
    w_max: float
    g: int
    eps: float
    alpha: float
    hit_bound: float
    hit_bound_tight: float
    movement_ratio: float
    movement_abs_bound: float

    def ok(self, rel: float = 1e-5) -> bool:
        base = self.opt + self.w_max * self.g
        return (self.hit <= self.hit_bound * (1 + rel) + rel
                and self.hit_actual <= self.hit_bound * (1 + rel) + rel
                and self.hit <= self.hit_bound_tight * (1 + rel) + rel
                and self.movement <= 4 * self.alpha * base * (1 + rel) + rel
                and self.movement_abs <= self.movement_abs_bound * (1 + rel) + rel)


def cost_bound_report(run: AllocationRun, opt) -> CostBoundReport:
    from .oracle import quota_variation

    inst = run.instance
    s0, sT = run.states[0], run.states[-1]
    tot = run.totals()
    g = quota_variation(inst.kappa_pattern())
    w_max = max(inst.w)
    base = opt.cost + w_max * g
    alpha = s0.alpha
    eps = s0.eps
    slack_c = sum(inst.k * wi for wi in inst.w) * alpha
    tight = potential_phi_h(s0) - potential_phi_h(sT)
    mv_corr = float((s0.w[:, None] * (s0.y - sT.y)).sum())
    return CostBoundReport(
        hit=tot["hit"], hit_actual=tot["hit_actual"], movement=tot["movement"],
        movement_abs=tot["movement_abs"], opt=opt.cost, w_max=w_max, g=g, eps=eps, alpha=alpha,
        hit_bound=(1 + eps) * base + slack_c,
        hit_bound_tight=(1 + eps) * base + tight,
        movement_ratio=tot["movement"] / base if base > 0 else (0.0 if tot["movement"] == 0 else math.inf),
        movement_abs_bound=2 * tot["movement"] + mv_corr,
    )
