"""Hourly capacity planning as a small integer program.

For each model i, choose integer instance deltas d[j, k] (region j, GPU k):

    minimize   sum_k alpha_k * sum_j d[j,k]  +  sum_jk sigma_ik * max(0, d[j,k])
    s.t.       sum_k (n + d)[j,k] * theta_ik >= eps * max_w rho_j(w)      for every j
               sum_jk (n + d)[j,k] * theta_ik >= max_w sum_j rho_j(w)
               d[j,k] >= -n[j,k]

No constraint couples two models, so each model is solved on its own by
branch and bound over the LP relaxation (``d = up - down`` with both parts
non-negative keeps the relaxation linear).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .domain import FleetSimError
from .simplex import solve_lp

Key = Tuple[str, str, str]  # (model, region, gpu)


class Infeasible(FleetSimError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    epsilon: float = 0.6
    alpha: Mapping[str, float] = field(default_factory=dict)            # gpu -> VM cost
    sigma: Mapping[Tuple[str, str], float] = field(default_factory=dict)  # (model, gpu) -> start cost
    budget_sec: float = 30.0

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must be in (0, 1]")
        if any(v <= 0 for v in self.alpha.values()) or any(v <= 0 for v in self.sigma.values()):
            raise ValueError("alpha and sigma must be positive")


@dataclass
class ScalingPlan:
    delta: Dict[Key, int]
    gamma: float
    mu: float
    optimal: bool = True
    infeasible: List[str] = field(default_factory=list)

    @property
    def objective_value(self) -> float:
        return self.gamma + self.mu


def objective(delta: Mapping[Key, int], cfg: OptimizerConfig) -> Tuple[float, float, float]:
    """Recompute (gamma, mu, gamma + mu) for a plan, independent of the solver."""
    gamma = 0.0
    mu = 0.0
    for (model, _region, gpu), d in sorted(delta.items()):
        gamma += cfg.alpha[gpu] * d
        if d > 0:
            mu += cfg.sigma[model, gpu] * d
    return gamma, mu, gamma + mu


@dataclass
class ModelProblem:
    """One model's slice of the program, with explicit integer bounds on each delta."""

    keys: List[Key]
    n: np.ndarray
    theta: np.ndarray
    cost_up: np.ndarray     # alpha + sigma per added instance
    cost_down: np.ndarray   # alpha saved per removed instance
    regions: List[str]
    region_of: List[int]
    regional_demand: np.ndarray  # eps * max_w rho_j(w)
    global_demand: float         # max_w sum_j rho_j(w)
    lo: np.ndarray
    hi: np.ndarray

    def requirements(self) -> Tuple[np.ndarray, float]:
        """Right-hand sides in delta space: capacity still missing per region and overall."""
        base = self.n * self.theta
        reg = self.regional_demand - np.array(
            [base[[i for i, r in enumerate(self.region_of) if r == j]].sum() for j in range(len(self.regions))])
        return reg, self.global_demand - base.sum()

    def feasible(self, d: np.ndarray) -> bool:
        cap = (self.n + d) * self.theta
        for j in range(len(self.regions)):
            if cap[[i for i, r in enumerate(self.region_of) if r == j]].sum() < self.regional_demand[j] - 1e-9:
                return False
        return cap.sum() >= self.global_demand - 1e-9 and bool(np.all(d >= self.lo)) and bool(np.all(d <= self.hi))

    def cost(self, d: np.ndarray) -> float:
        return float(np.sum(np.where(d > 0, self.cost_up * d, self.cost_down * d)))


def _lp_matrix(prob: ModelProblem):
    """Objective and covering rows over the split variables (up[0..v), down[v..2v))."""
    v = len(prob.keys)
    c = np.concatenate([prob.cost_up, -prob.cost_down])
    reg, glob = prob.requirements()
    rows, rhs = [], []
    for j in range(len(prob.regions)):
        row = np.zeros(2 * v)
        for i, r in enumerate(prob.region_of):
            if r == j:
                row[i], row[v + i] = -prob.theta[i], prob.theta[i]
        rows.append(row)
        rhs.append(-reg[j])
    rows.append(np.concatenate([-prob.theta, prob.theta]))
    rhs.append(-glob)
    return c, np.array(rows), np.array(rhs)


def _split_bounds(lo: np.ndarray, hi: np.ndarray):
    """Bounds on (up, down) equivalent to lo <= up - down <= hi."""
    up_lo, up_hi = np.maximum(lo, 0), np.maximum(hi, 0)
    dn_lo, dn_hi = np.maximum(-hi, 0), np.maximum(-lo, 0)
    return np.concatenate([up_lo, dn_lo]).astype(float), np.concatenate([up_hi, dn_hi]).astype(float)


def branch_and_bound(prob: ModelProblem, budget_sec: float = 30.0) -> Tuple[Optional[np.ndarray], bool]:
    """Return (best delta, proven optimal). ``None`` means no integer point is feasible.

    Depth-first search over bounds on the integer deltas. Each node solves the
    LP relaxation; since adding and removing the same instance costs sigma > 0,
    the relaxation never uses both halves of a split variable.
    """
    v = len(prob.keys)
    c, A, b = _lp_matrix(prob)
    deadline = time.perf_counter() + budget_sec
    best_d: Optional[np.ndarray] = None
    best_cost = math.inf

    def offer(d: np.ndarray) -> None:
        nonlocal best_d, best_cost
        if prob.feasible(d):
            cost = prob.cost(d)
            if cost < best_cost:
                best_cost, best_d = cost, d

    stack = [(prob.lo.astype(int), prob.hi.astype(int))]
    while stack:
        if time.perf_counter() > deadline:
            return best_d, False
        lo, hi = stack.pop()
        res = solve_lp(c, A, b, *_split_bounds(lo, hi))
        if res.status != "optimal" or res.objective >= best_cost - 1e-7:
            continue
        d = res.x[:v] - res.x[v:]
        frac = np.abs(d - np.round(d))
        if np.all(frac <= 1e-7):
            offer(np.round(d).astype(int))
            continue
        # rounding the relaxation up gives a quick incumbent
        offer(np.minimum(np.ceil(d - 1e-7), hi).astype(int))
        i = int(np.argmax(np.where(frac > 1e-7, np.minimum(frac, 1 - frac), -1)))
        f = math.floor(d[i])
        hi_dn, lo_up = hi.copy(), lo.copy()
        hi_dn[i], lo_up[i] = f, f + 1
        # covering constraints: the rounded-up side finds incumbents sooner
        if hi_dn[i] >= lo[i]:
            stack.append((lo, hi_dn))
        if lo_up[i] <= hi[i]:
            stack.append((lo_up, hi))
    return best_d, True


def build_problem(model: str, keys: Sequence[Key], n: Mapping[Key, int],
                  forecasts: Mapping[str, np.ndarray], theta: Mapping[Tuple[str, str], float],
                  cfg: OptimizerConfig, lo: Optional[Mapping[Key, int]] = None,
                  hi: Optional[Mapping[Key, int]] = None) -> ModelProblem:
    """``forecasts`` maps region -> per-window demand (TPS, buffer already added)."""
    keys = sorted(k for k in keys if k[0] == model)
    regions = sorted({k[1] for k in keys} | set(forecasts))
    series = [np.asarray(forecasts.get(r, np.zeros(1)), dtype=float) for r in regions]
    width = max(len(s) for s in series)
    padded = np.array([np.pad(s, (0, width - len(s)), mode="edge") if len(s) else np.zeros(width) for s in series])
    regional = np.array([cfg.epsilon * s.max() if len(s) else 0.0 for s in series])
    glob = float(padded.sum(axis=0).max()) if len(padded) else 0.0
    nn = np.array([n.get(k, 0) for k in keys])
    lo_arr = np.array([(-n.get(k, 0) if lo is None else lo[k]) for k in keys])
    if hi is None:
        th_min = min(theta[k[0], k[2]] for k in keys)
        span = int(math.ceil(max(glob, regional.max(initial=0.0)) / th_min)) + 1
        hi_arr = np.full(len(keys), span)
    else:
        hi_arr = np.array([hi[k] for k in keys])
    return ModelProblem(
        keys=list(keys), n=nn,
        theta=np.array([theta[k[0], k[2]] for k in keys], dtype=float),
        cost_up=np.array([cfg.alpha[k[2]] + cfg.sigma[k[0], k[2]] for k in keys]),
        cost_down=np.array([cfg.alpha[k[2]] for k in keys]),
        regions=regions, region_of=[regions.index(k[1]) for k in keys],
        regional_demand=regional, global_demand=glob, lo=lo_arr, hi=hi_arr)


def _relax_to_caps(prob: ModelProblem) -> List[str]:
    """Lower unattainable demands to what the bounds allow; return what was cut."""
    cut = []
    cap_max = (prob.n + prob.hi) * prob.theta
    for j, region in enumerate(prob.regions):
        most = cap_max[[i for i, r in enumerate(prob.region_of) if r == j]].sum()
        if prob.regional_demand[j] > most + 1e-9:
            cut.append(f"regional:{region}")
            prob.regional_demand[j] = most
    if prob.global_demand > cap_max.sum() + 1e-9:
        cut.append("global")
        prob.global_demand = float(cap_max.sum())
    return cut


def rebalance(prob: ModelProblem, d: np.ndarray, max_moves: int = 1000) -> np.ndarray:
    """Shift units between regions without changing the plan's cost.

    The program is often degenerate: adding an instance costs the same in every
    region, so many optima exist. Among them prefer the one whose capacity is
    spread like the regional demand. A unit moves from key ``a`` to key ``b``
    only when both keys have identical costs and both deltas sit on the same
    side of zero (so gamma and mu are unchanged), the result stays feasible and
    the donor region remains at least as covered as the recipient.
    """
    d = d.copy()
    nreg = len(prob.regions)
    members = [[i for i, r in enumerate(prob.region_of) if r == j] for j in range(nreg)]
    if nreg < 2 or not np.any(prob.regional_demand > 0):
        return d

    def coverage(dd):
        cap = (prob.n + dd) * prob.theta
        out = np.full(nreg, np.inf)
        for j in range(nreg):
            if prob.regional_demand[j] > 0:
                out[j] = cap[members[j]].sum() / prob.regional_demand[j]
        return out

    for _ in range(max_moves):
        cov = coverage(d)
        moved = False
        for jb in np.argsort(cov, kind="stable"):
            for ja in np.argsort(-cov, kind="stable"):
                if cov[ja] <= cov[jb]:
                    break
                for a in members[ja]:
                    for b in members[jb]:
                        if prob.cost_up[a] != prob.cost_up[b] or prob.cost_down[a] != prob.cost_down[b]:
                            continue
                        if (d[a] > 0) != (d[b] >= 0) or d[a] - 1 < prob.lo[a] or d[b] + 1 > prob.hi[b]:
                            continue
                        trial = d.copy()
                        trial[a] -= 1
                        trial[b] += 1
                        after = coverage(trial)
                        if after[ja] < after[jb] or not prob.feasible(trial):
                            continue
                        d = trial
                        moved = True
                        break
                    if moved:
                        break
                if moved:
                    break
            if moved:
                break
        if not moved:
            break
    return d


def solve(n: Mapping[Key, int], forecasts: Mapping[str, Mapping[str, np.ndarray]],
          theta: Mapping[Tuple[str, str], float], cfg: OptimizerConfig,
          lo: Optional[Mapping[Key, int]] = None, hi: Optional[Mapping[Key, int]] = None) -> ScalingPlan:
    """Optimal integer plan for every model in ``n``.

    ``forecasts[model][region]`` is the predicted demand series for the next
    window. ``lo``/``hi`` bound each delta (default ``-n`` and a demand-derived
    ceiling). Demand beyond what the bounds allow is reported in
    ``plan.infeasible`` and the plan saturates the bounds instead.
    """
    delta: Dict[Key, int] = {}
    optimal = True
    infeasible: List[str] = []
    for model in sorted({k[0] for k in n}):
        prob = build_problem(model, list(n), n, forecasts.get(model, {}), theta, cfg, lo, hi)
        cut = _relax_to_caps(prob)
        infeasible += [f"{model}:{c}" for c in cut]
        d, proven = branch_and_bound(prob, cfg.budget_sec)
        if d is None:
            raise Infeasible(f"no feasible plan for {model}")
        optimal &= proven
        d = rebalance(prob, d)
        for key, v in zip(prob.keys, d):
            delta[key] = int(v)
    gamma, mu, _ = objective(delta, cfg)
    return ScalingPlan(delta, gamma, mu, optimal, infeasible)


def check_constraints(plan: ScalingPlan, n: Mapping[Key, int], forecasts, theta, cfg: OptimizerConfig) -> bool:
    """Post-hoc check that a plan meets both demand families and never over-deallocates."""
    for model in sorted({k[0] for k in n}):
        prob = build_problem(model, list(n), n, forecasts.get(model, {}), theta, cfg)
        d = np.array([plan.delta[k] for k in prob.keys])
        if np.any(d < -prob.n):
            return False
        cap = (prob.n + d) * prob.theta
        for j in range(len(prob.regions)):
            if cap[[i for i, r in enumerate(prob.region_of) if r == j]].sum() < prob.regional_demand[j] - 1e-9:
                return False
        if cap.sum() < prob.global_demand - 1e-9:
            return False
    return True


def largest_remainder(total: int, weights: Sequence[float]) -> List[int]:
    """Split ``total`` units proportionally to ``weights`` (Hamilton's method, ties by index)."""
    wsum = float(sum(weights))
    if total <= 0 or wsum <= 0:
        return [0] * len(weights)
    quotas = [total * w / wsum for w in weights]
    base = [int(math.floor(q)) for q in quotas]
    left = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def apply_floor_and_caps(delta: Mapping[Key, int], n: Mapping[Key, int], floor: int, cap: int,
                         region_capacity: Optional[Mapping[str, int]] = None) -> Tuple[Dict[Key, int], int]:
    """Clamp every endpoint's target into [floor, cap] and region totals to capacity.

    Over-capacity regions keep their deallocations and shrink the positive
    deltas proportionally (largest-remainder rounding). Returns the clamped
    deltas and how many entries changed.
    """
    out = {}
    for key, d in delta.items():
        target = min(max(n.get(key, 0) + d, floor), cap)
        out[key] = target - n.get(key, 0)
    if region_capacity:
        for region, limit in sorted(region_capacity.items()):
            keys = sorted(k for k in out if k[1] == region)
            total = sum(n.get(k, 0) + out[k] for k in keys)
            if total <= limit:
                continue
            pos = [k for k in keys if out[k] > 0]
            fixed = sum(n.get(k, 0) + min(out[k], 0) for k in keys)
            room = max(limit - fixed, 0)
            shares = largest_remainder(room, [out[k] for k in pos])
            for k, s in zip(pos, shares):
                out[k] = s
    changed = sum(1 for k in out if out[k] != delta.get(k))
    return out, changed
