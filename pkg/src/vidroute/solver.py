"""Exact two-stage robust solver.

The pipeline: enumerate the vertices (poles) of the budgeted uncertainty
polytope, evaluate the second-stage recourse exactly per pole, search the
worst case, and tighten upper/lower bounds by scenario generation. The
master problem is solved by depth-first branch and bound over the discrete
per-task configuration space; value-function cuts (one per identified
worst-case scenario) are exact because the second stage decomposes per task.
A separate dual evaluation of the inner max-min serves as a cross-check.
"""

from __future__ import annotations

import itertools
import math
import weakref
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CapacityError, ConfigurationError, InfeasibleError
from .model import (
    LOCATIONS,
    FirstStageDecision,
    Location,
    RobustInstance,
    SecondStageDecision,
    UncertaintySet,
)

DEFAULT_POLE_LIMIT = 20


@dataclass(frozen=True)
class Scenario:
    """One vertex of the uncertainty polytope: binary deviations g and the
    realized cost vector u = baseline + g * deviation."""

    g: tuple[int, ...]
    u: tuple[float, ...]

    @classmethod
    def from_g(cls, uset: UncertaintySet, g: Sequence[int]) -> "Scenario":
        u = tuple(b + gk * d for b, d, gk in zip(uset.baseline, uset.deviation, g))
        return cls(g=tuple(int(x) for x in g), u=u)

    @classmethod
    def baseline(cls, uset: UncertaintySet) -> "Scenario":
        return cls.from_g(uset, (0,) * uset.size)


@dataclass
class Cut:
    """Value-function cut for one scenario: evaluates the exact second-stage
    optimum of a candidate first-stage decision under that scenario."""

    scenario: Scenario
    instance: RobustInstance
    dual_pair: Optional[tuple] = None

    def value(self, y: FirstStageDecision) -> float:
        return second_stage_value(y, self.scenario, self.instance)[1]


@dataclass(frozen=True)
class SolverConfig:
    theta: float = 1e-9
    max_iter: int = 5000
    pole_enumeration_limit: int = DEFAULT_POLE_LIMIT

    def __post_init__(self):
        if not self.theta > 0.0:
            raise ConfigurationError("theta must be positive")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be at least 1")


@dataclass
class SolveResult:
    y_star: FirstStageDecision
    v_star: SecondStageDecision
    upper: float
    lower: float
    iterations: int
    scenarios: list[Scenario]
    bound_trace: list[tuple[float, float]]
    converged: bool = True

    def to_json_dict(self) -> dict:
        return {
            "objective": _json_float(self.upper),
            "lower_bound": _json_float(self.lower),
            "converged": self.converged,
            "iterations": self.iterations,
            "first_stage": {
                "resolution_idx": list(self.y_star.resolution_idx),
                "rate_idx": list(self.y_star.rate_idx),
                "location": list(self.y_star.location),
            },
            "second_stage": {"model_idx": list(self.v_star.model_idx)},
            "scenarios": [{"g": list(s.g), "u": list(s.u)} for s in self.scenarios],
            "bound_trace": [[_json_float(lo), _json_float(up)] for lo, up in self.bound_trace],
        }


def _json_float(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def enumerate_poles(uset: UncertaintySet, limit: int = DEFAULT_POLE_LIMIT) -> list[Scenario]:
    """All vertices of {g in [0,1]^K : sum(g) <= gamma} for integer gamma,
    i.e. every binary g within budget, in lexicographic order of g."""
    if uset.size > limit:
        raise CapacityError(
            f"uncertainty dimension {uset.size} exceeds the exact enumeration limit {limit}"
        )
    poles = [
        Scenario.from_g(uset, g)
        for g in itertools.product((0, 1), repeat=uset.size)
        if sum(g) <= uset.gamma
    ]
    return poles


class _Tables:
    """Per-instance arrays the solver's hot paths index into.

    For each task: the option list (resolution, rate, location bit) in
    tie-break order, the first-stage transmit cost and stream rate per
    option, and the nominal second-stage cost per (option, model) with
    +inf at accuracy-infeasible or padded model slots.
    """

    def __init__(self, instance: RobustInstance):
        self.instance = instance
        space = instance.space
        profile = instance.profile
        self.options = space.first_stage_options()
        n_opt = len(self.options)
        k_max = max(len(space.models_for(loc)) for loc in LOCATIONS)
        self.k_max = k_max
        m = instance.n_tasks
        self.t1 = np.zeros((m, n_opt))
        self.bw = np.zeros((m, n_opt))
        self.loc_bit = np.array([o[2] for o in self.options], dtype=int)
        self.s2 = np.full((m, n_opt, k_max), np.inf)
        for i, task in enumerate(instance.tasks):
            for o, (n, z, bit) in enumerate(self.options):
                loc = Location.CLOUD if bit else Location.EDGE
                r = space.resolutions[n]
                p = space.frame_rates[z]
                self.t1[i, o] = instance.transmit_delay(i, n, z, loc)
                self.bw[i, o] = profile.frame_bits[r] * p
                models = space.models_for(loc)
                for k in range(len(models)):
                    acc = profile.accuracy_table[(r, p, models[k], loc)]
                    if acc >= task.accuracy_req:
                        self.s2[i, o, k] = instance.second_stage_nominal(i, n, z, k, loc)
        # factor cache per scenario id is avoided: factors are cheap products
        self.coupled = {
            (i, bit): instance.coupled_coords(i, Location.CLOUD if bit else Location.EDGE)
            for i in range(m)
            for bit in (0, 1)
        }

    def option_index(self, choice: tuple[int, int, int]) -> int:
        n, z, bit = choice
        return (n * self.instance.space.n_rates + z) * 2 + bit

    def inflation(self, i: int, bit: int, u: Sequence[float]) -> float:
        factor = 1.0
        baseline = self.instance.uset.baseline
        for k in self.coupled[(i, bit)]:
            factor = factor * (u[k] / baseline[k])
        return factor

    def recourse(self, i: int, choice: tuple[int, int, int], u: Sequence[float]) -> tuple[Optional[int], float]:
        """Cheapest accuracy-feasible model for task i at the given option
        under scenario u; lowest model index wins ties."""
        o = self.option_index(choice)
        row = self.s2[i, o] * self.inflation(i, choice[2], u)
        k = int(np.argmin(row))
        best = float(row[k])
        if math.isinf(best):
            return None, math.inf
        return k, best

    def q_matrix(self, scenario: Scenario) -> np.ndarray:
        """Per (task, option) minimum inflated second-stage cost."""
        m, n_opt, _ = self.s2.shape
        q = np.empty((m, n_opt))
        for i in range(m):
            factors = np.array([self.inflation(i, bit, scenario.u) for bit in (0, 1)])
            q[i] = np.min(self.s2[i], axis=1) * factors[self.loc_bit]
        return q


_tables_cache: "weakref.WeakKeyDictionary[RobustInstance, _Tables]" = weakref.WeakKeyDictionary()


def _tables(instance: RobustInstance) -> _Tables:
    tables = _tables_cache.get(instance)
    if tables is None:
        tables = _Tables(instance)
        _tables_cache[instance] = tables
    return tables


def second_stage_value(
    y: FirstStageDecision, scenario: Scenario, instance: RobustInstance
) -> tuple[SecondStageDecision, float]:
    """Exact recourse: per task, the cheapest model on the chosen tier that
    meets the accuracy requirement, costs inflated by the scenario. A task
    with no feasible model makes the value +inf (the infeasibility sentinel)."""
    tables = _tables(instance)
    models: list[Optional[int]] = []
    value = 0.0
    for i in range(instance.n_tasks):
        k, cost = tables.recourse(i, y.choice(i), scenario.u)
        models.append(k)
        value += cost
    return SecondStageDecision(tuple(models)), value


def worst_case_u(
    y: FirstStageDecision, instance: RobustInstance, limit: int = DEFAULT_POLE_LIMIT
) -> tuple[Scenario, float]:
    """Scan every pole for the scenario maximizing the recourse value.
    Ties break toward the lexicographically smallest g."""
    best_scenario: Optional[Scenario] = None
    best_value = -math.inf
    for scenario in enumerate_poles(instance.uset, limit):
        _, value = second_stage_value(y, scenario, instance)
        if value > best_value:
            best_scenario = scenario
            best_value = value
    assert best_scenario is not None
    return best_scenario, best_value


def dual_worst_case(y: FirstStageDecision, instance: RobustInstance) -> float:
    """Worst-case recourse value via the dual of the inner maximization.

    With per-entry coupling restricted to at most one coordinate, the inner
    problem is linear in g: value(g) = D + sum_k g_k c_k with c_k >= 0. The
    budgeted maximum then equals min over lambda >= 0 of
    gamma*lambda + sum_k max(0, c_k - lambda), evaluated at its breakpoints.
    Must agree with worst_case_u; kept as an independent verification path.
    """
    tables = _tables(instance)
    uset = instance.uset
    base = 0.0
    coefs = [0.0] * uset.size
    for i in range(instance.n_tasks):
        choice = y.choice(i)
        k, nominal = tables.recourse(i, choice, uset.baseline)
        if k is None:
            return math.inf
        coords = tables.coupled[(i, choice[2])]
        if len(coords) > 1:
            raise ConfigurationError(
                "dual evaluation requires each (task, location) entry to couple "
                "to at most one uncertainty coordinate"
            )
        base += nominal
        if coords:
            c = coords[0]
            coefs[c] += nominal * (uset.deviation[c] / uset.baseline[c])
    candidates = [0.0] + coefs
    dual_opt = min(
        uset.gamma * lam + sum(max(0.0, c - lam) for c in coefs) for lam in candidates
    )
    return base + dual_opt


def _compile_master(
    tables: _Tables,
    scenarios: Sequence[Scenario],
    forced_location: Optional[Location],
):
    """Per-task pruned option arrays plus suffix bounds for the DFS."""
    instance = tables.instance
    m = instance.n_tasks
    q_all = np.stack([tables.q_matrix(s) for s in scenarios], axis=2)  # (m, n_opt, S)
    kept: list[list[int]] = []
    for i in range(m):
        rows = []
        for o, (n, z, bit) in enumerate(tables.options):
            if forced_location is not None and bit != (1 if forced_location is Location.CLOUD else 0):
                continue
            if math.isinf(q_all[i, o, 0]):
                continue  # accuracy-infeasible regardless of scenario
            rows.append(o)
        # strict dominance: drop an option if another kept option is no worse on
        # transmit, stream rate, and every scenario's recourse cost (ties keep
        # the earlier option, preserving the lexicographic tie-break)
        pruned: list[int] = []
        for o in rows:
            dominated = False
            for o2 in rows:
                if o2 == o:
                    continue
                no_worse = (
                    tables.t1[i, o2] <= tables.t1[i, o]
                    and tables.bw[i, o2] <= tables.bw[i, o]
                    and np.all(q_all[i, o2] <= q_all[i, o])
                )
                strictly_better = no_worse and (
                    tables.t1[i, o2] < tables.t1[i, o]
                    or tables.bw[i, o2] < tables.bw[i, o]
                    or np.any(q_all[i, o2] < q_all[i, o])
                )
                fully_equal = (
                    tables.t1[i, o2] == tables.t1[i, o]
                    and tables.bw[i, o2] == tables.bw[i, o]
                    and np.all(q_all[i, o2] == q_all[i, o])
                )
                if strictly_better or (fully_equal and o2 < o):
                    dominated = True
                    break
            if not dominated:
                pruned.append(o)
        kept.append(pruned)
    return q_all, kept


def master_solve(
    scenarios: Sequence[Scenario],
    instance: RobustInstance,
    incumbent_bound: Optional[float] = None,
    forced_location: Optional[Location] = None,
) -> tuple[FirstStageDecision, float]:
    """Exact master problem over the supplied scenario set.

    Minimizes first-stage cost plus the max recourse value over the scenarios,
    subject to the bandwidth cap, by depth-first branch and bound with
    per-scenario suffix lower bounds. ``incumbent_bound`` may prune subtrees
    strictly above a known upper bound on the full problem; it never cuts the
    master optimum because the master value is a lower bound on it.
    """
    if len(scenarios) == 0:
        raise ConfigurationError("master problem needs at least one scenario")
    tables = _tables(instance)
    m = instance.n_tasks
    if m == 0:
        zero = FirstStageDecision((), (), ())
        return zero, 0.0
    n_s = len(scenarios)
    q_all, kept = _compile_master(tables, scenarios, forced_location)
    for i, rows in enumerate(kept):
        if not rows:
            where = f" on the {forced_location.value} tier" if forced_location else ""
            raise InfeasibleError(
                f"task {instance.tasks[i].id}: no configuration meets its accuracy requirement{where}"
            )

    # per-task, per-scenario optimistic completion costs and bandwidth minima
    m_task = np.empty((m, n_s))
    min_bw = np.empty(m)
    for i in range(m):
        rows = kept[i]
        combined = tables.t1[i, rows, None] + q_all[i, rows, :]
        m_task[i] = combined.min(axis=0)
        min_bw[i] = tables.bw[i, rows].min()
    suffix_q = np.zeros((m + 1, n_s))
    suffix_bw = np.zeros(m + 1)
    for i in range(m - 1, -1, -1):
        suffix_q[i] = suffix_q[i + 1] + m_task[i]
        suffix_bw[i] = suffix_bw[i + 1] + min_bw[i]

    cap = instance.profile.total_bandwidth_cap
    prune_at = math.inf if incumbent_bound is None else incumbent_bound
    # explore cheaper options first; final tie-breaks compare decision keys,
    # so the visit order only affects speed
    order = [
        sorted(kept[i], key=lambda o: (tables.t1[i, o] + q_all[i, o].mean(), o))
        for i in range(m)
    ]

    best_obj = math.inf
    best_path: Optional[list[int]] = None
    path = [0] * m

    def dfs(depth: int, t1_acc: float, bw_acc: float, q_acc: np.ndarray) -> None:
        nonlocal best_obj, best_path
        if depth == m:
            obj = t1_acc + float(q_acc.max())
            if obj < best_obj or (
                obj == best_obj
                and best_path is not None
                and _path_key(path) < _path_key(best_path)
            ):
                best_obj = obj
                best_path = path.copy()
            return
        for o in order[depth]:
            bw_next = bw_acc + tables.bw[depth, o]
            if bw_next + suffix_bw[depth + 1] > cap:
                continue
            t1_next = t1_acc + tables.t1[depth, o]
            q_next = q_acc + q_all[depth, o]
            bound = t1_next + float((q_next + suffix_q[depth + 1]).max())
            if bound > best_obj or bound > prune_at:
                continue
            path[depth] = o
            dfs(depth + 1, t1_next, bw_next, q_next)

    def _path_key(p: list[int]) -> tuple:
        return tuple(tables.options[o] for o in p)

    dfs(0, 0.0, 0.0, np.zeros(n_s))
    if best_path is None:
        raise InfeasibleError("no first-stage decision satisfies the bandwidth cap")
    y = FirstStageDecision.from_choices([tables.options[o] for o in best_path])
    return y, best_obj


def ccg_solve(
    instance: RobustInstance,
    config: SolverConfig = SolverConfig(),
    warm_start: Optional[FirstStageDecision] = None,
    forced_location: Optional[Location] = None,
) -> SolveResult:
    """Iterative bound tightening by scenario generation.

    Starting from the baseline scenario (or the worst case of a warm-start
    decision), alternate: solve the master over the current scenario set for
    a lower bound, evaluate the returned decision's true worst case for an
    upper bound, and add the identified scenario. Finite convergence in at
    most one iteration per pole; a reached iteration cap flags the result
    as non-converged instead of raising.
    """
    limit = config.pole_enumeration_limit
    if instance.uset.size > limit:
        raise CapacityError(
            f"uncertainty dimension {instance.uset.size} exceeds the pole limit {limit}"
        )
    upper = math.inf
    lower = -math.inf
    incumbent_y: Optional[FirstStageDecision] = None
    incumbent_v: Optional[SecondStageDecision] = None
    scenarios: list[Scenario]
    if warm_start is not None:
        if warm_start.n_tasks != instance.n_tasks:
            raise ConfigurationError("warm start does not cover the instance's task set")
        w_scenario, w_value = worst_case_u(warm_start, instance, limit)
        scenarios = [w_scenario]
        if instance.bandwidth_ok(warm_start) and math.isfinite(w_value):
            upper = instance.stage1_cost(warm_start) + w_value
            incumbent_y = warm_start
            incumbent_v = second_stage_value(warm_start, w_scenario, instance)[0]
    else:
        scenarios = [Scenario.baseline(instance.uset)]

    seen = {s.g for s in scenarios}
    trace: list[tuple[float, float]] = []
    converged = False
    iterations = 0
    for _ in range(config.max_iter):
        iterations += 1
        y, lower = master_solve(
            scenarios,
            instance,
            incumbent_bound=upper if math.isfinite(upper) else None,
            forced_location=forced_location,
        )
        star, value = worst_case_u(y, instance, limit)
        candidate = instance.stage1_cost(y) + value
        if candidate < upper or (
            candidate == upper and incumbent_y is not None and y.key() < incumbent_y.key()
        ):
            upper = min(upper, candidate)
            incumbent_y = y
            incumbent_v = second_stage_value(y, star, instance)[0]
        trace.append((lower, upper))
        if upper - lower <= config.theta:
            converged = True
            break
        if star.g in seen:
            # identical arithmetic on both sides makes this unreachable in
            # practice; stop rather than loop on a repeated scenario
            break
        scenarios.append(star)
        seen.add(star.g)

    assert incumbent_y is not None and incumbent_v is not None
    return SolveResult(
        y_star=incumbent_y,
        v_star=incumbent_v,
        upper=upper,
        lower=lower,
        iterations=iterations,
        scenarios=scenarios,
        bound_trace=trace,
        converged=converged,
    )
