"""Brute-force reference solver for acceptance testing.

Recomputes every cost directly from the profile tables and enumerates the
complete first-stage space, so it shares no evaluation code with the
scenario-generation solver. The min over model tuples decomposes into
per-task minima because costs contain no cross-task terms; that separability
is itself covered by a tuple-enumeration test against second_stage_value.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import CapacityError, InfeasibleError
from .model import (
    LOCATIONS,
    FirstStageDecision,
    Location,
    RobustInstance,
    SecondStageDecision,
)
from .solver import Scenario, SolveResult

GUARD = 10**8


def _pole_list(instance: RobustInstance) -> list[Scenario]:
    uset = instance.uset
    return [
        Scenario.from_g(uset, g)
        for g in itertools.product((0, 1), repeat=uset.size)
        if sum(g) <= uset.gamma
    ]


def brute_force_solve(instance: RobustInstance, pole_list=None) -> SolveResult:
    """Exhaustive min over y of max over poles of min over model tuples."""
    space = instance.space
    profile = instance.profile
    tasks = instance.tasks
    m = len(tasks)
    if pole_list is None:
        pole_list = _pole_list(instance)
    options = space.first_stage_options()
    n_opt = len(options)
    k_max = max(len(space.models_for(loc)) for loc in LOCATIONS)
    if (n_opt**m) * len(pole_list) * (k_max**m) > GUARD:
        raise CapacityError("instance exceeds the brute-force enumeration guard")

    n_poles = len(pole_list)
    # per-task tables recomputed from the raw profile
    t1 = np.zeros((m, n_opt))
    bw = np.zeros((m, n_opt))
    s2 = np.full((m, n_opt, n_poles), np.inf)  # min-over-models inflated cost
    argk = np.zeros((m, n_opt, n_poles), dtype=int)
    for i, task in enumerate(tasks):
        for o, (n, z, bit) in enumerate(options):
            loc = Location.CLOUD if bit else Location.EDGE
            r = space.resolutions[n]
            p = space.frame_rates[z]
            payload = task.segment_frames * task.data_weight * profile.frame_bits[r] * (p / space.max_rate)
            t1[i, o] = payload / profile.bandwidth[loc]
            bw[i, o] = profile.frame_bits[r] * p
            models = space.models_for(loc)
            costs = []
            for kk, model in enumerate(models):
                if profile.accuracy_table[(r, p, model, loc)] < task.accuracy_req:
                    costs.append(math.inf)
                    continue
                compute = profile.compute_delay_table[(r, model, loc)]
                energy = profile.power[loc] * compute
                costs.append(compute + instance.beta * energy)
            for pi, pole in enumerate(pole_list):
                factor = 1.0
                for c, group in enumerate(instance.uncertainty_coupling):
                    if (i, loc) in group:
                        factor = factor * (pole.u[c] / instance.uset.baseline[c])
                row = np.array([c * factor for c in costs])
                kk = int(np.argmin(row))
                s2[i, o, pi] = row[kk]
                argk[i, o, pi] = kk

    if m == 0:
        zero_y = FirstStageDecision((), (), ())
        zero_v = SecondStageDecision(())
        return SolveResult(zero_y, zero_v, 0.0, 0.0, 1, [pole_list[0]], [(0.0, 0.0)])

    idx = np.array(list(itertools.product(*[range(n_opt)] * m)), dtype=int)  # (Y, m)
    stage1 = np.zeros(len(idx))
    bw_sum = np.zeros(len(idx))
    s2_sum = np.zeros((len(idx), n_poles))
    for i in range(m):
        stage1 = stage1 + t1[i, idx[:, i]]
        bw_sum = bw_sum + bw[i, idx[:, i]]
        s2_sum = s2_sum + s2[i, idx[:, i], :]
    worst = s2_sum.max(axis=1)
    objective = stage1 + worst
    objective[bw_sum > profile.total_bandwidth_cap] = math.inf
    best = int(np.argmin(objective))  # first minimum = lexicographically smallest y
    best_obj = float(objective[best])
    if math.isinf(best_obj):
        raise InfeasibleError("no feasible first-stage decision exists")
    pole_star = int(np.argmax(s2_sum[best]))  # first maximum = smallest g
    choices = [options[idx[best, i]] for i in range(m)]
    y = FirstStageDecision.from_choices(choices)
    v = SecondStageDecision(tuple(int(argk[i, idx[best, i], pole_star]) for i in range(m)))
    return SolveResult(
        y_star=y,
        v_star=v,
        upper=best_obj,
        lower=best_obj,
        iterations=1,
        scenarios=[pole_list[pole_star]],
        bound_trace=[(best_obj, best_obj)],
        converged=True,
    )


def brute_force_nominal(instance: RobustInstance) -> SolveResult:
    """Zero-budget specialization: the only pole is the baseline scenario."""
    return brute_force_solve(instance, [Scenario.baseline(instance.uset)])
