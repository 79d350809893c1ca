"""Domain model for edge-cloud video inference routing.

Holds the configuration space, tabulated accuracy/delay/energy profiles,
first- and second-stage decision types, the budgeted uncertainty set, and
the cost evaluators the optimizer and the simulator both consult. Cost
convention: a task's cost is its end-to-end delay plus an energy term
weighted by ``beta``. Transmit delay depends only on the first-stage choice
(resolution, frame rate, location); compute delay and energy depend on the
second-stage model choice and are the part scaled by cost uncertainty.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .errors import ConfigurationError, InfeasibleError, InputError


class Location(str, Enum):
    """Execution tier for a task."""

    EDGE = "edge"
    CLOUD = "cloud"


LOCATIONS: tuple[Location, Location] = (Location.EDGE, Location.CLOUD)


def _as_location(value) -> Location:
    if isinstance(value, Location):
        return value
    try:
        return Location(str(value).lower())
    except ValueError:
        raise ConfigurationError(f"unknown location {value!r}") from None


@dataclass(frozen=True)
class TaskSpec:
    """One inference task: an accuracy requirement over a fixed-length segment."""

    id: int
    accuracy_req: float
    segment_frames: int = 30
    data_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.accuracy_req < 1.0:
            raise ConfigurationError(
                f"task {self.id}: accuracy_req must lie in (0,1), got {self.accuracy_req}"
            )
        if self.segment_frames < 1:
            raise ConfigurationError(f"task {self.id}: segment_frames must be >= 1")
        if not self.data_weight > 0.0:
            raise ConfigurationError(f"task {self.id}: data_weight must be positive")


@dataclass(frozen=True, eq=False)
class ConfigSpace:
    """Discrete decision axes: resolutions, frame rates, per-tier model lists."""

    resolutions: tuple[int, ...]
    frame_rates: tuple[float, ...]
    model_versions: Mapping[Location, tuple[str, ...]]

    def __post_init__(self):
        for name, axis in (("resolutions", self.resolutions), ("frame_rates", self.frame_rates)):
            if len(axis) == 0:
                raise ConfigurationError(f"{name} must be non-empty")
            if any(b <= a for a, b in zip(axis, axis[1:])):
                raise ConfigurationError(f"{name} must be strictly increasing, got {axis}")
        for loc in LOCATIONS:
            if loc not in self.model_versions or len(self.model_versions[loc]) == 0:
                raise ConfigurationError(f"model list for {loc.value} tier missing or empty")

    @property
    def n_resolutions(self) -> int:
        return len(self.resolutions)

    @property
    def n_rates(self) -> int:
        return len(self.frame_rates)

    @property
    def max_rate(self) -> float:
        return self.frame_rates[-1]

    def models_for(self, loc: Location) -> tuple[str, ...]:
        return self.model_versions[loc]

    def first_stage_options(self) -> list[tuple[int, int, int]]:
        """All (resolution_idx, rate_idx, location_bit) tuples in tie-break order."""
        return [
            (n, z, loc_bit)
            for n in range(self.n_resolutions)
            for z in range(self.n_rates)
            for loc_bit in (0, 1)
        ]

    def same_axes(self, other: "ConfigSpace") -> bool:
        return (
            self.resolutions == other.resolutions
            and self.frame_rates == other.frame_rates
            and all(self.model_versions[loc] == other.model_versions[loc] for loc in LOCATIONS)
        )


def _check_table_values(name: str, values: Iterable[float]) -> None:
    for v in values:
        if not math.isfinite(v) or v < 0.0:
            raise ConfigurationError(f"{name} entries must be finite and non-negative, got {v}")


@dataclass(frozen=True, eq=False)
class Profile:
    """Tabulated accuracy/delay/energy model the optimizer treats as ground truth.

    Units: accuracy is a fraction in [0,1]; compute delay is seconds per
    segment; frame_bits is bits per frame; bandwidth is bits per second;
    power is watts; total_bandwidth_cap is bits per second.
    """

    space: ConfigSpace
    accuracy_table: Mapping[tuple[int, float, str, Location], float]
    compute_delay_table: Mapping[tuple[int, str, Location], float]
    frame_bits: Mapping[int, float]
    bandwidth: Mapping[Location, float]
    power: Mapping[Location, float]
    total_bandwidth_cap: float

    def __post_init__(self):
        _check_table_values("accuracy_table", self.accuracy_table.values())
        if any(v > 1.0 for v in self.accuracy_table.values()):
            raise ConfigurationError("accuracy_table entries must not exceed 1")
        _check_table_values("compute_delay_table", self.compute_delay_table.values())
        _check_table_values("frame_bits", self.frame_bits.values())
        for loc in LOCATIONS:
            if self.bandwidth.get(loc, 0.0) <= 0.0:
                raise ConfigurationError(f"bandwidth[{loc.value}] must be positive")
            if self.power.get(loc, 0.0) <= 0.0:
                raise ConfigurationError(f"power[{loc.value}] must be positive")
        if not self.total_bandwidth_cap > 0.0:
            raise ConfigurationError("total_bandwidth_cap must be positive")
        self._check_monotonicity()

    def _check_monotonicity(self) -> None:
        """Accuracy must be non-decreasing along the resolution and model axes,
        compute delay non-decreasing along the model axis, over present entries."""
        space = self.space
        for loc in LOCATIONS:
            models = space.models_for(loc)
            for p in space.frame_rates:
                for m in models:
                    present = [
                        self.accuracy_table[(r, p, m, loc)]
                        for r in space.resolutions
                        if (r, p, m, loc) in self.accuracy_table
                    ]
                    if any(b < a - 1e-12 for a, b in zip(present, present[1:])):
                        raise ConfigurationError(
                            f"accuracy not monotone in resolution at rate={p}, model={m}, {loc.value}"
                        )
                for r in space.resolutions:
                    present = [
                        self.accuracy_table[(r, p, m, loc)]
                        for m in models
                        if (r, p, m, loc) in self.accuracy_table
                    ]
                    if any(b < a - 1e-12 for a, b in zip(present, present[1:])):
                        raise ConfigurationError(
                            f"accuracy not monotone in model at resolution={r}, rate={p}, {loc.value}"
                        )
            for r in space.resolutions:
                present = [
                    self.compute_delay_table[(r, m, loc)]
                    for m in models
                    if (r, m, loc) in self.compute_delay_table
                ]
                if any(b < a - 1e-12 for a, b in zip(present, present[1:])):
                    raise ConfigurationError(
                        f"compute delay not monotone in model at resolution={r}, {loc.value}"
                    )

    def with_bandwidth_scale(self, multiplier: float) -> "Profile":
        """Copy of this profile with all link bandwidths and the shared cap scaled."""
        if not multiplier > 0.0:
            raise ConfigurationError("bandwidth multiplier must be positive")
        return Profile(
            space=self.space,
            accuracy_table=self.accuracy_table,
            compute_delay_table=self.compute_delay_table,
            frame_bits=self.frame_bits,
            bandwidth={loc: bw * multiplier for loc, bw in self.bandwidth.items()},
            power=self.power,
            total_bandwidth_cap=self.total_bandwidth_cap * multiplier,
        )

    def to_json_dict(self) -> dict:
        space = self.space
        return {
            "resolutions": list(space.resolutions),
            "frame_rates": list(space.frame_rates),
            "models": {loc.value: list(space.models_for(loc)) for loc in LOCATIONS},
            "accuracy": [
                {
                    "resolution": r,
                    "frame_rate": p,
                    "model": m,
                    "location": loc.value,
                    "value": v,
                }
                for (r, p, m, loc), v in self.accuracy_table.items()
            ],
            "compute_delay": [
                {"resolution": r, "model": m, "location": loc.value, "seconds": v}
                for (r, m, loc), v in self.compute_delay_table.items()
            ],
            "frame_bits": {str(r): v for r, v in self.frame_bits.items()},
            "bandwidth": {loc.value: v for loc, v in self.bandwidth.items()},
            "power": {loc.value: v for loc, v in self.power.items()},
            "total_bandwidth_cap": self.total_bandwidth_cap,
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "Profile":
        try:
            space = ConfigSpace(
                resolutions=tuple(int(r) for r in doc["resolutions"]),
                frame_rates=tuple(float(p) for p in doc["frame_rates"]),
                model_versions={
                    Location.EDGE: tuple(doc["models"]["edge"]),
                    Location.CLOUD: tuple(doc["models"]["cloud"]),
                },
            )
            accuracy = {
                (int(e["resolution"]), float(e["frame_rate"]), str(e["model"]), _as_location(e["location"])): float(e["value"])
                for e in doc["accuracy"]
            }
            compute = {
                (int(e["resolution"]), str(e["model"]), _as_location(e["location"])): float(e["seconds"])
                for e in doc["compute_delay"]
            }
            return cls(
                space=space,
                accuracy_table=accuracy,
                compute_delay_table=compute,
                frame_bits={int(r): float(v) for r, v in doc["frame_bits"].items()},
                bandwidth={_as_location(k): float(v) for k, v in doc["bandwidth"].items()},
                power={_as_location(k): float(v) for k, v in doc["power"].items()},
                total_bandwidth_cap=float(doc["total_bandwidth_cap"]),
            )
        except KeyError as exc:
            raise InputError(f"profile document missing key {exc}") from None


def load_profile(path: str | Path) -> Profile:
    with open(path) as fh:
        return Profile.from_json_dict(json.load(fh))


@dataclass(frozen=True)
class FirstStageDecision:
    """Per-task one-hot selections made before uncertainty realizes:
    resolution index, frame-rate index, and location bit (0 edge, 1 cloud)."""

    resolution_idx: tuple[int, ...]
    rate_idx: tuple[int, ...]
    location: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.resolution_idx) == len(self.rate_idx) == len(self.location)):
            raise ConfigurationError("decision fields must have one entry per task")
        if any(bit not in (0, 1) for bit in self.location):
            raise ConfigurationError("location bits must be 0 or 1")

    @classmethod
    def from_choices(cls, choices: Sequence[tuple[int, int, int]]) -> "FirstStageDecision":
        return cls(
            resolution_idx=tuple(c[0] for c in choices),
            rate_idx=tuple(c[1] for c in choices),
            location=tuple(c[2] for c in choices),
        )

    @property
    def n_tasks(self) -> int:
        return len(self.location)

    def choice(self, i: int) -> tuple[int, int, int]:
        return (self.resolution_idx[i], self.rate_idx[i], self.location[i])

    def location_of(self, i: int) -> Location:
        return Location.CLOUD if self.location[i] else Location.EDGE

    def key(self) -> tuple[tuple[int, int, int], ...]:
        """Lexicographic tie-break key: per-task (resolution, rate, location)."""
        return tuple(self.choice(i) for i in range(self.n_tasks))

    def location_hamming(self, other: "FirstStageDecision") -> int:
        if other.n_tasks != self.n_tasks:
            raise ConfigurationError("decisions cover different task sets")
        return sum(a != b for a, b in zip(self.location, other.location))

    def with_locations(self, location: Sequence[int]) -> "FirstStageDecision":
        return FirstStageDecision(self.resolution_idx, self.rate_idx, tuple(location))


@dataclass(frozen=True)
class SecondStageDecision:
    """Per-task model index within the tier chosen by the first stage.
    ``None`` marks a task with no accuracy-feasible model."""

    model_idx: tuple[Optional[int], ...]

    @property
    def n_tasks(self) -> int:
        return len(self.model_idx)

    @property
    def feasible(self) -> bool:
        return all(k is not None for k in self.model_idx)


@dataclass(frozen=True)
class UncertaintySet:
    """Budgeted cost uncertainty: u_k = baseline_k + g_k * deviation_k with
    g in [0,1]^K and sum(g) <= gamma."""

    baseline: tuple[float, ...]
    deviation: tuple[float, ...]
    gamma: int

    def __post_init__(self):
        if len(self.baseline) != len(self.deviation):
            raise ConfigurationError("baseline and deviation must have equal length")
        if len(self.baseline) == 0:
            raise ConfigurationError("uncertainty set needs at least one coordinate")
        if any(b <= 0.0 for b in self.baseline):
            raise ConfigurationError("baseline entries must be positive")
        if any(d < 0.0 for d in self.deviation):
            raise ConfigurationError("deviation entries must be non-negative")
        if int(self.gamma) != self.gamma or not 0 <= self.gamma <= len(self.baseline):
            raise ConfigurationError(
                f"gamma must be an integer in [0, {len(self.baseline)}], got {self.gamma}"
            )

    @property
    def size(self) -> int:
        return len(self.baseline)

    def with_gamma(self, gamma: int) -> "UncertaintySet":
        return UncertaintySet(self.baseline, self.deviation, gamma)


@dataclass(frozen=True)
class CostBreakdown:
    """Per-task cost components for one fully specified decision."""

    transmit_delay: float
    compute_delay: float
    energy: float
    total_cost: float
    achieved_accuracy: float

    def validate(self, beta: float) -> None:
        expected = self.transmit_delay + self.compute_delay + beta * self.energy
        scale = max(abs(expected), 1.0)
        if abs(self.total_cost - expected) > 1e-12 * scale:
            raise ConfigurationError("total_cost does not decompose into delay + beta*energy")


def accuracy_of(task: TaskSpec, n: int, z: int, k: int, loc: Location, profile: Profile) -> float:
    """Exact accuracy-table lookup for (resolution n, rate z, model k, location)."""
    space = profile.space
    loc = _as_location(loc)
    models = space.models_for(loc)
    if not (0 <= n < space.n_resolutions and 0 <= z < space.n_rates and 0 <= k < len(models)):
        raise ConfigurationError(
            f"task {task.id}: index out of range for config space (n={n}, z={z}, k={k}, {loc.value})"
        )
    key = (space.resolutions[n], space.frame_rates[z], models[k], loc)
    try:
        return profile.accuracy_table[key]
    except KeyError:
        raise ConfigurationError(f"task {task.id}: no accuracy entry for {key}") from None


def delay_of(
    task: TaskSpec,
    n: int,
    z: int,
    k: int,
    loc: Location,
    effective_bandwidth: float,
    profile: Profile,
) -> tuple[float, float]:
    """(transmit, compute) delay in seconds for one task at one configuration.

    Transmit scales the per-frame payload by the selected frame rate relative
    to the fastest rate in the space; compute is a straight table lookup.
    """
    space = profile.space
    loc = _as_location(loc)
    if effective_bandwidth <= 0.0:
        raise InfeasibleError(f"task {task.id}: effective bandwidth must be positive")
    models = space.models_for(loc)
    if not (0 <= n < space.n_resolutions and 0 <= z < space.n_rates and 0 <= k < len(models)):
        raise ConfigurationError(
            f"task {task.id}: index out of range for config space (n={n}, z={z}, k={k}, {loc.value})"
        )
    r = space.resolutions[n]
    rate_scale = space.frame_rates[z] / space.max_rate
    transmit = task.segment_frames * task.data_weight * profile.frame_bits[r] * rate_scale / effective_bandwidth
    key = (r, models[k], loc)
    try:
        compute = profile.compute_delay_table[key]
    except KeyError:
        raise ConfigurationError(f"task {task.id}: no compute delay entry for {key}") from None
    return transmit, compute


def energy_of(compute_delay: float, loc: Location, profile: Profile) -> float:
    """Server-side energy in joules: tier power times compute time."""
    if compute_delay < 0.0:
        raise ConfigurationError("compute delay must be non-negative")
    return profile.power[_as_location(loc)] * compute_delay


def cost_of(delay: float, energy: float, beta: float) -> float:
    """Scalar cost: delay plus beta-weighted energy."""
    return delay + beta * energy


def bandwidth_feasible(decisions: FirstStageDecision, profile: Profile) -> bool:
    """Check the shared uplink budget: sum of per-task average stream rates
    (frame bits times frame rate) must not exceed the total cap."""
    space = profile.space
    total = 0.0
    for i in range(decisions.n_tasks):
        n, z, _ = decisions.choice(i)
        total += profile.frame_bits[space.resolutions[n]] * space.frame_rates[z]
    return total <= profile.total_bandwidth_cap


def default_coupling(n_tasks: int, n_coords: int) -> tuple[frozenset[tuple[int, Location]], ...]:
    """Round-robin coupling: coordinate k inflates every cost entry of tasks
    with index congruent to k, at both tiers."""
    if n_coords < 1:
        raise ConfigurationError("need at least one uncertainty coordinate")
    groups: list[set[tuple[int, Location]]] = [set() for _ in range(n_coords)]
    for i in range(n_tasks):
        for loc in LOCATIONS:
            groups[i % n_coords].add((i, loc))
    if any(len(g) == 0 for g in groups):
        raise ConfigurationError(
            f"default coupling needs at least {n_coords} tasks for {n_coords} coordinates"
        )
    return tuple(frozenset(g) for g in groups)


@dataclass(frozen=True, eq=False)
class RobustInstance:
    """A fully assembled two-stage robust problem.

    ``uncertainty_coupling[k]`` is the set of (task_index, location) pairs
    whose second-stage cost coordinate k inflates. Inflation is
    multiplicative: a coupled entry's compute cost scales by u_k / baseline_k,
    so the zero-budget scenario reproduces nominal costs exactly.
    """

    tasks: tuple[TaskSpec, ...]
    space: ConfigSpace
    profile: Profile
    beta: float
    uset: UncertaintySet
    uncertainty_coupling: tuple[frozenset[tuple[int, Location]], ...]

    def __post_init__(self):
        if self.beta < 0.0:
            raise ConfigurationError("beta must be non-negative")
        if len(self.uncertainty_coupling) != self.uset.size:
            raise ConfigurationError("one coupling set per uncertainty coordinate required")
        for k, group in enumerate(self.uncertainty_coupling):
            if len(group) == 0:
                raise ConfigurationError(f"uncertainty coordinate {k} couples to no cost entry")
            for i, loc in group:
                if not (0 <= i < len(self.tasks)) or not isinstance(loc, Location):
                    raise ConfigurationError(f"coupling entry ({i}, {loc}) out of range")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def first_stage_size(self) -> int:
        """Number of first-stage points per task."""
        return self.space.n_resolutions * self.space.n_rates * len(LOCATIONS)

    def second_stage_size(self, loc: Location) -> int:
        """Number of second-stage points (models) on one tier."""
        return len(self.space.models_for(loc))

    def coupled_coords(self, i: int, loc: Location) -> tuple[int, ...]:
        return tuple(
            k for k, group in enumerate(self.uncertainty_coupling) if (i, loc) in group
        )

    def inflation(self, i: int, loc: Location, u: Sequence[float]) -> float:
        """Multiplicative cost factor for task i on tier loc under scenario u."""
        factor = 1.0
        for k in self.coupled_coords(i, loc):
            factor = factor * (u[k] / self.uset.baseline[k])
        return factor

    def transmit_delay(self, i: int, n: int, z: int, loc: Location) -> float:
        task = self.tasks[i]
        transmit, _ = delay_of(task, n, z, 0, loc, self.profile.bandwidth[loc], self.profile)
        return transmit

    def stage1_cost(self, y: FirstStageDecision) -> float:
        """First-stage cost: sum of transmit delays, accumulated in task order."""
        total = 0.0
        for i in range(self.n_tasks):
            n, z, bit = y.choice(i)
            total += self.transmit_delay(i, n, z, Location.CLOUD if bit else Location.EDGE)
        return total

    def second_stage_nominal(self, i: int, n: int, z: int, k: int, loc: Location) -> float:
        """Nominal second-stage cost of one model choice: compute + beta*energy."""
        task = self.tasks[i]
        _, compute = delay_of(task, n, z, k, loc, self.profile.bandwidth[loc], self.profile)
        energy = self.profile.power[loc] * compute
        return compute + self.beta * energy

    def bandwidth_used(self, y: FirstStageDecision) -> float:
        space = self.space
        total = 0.0
        for i in range(self.n_tasks):
            n, z, _ = y.choice(i)
            total += self.profile.frame_bits[space.resolutions[n]] * space.frame_rates[z]
        return total

    def bandwidth_ok(self, y: FirstStageDecision) -> bool:
        return self.bandwidth_used(y) <= self.profile.total_bandwidth_cap


def build_robust_instance(
    tasks: Sequence[TaskSpec],
    space: ConfigSpace,
    profile: Profile,
    uset: UncertaintySet,
    beta: float,
    coupling: Optional[Sequence[Iterable[tuple[int, Location]]]] = None,
) -> RobustInstance:
    """Assemble and validate a RobustInstance.

    The profile must cover the full cross-product of the config space;
    missing table keys are reported explicitly. When ``coupling`` is omitted
    the round-robin default is used.
    """
    if space is not profile.space and not space.same_axes(profile.space):
        raise ConfigurationError("config space does not match the profile's axes")
    missing: list[str] = []
    for loc in LOCATIONS:
        for r in space.resolutions:
            for m in space.models_for(loc):
                if (r, m, loc) not in profile.compute_delay_table:
                    missing.append(f"compute_delay ({r}, {m}, {loc.value})")
                for p in space.frame_rates:
                    if (r, p, m, loc) not in profile.accuracy_table:
                        missing.append(f"accuracy ({r}, {p}, {m}, {loc.value})")
    for r in space.resolutions:
        if r not in profile.frame_bits:
            missing.append(f"frame_bits ({r})")
    if missing:
        shown = ", ".join(missing[:8])
        extra = f" and {len(missing) - 8} more" if len(missing) > 8 else ""
        raise ConfigurationError(f"profile does not cover the config space: {shown}{extra}")
    if coupling is None:
        coupling_sets = default_coupling(len(tasks), uset.size)
    else:
        coupling_sets = tuple(frozenset(group) for group in coupling)
    return RobustInstance(
        tasks=tuple(tasks),
        space=space,
        profile=profile,
        beta=float(beta),
        uset=uset,
        uncertainty_coupling=coupling_sets,
    )


def evaluate_decisions(
    instance: RobustInstance,
    y: FirstStageDecision,
    v: SecondStageDecision,
    u: Optional[Sequence[float]] = None,
) -> list[CostBreakdown]:
    """Per-task cost breakdowns for a complete (y, v) pair under scenario u.

    Cost inflation is interpreted as a compute-time multiplier, so energy
    (power times compute time) inflates consistently with delay.
    """
    if u is None:
        u = instance.uset.baseline
    if y.n_tasks != instance.n_tasks or v.n_tasks != instance.n_tasks:
        raise ConfigurationError("decision does not cover the instance's task set")
    if not v.feasible:
        raise InfeasibleError("second-stage decision has unassigned tasks")
    rows: list[CostBreakdown] = []
    for i, task in enumerate(instance.tasks):
        n, z, bit = y.choice(i)
        loc = Location.CLOUD if bit else Location.EDGE
        k = v.model_idx[i]
        transmit, compute = delay_of(task, n, z, k, loc, instance.profile.bandwidth[loc], instance.profile)
        compute = compute * instance.inflation(i, loc, u)
        energy = energy_of(compute, loc, instance.profile)
        accuracy = accuracy_of(task, n, z, k, loc, instance.profile)
        total = cost_of(transmit + compute, energy, instance.beta)
        rows.append(
            CostBreakdown(
                transmit_delay=transmit,
                compute_delay=compute,
                energy=energy,
                total_cost=total,
                achieved_accuracy=accuracy,
            )
        )
    return rows
