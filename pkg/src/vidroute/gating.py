"""Temporal gating over frame-difference features.

A small gated recurrent cell watches per-frame motion features and emits a
significance score in (0,1) that steers the warm-start configuration and the
edge/cloud switching filter. The gate pre-activation carries a volatility
term (mean per-dimension variance over a recent feature window) so bursty
motion opens the gate more aggressively. Training is plain gradient descent
with hand-derived reverse-mode gradients; the network is far too small to
justify an autodiff dependency.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, InfeasibleError, InputError
from .model import (
    ConfigSpace,
    FirstStageDecision,
    Location,
    Profile,
    TaskSpec,
    accuracy_of,
)
from .seeds import stream

MAX_PIXEL = 255.0


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def motion_feature(frame_t: np.ndarray, frame_prev: np.ndarray, d: int = 16) -> np.ndarray:
    """Motion feature of one frame pair.

    Pipeline: per-pixel absolute difference, 4x mean-pooling (edge-padded to
    a multiple of 4), then a magnitude-weighted histogram over [0, 255] with
    d/2 bins concatenated with d/2 block-mean magnitudes. Identical frames
    map to the zero vector. Callers smooth consecutive features with
    ``smooth_features``.
    """
    if d < 2 or d % 2 != 0:
        raise InputError(f"feature dimension must be an even integer >= 2, got {d}")
    a = np.asarray(frame_t, dtype=float)
    b = np.asarray(frame_prev, dtype=float)
    if a.shape != b.shape:
        raise InputError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or a.size == 0:
        raise InputError("frames must be non-empty 2-D grayscale arrays")
    diff = np.abs(a - b)
    pad_h = (-diff.shape[0]) % 4
    pad_w = (-diff.shape[1]) % 4
    if pad_h or pad_w:
        diff = np.pad(diff, ((0, pad_h), (0, pad_w)), mode="edge")
    pooled = diff.reshape(diff.shape[0] // 4, 4, diff.shape[1] // 4, 4).mean(axis=(1, 3))

    bins = d // 2
    flat = pooled.ravel()
    idx = np.minimum((flat * bins / MAX_PIXEL).astype(int), bins - 1)
    hist = np.bincount(idx, weights=flat, minlength=bins) / flat.size
    chunks = np.array_split(flat, bins)
    block_means = np.array([c.mean() if c.size else 0.0 for c in chunks])
    return np.concatenate([hist, block_means])


def smooth_features(history: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of the most recent (up to 3) motion features."""
    if len(history) == 0:
        raise InputError("feature history is empty")
    window = list(history)[-3:]
    return np.mean(np.stack(window), axis=0)


def volatility(window: Sequence[np.ndarray]) -> float:
    """Mean over dimensions of the per-dimension population variance across
    the window. Returns 0 during cold start (fewer than 2 features)."""
    if len(window) < 2:
        return 0.0
    arr = np.stack(list(window))
    return float(arr.var(axis=0).mean())


@dataclass
class GatingParams:
    """Weights of the gating cell plus the output head.

    Matrix shapes: w_* are (hidden, feature), u_* are (hidden, hidden),
    b_* are (hidden,), w_out is (hidden,). ``volatility_weight`` scales the
    variance term added uniformly to the gate pre-activation.
    """

    w_gate: np.ndarray
    u_gate: np.ndarray
    b_gate: np.ndarray
    w_reset: np.ndarray
    u_reset: np.ndarray
    b_reset: np.ndarray
    w_cand: np.ndarray
    u_cand: np.ndarray
    b_cand: np.ndarray
    w_out: np.ndarray
    b_out: float
    volatility_weight: float
    variance_window: int

    def __post_init__(self):
        m, d = self.w_gate.shape
        expect = {
            "w_gate": (m, d),
            "u_gate": (m, m),
            "b_gate": (m,),
            "w_reset": (m, d),
            "u_reset": (m, m),
            "b_reset": (m,),
            "w_cand": (m, d),
            "u_cand": (m, m),
            "b_cand": (m,),
            "w_out": (m,),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ConfigurationError(f"{name} must have shape {shape}")
        if self.volatility_weight < 0.0:
            raise ConfigurationError("volatility_weight must be non-negative")
        if self.variance_window < 2:
            raise ConfigurationError("variance_window must be at least 2")

    @property
    def hidden_dim(self) -> int:
        return self.w_gate.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w_gate.shape[1]

    ARRAY_FIELDS = (
        "w_gate", "u_gate", "b_gate",
        "w_reset", "u_reset", "b_reset",
        "w_cand", "u_cand", "b_cand",
        "w_out",
    )
    SCALAR_FIELDS = ("b_out", "volatility_weight")

    def clone(self) -> "GatingParams":
        kwargs = {name: getattr(self, name).copy() for name in self.ARRAY_FIELDS}
        kwargs.update(
            b_out=self.b_out,
            volatility_weight=self.volatility_weight,
            variance_window=self.variance_window,
        )
        return GatingParams(**kwargs)

    def step_towards(self, grads: Mapping[str, np.ndarray | float], step: float) -> "GatingParams":
        """One descent step; the volatility weight is projected back to >= 0."""
        kwargs = {
            name: getattr(self, name) - step * grads[name] for name in self.ARRAY_FIELDS
        }
        kwargs.update(
            b_out=self.b_out - step * grads["b_out"],
            volatility_weight=max(0.0, self.volatility_weight - step * grads["volatility_weight"]),
            variance_window=self.variance_window,
        )
        return GatingParams(**kwargs)

    def sq_distance(self, other: "GatingParams") -> float:
        total = 0.0
        for name in self.ARRAY_FIELDS:
            delta = getattr(self, name) - getattr(other, name)
            total += float((delta * delta).sum())
        total += (self.b_out - other.b_out) ** 2
        total += (self.volatility_weight - other.volatility_weight) ** 2
        return total

    def to_json_dict(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "feature_dim": self.feature_dim,
            "variance_window": self.variance_window,
            "volatility_weight": self.volatility_weight,
            "b_out": self.b_out,
            "matrices": {name: getattr(self, name).tolist() for name in self.ARRAY_FIELDS},
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "GatingParams":
        try:
            mats = {name: np.array(doc["matrices"][name], dtype=float) for name in cls.ARRAY_FIELDS}
            return cls(
                **mats,
                b_out=float(doc["b_out"]),
                volatility_weight=float(doc["volatility_weight"]),
                variance_window=int(doc["variance_window"]),
            )
        except KeyError as exc:
            raise InputError(f"gating parameter document missing key {exc}") from None


def default_gating_params(
    seed: int,
    feature_dim: int = 16,
    hidden_dim: int = 8,
    variance_window: int = 8,
    volatility_weight: float = 1.0,
) -> GatingParams:
    """Seeded random initialization with recurrent matrices scaled to spectral
    norm below 0.9 so the zero-motion hidden state contracts."""
    rng = stream(seed, "params")

    def w():
        return rng.normal(0.0, 0.4 / math.sqrt(feature_dim), (hidden_dim, feature_dim))

    def u():
        mat = rng.normal(0.0, 0.4 / math.sqrt(hidden_dim), (hidden_dim, hidden_dim))
        top = np.linalg.svd(mat, compute_uv=False)[0]
        if top > 0.85:
            mat = mat * (0.85 / top)
        return mat

    return GatingParams(
        w_gate=w(), u_gate=u(), b_gate=np.zeros(hidden_dim),
        w_reset=w(), u_reset=u(), b_reset=np.zeros(hidden_dim),
        w_cand=w(), u_cand=u(), b_cand=np.zeros(hidden_dim),
        w_out=rng.normal(0.0, 0.5, hidden_dim),
        b_out=0.0,
        volatility_weight=volatility_weight,
        variance_window=variance_window,
    )


def save_params(params: GatingParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params.to_json_dict(), indent=2))


def load_params(path: str | Path) -> GatingParams:
    with open(path) as fh:
        return GatingParams.from_json_dict(json.load(fh))


@dataclass
class GateState:
    """Stream-local recurrent state: hidden vector, recent feature window,
    last significance score, and the previous routing decision."""

    hidden: np.ndarray
    feature_window: deque
    last_score: float = 0.5
    last_decision: Optional[FirstStageDecision] = None

    @classmethod
    def initial(cls, params: GatingParams) -> "GateState":
        return cls(
            hidden=np.zeros(params.hidden_dim),
            feature_window=deque(maxlen=params.variance_window),
        )


def gate_step(
    params: GatingParams, state: GateState, feature: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """One recurrence step. Returns (gate, hidden, score) and updates the
    state in place. Gate coordinates lie in (0,1), hidden in (-1,1)."""
    x = np.asarray(feature, dtype=float)
    if x.shape != (params.feature_dim,):
        raise ConfigurationError(
            f"feature has shape {x.shape}, expected ({params.feature_dim},)"
        )
    state.feature_window.append(x)
    vol = volatility(state.feature_window)
    h_prev = state.hidden
    r = _sigmoid(params.w_reset @ x + params.u_reset @ h_prev + params.b_reset)
    g = _sigmoid(
        params.w_gate @ x + params.u_gate @ h_prev + params.b_gate
        + params.volatility_weight * vol
    )
    cand = np.tanh(params.w_cand @ x + params.u_cand @ (r * h_prev) + params.b_cand)
    h = (1.0 - g) * h_prev + g * cand
    score = float(_sigmoid(params.w_out @ h + params.b_out))
    state.hidden = h
    state.last_score = score
    return g, h, score


@dataclass
class VideoSegment:
    """A burst of consecutive frames, either raw grayscale matrices or
    precomputed per-frame motion features."""

    frames: Optional[list[np.ndarray]] = None
    motion: Optional[list[np.ndarray]] = None
    frame_interval: float = 1.0 / 30.0

    def __post_init__(self):
        if (self.frames is None) == (self.motion is None):
            raise InputError("provide exactly one of frames or motion")
        if self.frames is not None and len(self.frames) < 2:
            raise InputError("a raw segment needs at least 2 frames")
        if self.motion is not None and len(self.motion) == 0:
            raise InputError("a precomputed segment needs at least 1 feature")

    def motion_features(self, d: int = 16) -> list[np.ndarray]:
        """Raw (unsmoothed) per-step motion features."""
        if self.motion is not None:
            return [np.asarray(f, dtype=float) for f in self.motion]
        return [
            motion_feature(self.frames[i], self.frames[i - 1], d)
            for i in range(1, len(self.frames))
        ]


def warm_start_config(
    tasks: Sequence[TaskSpec],
    tau: float,
    space: ConfigSpace,
    profile: Profile,
) -> FirstStageDecision:
    """Smallest-model feasibility scan producing the warm-start decision.

    Per task: scan resolutions on the edge tier at the lowest frame rate
    with the tier's smallest model, offload to the cloud tier and rescan if
    nothing qualifies. The significance score biases where the scan starts
    (a probe-order optimization); the selected resolution is always walked
    back to the cheapest feasible one, so ties resolve toward lower cost.
    """
    choices = []
    for task in tasks:
        n = _scan_tier(task, Location.EDGE, tau, space, profile)
        if n is not None:
            choices.append((n, 0, 0))
            continue
        n = _scan_tier(task, Location.CLOUD, tau, space, profile)
        if n is not None:
            choices.append((n, 0, 1))
            continue
        raise InfeasibleError(
            f"task {task.id}: no resolution meets accuracy {task.accuracy_req} "
            "with the smallest model on either tier"
        )
    return FirstStageDecision.from_choices(choices)


def _scan_tier(
    task: TaskSpec, loc: Location, tau: float, space: ConfigSpace, profile: Profile
) -> Optional[int]:
    def feasible(n: int) -> bool:
        return accuracy_of(task, n, 0, 0, loc, profile) >= task.accuracy_req

    n_res = space.n_resolutions
    start = min(n_res - 1, max(0, int(tau * (n_res - 1))))
    found = None
    for n in range(start, n_res):
        if feasible(n):
            found = n
            break
    if found is None and start > 0:
        # the biased start overshot every feasible entry; fall back to a full scan
        for n in range(0, start):
            if feasible(n):
                found = n
                break
    if found is None:
        return None
    while found > 0 and feasible(found - 1):
        found -= 1
    return found


def consistency_filter(
    y_t: FirstStageDecision,
    y_prev: FirstStageDecision,
    tau_t: float,
    tau_prev: float,
    delta_max: float,
    switch_costs: Optional[Mapping[int, float]] = None,
) -> FirstStageDecision:
    """Cap edge/cloud flips between consecutive decisions.

    The flip budget is ceil(delta_max * |tau_t - tau_prev|). Excess switches
    revert to the previous location, cheapest impact first (``switch_costs``
    maps task index to the |cost delta| of its switch; missing entries count
    as zero), ties by ascending task index. Resolution and frame-rate fields
    pass through untouched.
    """
    if y_t.n_tasks != y_prev.n_tasks:
        raise ConfigurationError("decisions cover different task sets")
    if delta_max < 0.0:
        raise ConfigurationError("delta_max must be non-negative")
    budget = math.ceil(delta_max * abs(tau_t - tau_prev))
    flips = [i for i in range(y_t.n_tasks) if y_t.location[i] != y_prev.location[i]]
    if len(flips) <= budget:
        return y_t
    impact = switch_costs or {}
    ordered = sorted(flips, key=lambda i: (impact.get(i, 0.0), i))
    locations = list(y_t.location)
    for i in ordered[: len(flips) - budget]:
        locations[i] = y_prev.location[i]
    return y_t.with_locations(locations)


@dataclass
class TrainingEpisode:
    """Supervision for the gating cell over one feature sequence.

    ``labels`` is the simulator oracle's verdict per step (1 when cloud
    assistance was needed); the latency arrays are normalized transmit
    delays of the edge- and cloud-routed configurations.
    """

    features: np.ndarray
    labels: np.ndarray
    edge_latency: Optional[np.ndarray] = None
    cloud_latency: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.features.ndim != 2 or len(self.features) == 0:
            raise InputError("features must be a non-empty (steps, dim) array")
        if self.labels.shape != (len(self.features),):
            raise InputError("labels must hold one value per step")
        if np.any((self.labels != 0.0) & (self.labels != 1.0)):
            raise InputError("labels must be 0 or 1")
        if self.edge_latency is None:
            self.edge_latency = np.zeros(len(self.features))
        if self.cloud_latency is None:
            self.cloud_latency = np.ones(len(self.features))
        self.edge_latency = np.asarray(self.edge_latency, dtype=float)
        self.cloud_latency = np.asarray(self.cloud_latency, dtype=float)

    @property
    def steps(self) -> int:
        return len(self.features)


def _forward_rollout(params: GatingParams, features: np.ndarray):
    """Run the cell over a feature sequence, caching per-step intermediates."""
    state = GateState.initial(params)
    caches = []
    for x in features:
        state.feature_window.append(x)
        vol = volatility(state.feature_window)
        h_prev = state.hidden
        r = _sigmoid(params.w_reset @ x + params.u_reset @ h_prev + params.b_reset)
        g = _sigmoid(
            params.w_gate @ x + params.u_gate @ h_prev + params.b_gate
            + params.volatility_weight * vol
        )
        rh = r * h_prev
        cand = np.tanh(params.w_cand @ x + params.u_cand @ rh + params.b_cand)
        h = (1.0 - g) * h_prev + g * cand
        logit = float(params.w_out @ h + params.b_out)
        tau = float(_sigmoid(logit))
        caches.append(
            {"x": x, "h_prev": h_prev, "r": r, "g": g, "rh": rh, "cand": cand,
             "h": h, "tau": tau, "vol": vol}
        )
        state.hidden = h
    return caches


def _zero_grads(params: GatingParams) -> dict:
    grads = {name: np.zeros_like(getattr(params, name)) for name in params.ARRAY_FIELDS}
    grads["b_out"] = 0.0
    grads["volatility_weight"] = 0.0
    return grads


def composite_loss(
    params: GatingParams,
    episodes: Sequence[TrainingEpisode],
    lam1: float,
    lam2: float,
) -> float:
    """Mean per-step loss: cross-entropy of the score against the oracle
    label, plus lam1 times the expected normalized transmit delay of the
    score-routed configuration, plus lam2 times the score itself."""
    if len(episodes) == 0:
        raise InputError("no training episodes supplied")
    total = 0.0
    steps = 0
    for ep in episodes:
        caches = _forward_rollout(params, ep.features)
        for t, cache in enumerate(caches):
            tau = cache["tau"]
            y = ep.labels[t]
            bce = -(y * math.log(tau) + (1.0 - y) * math.log(1.0 - tau))
            lat = tau * ep.cloud_latency[t] + (1.0 - tau) * ep.edge_latency[t]
            total += bce + lam1 * lat + lam2 * tau
        steps += ep.steps
    return total / steps


def composite_gradients(
    params: GatingParams,
    episodes: Sequence[TrainingEpisode],
    lam1: float,
    lam2: float,
    horizon: int = 8,
) -> tuple[float, dict]:
    """Loss and hand-derived reverse-mode gradients.

    Backpropagation through time is truncated in chunks of ``horizon``
    steps: the hidden state flows forward across chunk boundaries but
    gradients do not.
    """
    if len(episodes) == 0:
        raise InputError("no training episodes supplied")
    grads = _zero_grads(params)
    total = 0.0
    steps = sum(ep.steps for ep in episodes)
    inv = 1.0 / steps
    for ep in episodes:
        caches = _forward_rollout(params, ep.features)
        for t, cache in enumerate(caches):
            tau = cache["tau"]
            y = ep.labels[t]
            total += -(y * math.log(tau) + (1.0 - y) * math.log(1.0 - tau))
            total += lam1 * (tau * ep.cloud_latency[t] + (1.0 - tau) * ep.edge_latency[t])
            total += lam2 * tau
        # backward in horizon-sized chunks
        n = len(caches)
        chunk_starts = list(range(0, n, horizon))
        for start in reversed(chunk_starts):
            end = min(start + horizon, n)
            dh_next = np.zeros(params.hidden_dim)
            for t in range(end - 1, start - 1, -1):
                c = caches[t]
                tau = c["tau"]
                dlogit = (tau - ep.labels[t]) + (
                    lam1 * (ep.cloud_latency[t] - ep.edge_latency[t]) + lam2
                ) * tau * (1.0 - tau)
                dlogit *= inv
                grads["w_out"] += dlogit * c["h"]
                grads["b_out"] += dlogit
                dh = dh_next + dlogit * params.w_out
                dg = dh * (c["cand"] - c["h_prev"])
                dcand = dh * c["g"]
                dh_prev = dh * (1.0 - c["g"])
                da_c = dcand * (1.0 - c["cand"] ** 2)
                grads["w_cand"] += np.outer(da_c, c["x"])
                grads["u_cand"] += np.outer(da_c, c["rh"])
                grads["b_cand"] += da_c
                d_rh = params.u_cand.T @ da_c
                dr = d_rh * c["h_prev"]
                dh_prev += d_rh * c["r"]
                da_r = dr * c["r"] * (1.0 - c["r"])
                grads["w_reset"] += np.outer(da_r, c["x"])
                grads["u_reset"] += np.outer(da_r, c["h_prev"])
                grads["b_reset"] += da_r
                dh_prev += params.u_reset.T @ da_r
                da_g = dg * c["g"] * (1.0 - c["g"])
                grads["w_gate"] += np.outer(da_g, c["x"])
                grads["u_gate"] += np.outer(da_g, c["h_prev"])
                grads["b_gate"] += da_g
                grads["volatility_weight"] += float(da_g.sum()) * c["vol"]
                dh_prev += params.u_gate.T @ da_g
                dh_next = dh_prev
    return total / steps, grads


def _descend(params, episodes, lam1, lam2, lr, steps, extra=None, horizon=8):
    """Gradient descent with backtracking; the loss never increases.

    ``extra`` optionally adds a proximal term: (mu, anchor params).
    """
    current = params

    def full_loss(p):
        loss = composite_loss(p, episodes, lam1, lam2)
        if extra is not None:
            mu, anchor = extra
            loss += mu * p.sq_distance(anchor)
        return loss

    loss = full_loss(current)
    for _ in range(steps):
        base_loss, grads = composite_gradients(current, episodes, lam1, lam2, horizon)
        if extra is not None:
            mu, anchor = extra
            for name in current.ARRAY_FIELDS:
                grads[name] = grads[name] + 2.0 * mu * (getattr(current, name) - getattr(anchor, name))
            grads["b_out"] += 2.0 * mu * (current.b_out - anchor.b_out)
            grads["volatility_weight"] += 2.0 * mu * (
                current.volatility_weight - anchor.volatility_weight
            )
        step = lr
        accepted = False
        for _ in range(50):
            trial = current.step_towards(grads, step)
            trial_loss = full_loss(trial)
            if trial_loss <= loss:
                current = trial
                loss = trial_loss
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    return current


def train_gating(
    params: GatingParams,
    training_episodes: Sequence[TrainingEpisode],
    lam1: float,
    lam2: float,
    lr: float,
    steps: int,
    proximal_mu: float,
    horizon: int = 8,
) -> GatingParams:
    """Two-stage curriculum on a private parameter copy.

    Stage A minimizes the composite loss on the leading episodes; stage B
    continues on the held-out tail (the last quarter, at least one episode)
    with a proximal pull toward the stage-A parameters. With a single
    episode both stages see the same data.
    """
    if len(training_episodes) == 0:
        raise InputError("no training episodes supplied")
    if len(training_episodes) >= 2:
        n_hold = max(1, len(training_episodes) // 4)
        train_eps = list(training_episodes[:-n_hold])
        hold_eps = list(training_episodes[-n_hold:])
    else:
        train_eps = list(training_episodes)
        hold_eps = list(training_episodes)
    stage_a = _descend(params.clone(), train_eps, lam1, lam2, lr, steps, horizon=horizon)
    stage_b = _descend(
        stage_a.clone(), hold_eps, lam1, lam2, lr, steps,
        extra=(proximal_mu, stage_a), horizon=horizon,
    )
    return stage_b


def load_trace_features(path: str | Path, d: int = 16) -> list[np.ndarray]:
    """Read a JSON-lines trace (one object per frame holding either raw
    ``pixels`` with width/height or a precomputed ``motion`` vector) and
    return the raw per-step motion features."""
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: line {line_no} is not valid JSON: {exc}") from None
    if not records:
        raise InputError(f"{path}: empty trace")
    if "motion" in records[0]:
        return [np.asarray(rec["motion"], dtype=float) for rec in records]
    frames = []
    for rec in records:
        try:
            frame = np.asarray(rec["pixels"], dtype=float).reshape(rec["height"], rec["width"])
        except (KeyError, ValueError) as exc:
            raise InputError(f"{path}: bad frame record: {exc}") from None
        frames.append(frame)
    if len(frames) < 2:
        raise InputError(f"{path}: need at least 2 frames to form motion features")
    return [motion_feature(frames[i], frames[i - 1], d) for i in range(1, len(frames))]
