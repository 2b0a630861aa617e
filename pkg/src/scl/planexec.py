"""Plan construction from dependency graphs, classical baselines, quasi-static execution
and the success/completion/step metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .align import CorrespondenceMap, correspond
from .catalog import default_catalog
from .depgraph import DependencyGraph, contacts_below, is_dag, is_supported, threshold_graph, topo_levels
from .geometry import CONTACT_TOL, UP, ObjectClass, Pose, collide, quat_mul, symmetric_quat_distance, vertical_gap, yaw_quat
from .scenegen import Observation, Scene

POS_THRESHOLD = 0.01       # meters
ORN_THRESHOLD = 0.03       # normalized quaternion distance
SETTLE_WINDOW = 0.005      # largest drop a released object survives, meters
CIRCULAR = "circular dependency"


class InvalidPlanError(ValueError):
    """A plan selects an object that was already moved, or an unknown object."""


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanStep:
    object: int          # selection: index in the initial scene
    delta: Pose          # transform taking the initial pose to the target pose
    k: int               # hierarchy id
    target: int          # index of the matching target object

    def to_json(self) -> dict:
        return {"object": self.object, "target": self.target, "k": self.k,
                "t": [float(v) for v in self.delta.t], "q": [float(v) for v in self.delta.q]}


@dataclass(frozen=True)
class Plan:
    steps: tuple = ()
    failure: str | None = None
    graph: DependencyGraph | None = None

    def __post_init__(self):
        ks = [s.k for s in self.steps]
        if ks != sorted(ks):
            raise InvalidPlanError("plan steps must have non-decreasing hierarchy ids")
        objs = [s.object for s in self.steps]
        if len(set(objs)) != len(objs):
            raise InvalidPlanError("plan selects an object more than once")

    @property
    def ok(self) -> bool:
        return self.failure is None

    def __len__(self):
        return len(self.steps)

    def to_json(self) -> dict:
        out = {"steps": [s.to_json() for s in self.steps]}
        if self.failure:
            out["failure"] = self.failure
        if self.graph is not None:
            out["graph"] = self.graph.to_json()
        return out


@dataclass(frozen=True)
class GraphModel:
    """Trained encoder/decoder parameters with their configuration."""

    params: dict
    config: object

    def predict_graph(self, target_obs: Observation, cmap: CorrespondenceMap, tstar: float) -> DependencyGraph:
        from .graphnet import PositionalEncoder, node_features, predict

        encoder = PositionalEncoder(self.config.encoder)
        positions = [cmap.target_from_default[cmap.for_target(t)].t for t in range(len(target_obs))]
        rho = predict(node_features(target_obs, positions, encoder), self.params, self.config)
        return threshold_graph(rho, tstar)


def plan_from_graph(graph: DependencyGraph, cmap: CorrespondenceMap) -> Plan:
    if not is_dag(graph):
        return Plan((), CIRCULAR, graph)
    steps = []
    for t, k in topo_levels(graph):
        pair = cmap.for_target(t)
        steps.append(PlanStep(cmap.pairs[pair][0], cmap.deltas[pair], k, t))
    return Plan(tuple(steps), None, graph)


def scl_plan(initial_obs: Observation, target_obs: Observation, model: GraphModel | None = None,
             tstar: float = 0.5, graph: DependencyGraph | None = None,
             catalog: Sequence[ObjectClass] | None = None) -> Plan:
    """Correspond, predict the dependency graph, reject cycles and order by hierarchy.

    ``graph`` (over target indices) replaces the model prediction when given.
    """
    cmap = correspond(initial_obs, target_obs, catalog)
    if graph is None:
        if model is None:
            raise ValueError("either a model or a dependency graph is required")
        graph = model.predict_graph(target_obs, cmap, tstar)
    if graph.n != len(target_obs):
        raise ValueError(f"graph has {graph.n} nodes, target has {len(target_obs)} objects")
    return plan_from_graph(graph, cmap)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActuationNoise:
    """Gaussian placement error: translation per horizontal axis and yaw about the vertical."""

    sigma_pos: float = 0.0
    sigma_rot: float = 0.0

    def perturb(self, pose: Pose, rng: np.random.Generator) -> Pose:
        if self.sigma_pos == 0 and self.sigma_rot == 0:
            return pose
        dxy = rng.normal(0.0, self.sigma_pos, 2) if self.sigma_pos > 0 else np.zeros(2)
        yaw = rng.normal(0.0, self.sigma_rot) if self.sigma_rot > 0 else 0.0
        return Pose(pose.t + [dxy[0], dxy[1], 0.0], quat_mul(yaw_quat(yaw), pose.q))

    def to_json(self) -> dict:
        return {"sigma_pos": self.sigma_pos, "sigma_rot": self.sigma_rot}


@dataclass
class ExecutionResult:
    n: int
    achieved: dict = field(default_factory=dict)      # target index -> Pose
    pos_errors: dict = field(default_factory=dict)
    orn_errors: dict = field(default_factory=dict)
    steps: int = 0
    collapsed: list = field(default_factory=list)
    circular: bool = False
    budget_exhausted: bool = False
    trace: list = field(default_factory=list)         # (initial index, placed?) per step

    def within(self, t: int) -> bool:
        return (t in self.achieved and self.pos_errors[t] <= POS_THRESHOLD
                and self.orn_errors[t] <= ORN_THRESHOLD)

    @property
    def completion(self) -> float:
        return sum(self.within(t) for t in range(self.n)) / self.n if self.n else 1.0

    @property
    def success(self) -> bool:
        return not self.circular and self.n > 0 and all(self.within(t) for t in range(self.n))

    @property
    def step_ratio(self) -> float:
        return self.steps / self.n if self.n else 0.0

    def metrics(self) -> "MetricsReport":
        placed = [t for t in range(self.n) if t in self.achieved]
        pos = float(np.mean([self.pos_errors[t] for t in placed])) if placed else math.nan
        orn = float(np.mean([self.orn_errors[t] for t in placed])) if placed else math.nan
        return MetricsReport(self.success, self.completion, self.step_ratio, pos, orn)

    def to_json(self) -> dict:
        m = self.metrics()
        return {"n": self.n, "steps": self.steps, "success": m.success, "completion": m.completion,
                "step_ratio": m.step_ratio, "pos_error": _nan_none(m.pos_error),
                "orn_error": _nan_none(m.orn_error), "collapsed": sorted(self.collapsed),
                "circular": self.circular, "budget_exhausted": self.budget_exhausted}


def _nan_none(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


@dataclass(frozen=True)
class MetricsReport:
    success: bool
    completion: float
    step_ratio: float
    pos_error: float
    orn_error: float


class _Workspace:
    """Objects placed so far in the target area, with quasi-static placement."""

    def __init__(self, target: Scene, catalog, noise: ActuationNoise, seed: int):
        self.target = target
        self.catalog = catalog
        self.noise = noise
        self.rng = np.random.default_rng(seed)
        self.bodies: list = [None] * len(target)
        self.result = ExecutionResult(len(target))

    def _supported(self, t: int, body) -> bool:
        bodies = list(self.bodies)
        bodies[t] = body
        return is_supported(body, contacts_below(t, bodies, CONTACT_TOL))

    def _collides(self, body) -> bool:
        return any(b is not None and collide(body, b, CONTACT_TOL) for b in self.bodies)

    def feasible(self, t: int) -> bool:
        """Would the object stand at its exact target pose given what is placed now?"""
        cls = self.catalog[self.target.objects[t].class_id]
        body = (cls, self.target.objects[t].pose)
        return not self._collides(body) and self._supported(t, body)

    def _settle(self, cls, pose: Pose) -> Pose | None:
        gaps = [vertical_gap((cls, pose), None)]
        gaps += [vertical_gap((cls, pose), b) for b in self.bodies if b is not None]
        # a strongly negative gap is a neighbour beside the object, not under it
        drop = min(g for g in gaps if g >= -CONTACT_TOL) if max(gaps) >= -CONTACT_TOL else math.inf
        if not math.isfinite(drop) or drop > SETTLE_WINDOW:
            return None
        return Pose(pose.t - drop * UP, pose.q)

    def place(self, t: int, pose: Pose) -> bool:
        """Release an object at ``pose`` (plus actuation noise); False if it collapses."""
        cls = self.catalog[self.target.objects[t].class_id]
        pose = self._settle(cls, self.noise.perturb(pose, self.rng))
        r = self.result
        if pose is None or self._collides((cls, pose)) or not self._supported(t, (cls, pose)):
            r.collapsed.append(t)
            return False
        self.bodies[t] = (cls, pose)
        goal = self.target.objects[t].pose
        r.achieved[t] = pose
        r.pos_errors[t] = float(np.linalg.norm(pose.t - goal.t))
        r.orn_errors[t] = float(symmetric_quat_distance(cls, pose.q, goal.q))
        return True


def execute(plan: Plan, initial: Scene, target: Scene, noise: ActuationNoise = ActuationNoise(),
            seed: int = 0, catalog: Sequence[ObjectClass] | None = None) -> ExecutionResult:
    """Apply the plan step by step; every placement consumes one step.

    An object that cannot stand where it is released is removed (no cascade).
    """
    catalog = default_catalog() if catalog is None else catalog
    ws = _Workspace(target, catalog, noise, seed)
    if not plan.ok:
        ws.result.circular = plan.failure == CIRCULAR
        return ws.result
    moved = set()
    for step in plan.steps:
        if not 0 <= step.object < len(initial) or not 0 <= step.target < len(target):
            raise InvalidPlanError(f"step selects unknown object {step.object} -> {step.target}")
        if step.object in moved:
            raise InvalidPlanError(f"object {step.object} was already moved")
        moved.add(step.object)
        ws.result.steps += 1
        placed = ws.place(step.target, step.delta @ initial.objects[step.object].pose)
        ws.result.trace.append((step.object, placed))
    return ws.result


# ---------------------------------------------------------------------------
# classical baselines
# ---------------------------------------------------------------------------

def _pairing(initial: Scene, target: Scene, cmap: CorrespondenceMap | None) -> dict:
    """Initial index -> (target index, delta)."""
    if cmap is None:
        from .scenegen import ObservationModel, observe
        model = ObservationModel(views=None)
        cmap = correspond(observe(initial, model), observe(target, model))
    return {i: (t, d) for (i, t), d in zip(cmap.pairs, cmap.deltas)}


def _run_baseline(initial, target, choose, budget, noise, seed, catalog, cmap) -> ExecutionResult:
    catalog = default_catalog() if catalog is None else catalog
    pairing = _pairing(initial, target, cmap)
    ws = _Workspace(target, catalog, noise, seed)
    budget = 2 * len(target) if budget is None else budget
    remaining = sorted(pairing)
    pool = list(remaining)
    while remaining:
        if ws.result.steps >= budget:
            ws.result.budget_exhausted = True
            break
        if not pool:
            break   # nothing feasible is left
        i = choose(pool)
        t, delta = pairing[i]
        ws.result.steps += 1
        if ws.feasible(t):
            placed = ws.place(t, delta @ initial.objects[i].pose)
            ws.result.trace.append((i, placed))
            remaining.remove(i)
            pool = list(remaining)
        else:
            ws.result.trace.append((i, False))
            pool.remove(i)
    return ws.result


def classical_random(initial: Scene, target: Scene, budget: int | None = None, seed: int = 0,
                     noise: ActuationNoise = ActuationNoise(), catalog=None,
                     cmap: CorrespondenceMap | None = None) -> ExecutionResult:
    """Draw random unplaced objects; an infeasible draw leaves the pool until the next placement."""
    rng = np.random.default_rng(seed)
    return _run_baseline(initial, target, lambda pool: pool[int(rng.integers(len(pool)))],
                         budget, noise, seed + 1, catalog, cmap)


def classical_iterative(initial: Scene, target: Scene, budget: int | None = None, seed: int = 0,
                        noise: ActuationNoise = ActuationNoise(), catalog=None,
                        cmap: CorrespondenceMap | None = None) -> ExecutionResult:
    """Scan unplaced objects in index order, restarting from the lowest index after each placement."""
    return _run_baseline(initial, target, lambda pool: pool[0], budget, noise, seed + 1, catalog, cmap)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _mean_std(values) -> dict:
    values = [v for v in values if v is not None and not math.isnan(v)]
    if not values:
        return {"mean": None, "std": None}
    return {"mean": float(np.mean(values)), "std": float(np.std(values))}


def evaluate(results: Sequence[ExecutionResult]) -> dict:
    """Success rate and completion over all scenes; steps and errors over successful scenes only."""
    if not results:
        raise ValueError("evaluate needs at least one execution result")
    ok = [r for r in results if r.success]
    metrics = [r.metrics() for r in ok]
    return {
        "scenes": len(results),
        "successes": len(ok),
        "success_rate": len(ok) / len(results),
        "completion": _mean_std([r.completion for r in results]),
        "step_ratio": _mean_std([r.step_ratio for r in ok]),
        "pos_error": _mean_std([m.pos_error for m in metrics]),
        "orn_error": _mean_std([m.orn_error for m in metrics]),
        "circular_failures": sum(r.circular for r in results),
        "budget_exhausted": sum(r.budget_exhausted for r in results),
    }


COUNT_BUCKETS = (("8-10", 8, 10), ("11-15", 11, 15), ("16-20", 16, 20))


def count_bucket(n: int) -> str | None:
    for name, lo, hi in COUNT_BUCKETS:
        if lo <= n <= hi:
            return name
    return None


def bucketed(results: Sequence[ExecutionResult], keys: Sequence, order: Sequence) -> dict:
    """``evaluate`` per bucket, in the given bucket order; empty buckets map to ``None``."""
    out = {}
    for b in order:
        members = [r for r, k in zip(results, keys) if k == b]
        out[str(b)] = evaluate(members) if members else None
    return out
