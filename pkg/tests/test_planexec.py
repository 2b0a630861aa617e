import math

import numpy as np
import pytest

from scl.depgraph import DependencyGraph, oracle_graph
from scl.geometry import Pose
from scl.planexec import (
    CIRCULAR,
    ORN_THRESHOLD,
    POS_THRESHOLD,
    ActuationNoise,
    ExecutionResult,
    InvalidPlanError,
    Plan,
    PlanStep,
    bucketed,
    classical_iterative,
    classical_random,
    count_bucket,
    evaluate,
    execute,
    scl_plan,
)
from scl.scenegen import GenSpec, ObservationModel, Scene, SceneObject, make_entry, observe

FULL = ObservationModel(views=None)


def _scene(catalog, items):
    """items: (class id, xy, z of the resting surface)"""
    objs = []
    for k, (cid, xy, z) in enumerate(items):
        cls = catalog[cid]
        objs.append(SceneObject(k, cid, cls.resting_pose(cls.stable_orientations[0], xy, z), 0))
    return Scene(tuple(objs))


def _plan(initial, target, catalog, graph=None):
    graph = oracle_graph(target, catalog) if graph is None else graph
    return scl_plan(observe(initial, FULL, 0, catalog), observe(target, FULL, 1, catalog), graph=graph,
                    catalog=catalog)


@pytest.fixture(scope="module")
def tower(catalog):
    """Target indices: 0 top cylinder, 1 middle cube, 2 bottom slab."""
    target = _scene(catalog, [(4, (0.0, 0.0), 0.05), (1, (0.0, 0.0), 0.02), (3, (0.0, 0.0), 0.0)])
    initial = _scene(catalog, [(3, (0.2, 0.0), 0.0), (1, (0.3, 0.0), 0.0), (4, (0.4, 0.0), 0.0)])
    return initial, target


@pytest.fixture(scope="module")
def flat(catalog):
    target = _scene(catalog, [(1, (0.1 * k, 0.0), 0.0) for k in range(5)])
    initial = _scene(catalog, [(1, (0.1 * k, 0.3), 0.0) for k in range(5)])
    return initial, target


# ---- planning --------------------------------------------------------------

def test_single_object_plan(catalog):
    target = _scene(catalog, [(1, (0.0, 0.0), 0.0)])
    initial = _scene(catalog, [(1, (0.2, 0.1), 0.0)])
    plan = _plan(initial, target, catalog)
    assert plan.ok and len(plan) == 1 and plan.steps[0].k == 0
    result = execute(plan, initial, target, catalog=catalog)
    assert result.success and result.steps == 1


def test_tower_plan_goes_bottom_up(tower, catalog):
    initial, target = tower
    plan = _plan(initial, target, catalog)
    assert [(s.target, s.k) for s in plan.steps] == [(2, 0), (1, 1), (0, 2)]
    assert [s.object for s in plan.steps] == [0, 1, 2]
    result = execute(plan, initial, target, catalog=catalog)
    assert result.success and result.step_ratio == 1.0


def test_premature_top_block_collapses(tower, catalog):
    initial, target = tower
    plan = _plan(initial, target, catalog, graph=DependencyGraph(3, frozenset()))
    result = execute(plan, initial, target, catalog=catalog)
    assert not result.success
    assert sorted(result.collapsed) == [0, 1]
    assert result.completion == pytest.approx(1 / 3)


def test_circular_graph_fails_without_steps(tower, catalog):
    initial, target = tower
    plan = _plan(initial, target, catalog, graph=DependencyGraph(3, frozenset({(0, 1), (1, 0)})))
    assert plan.failure == CIRCULAR and len(plan) == 0
    result = execute(plan, initial, target, catalog=catalog)
    assert result.circular and not result.success and result.steps == 0


def test_plan_validation():
    step = PlanStep(0, Pose.identity(), 1, 0)
    with pytest.raises(InvalidPlanError):
        Plan((step, PlanStep(1, Pose.identity(), 0, 1)))
    with pytest.raises(InvalidPlanError):
        Plan((step, PlanStep(0, Pose.identity(), 1, 1)))


def test_execute_rejects_unknown_object(tower, catalog):
    initial, target = tower
    with pytest.raises(InvalidPlanError):
        execute(Plan((PlanStep(7, Pose.identity(), 0, 0),)), initial, target, catalog=catalog)


def test_oracle_plans_on_generated_scenes(catalog):
    for seed in range(12):
        entry = make_entry(seed, GenSpec.default(3, seed), catalog)
        plan = scl_plan(observe(entry.initial, ObservationModel(), seed, catalog),
                        observe(entry.target, ObservationModel(), seed + 1, catalog),
                        graph=entry.graph, catalog=catalog)
        assert len(plan) == len(entry.target)
        result = execute(plan, entry.initial, entry.target, catalog=catalog)
        assert result.success and result.step_ratio == 1.0, seed


def test_equal_k_steps_commute(catalog, rng):
    for seed in range(4):
        entry = make_entry(seed, GenSpec.default(3, seed), catalog)
        plan = _plan(entry.initial, entry.target, catalog, graph=entry.graph)
        base = execute(plan, entry.initial, entry.target, catalog=catalog)
        for _ in range(3):
            keys = rng.uniform(size=len(plan))
            steps = sorted(plan.steps, key=lambda s: (s.k, keys[plan.steps.index(s)]))
            other = execute(Plan(tuple(steps)), entry.initial, entry.target, catalog=catalog)
            assert other.achieved.keys() == base.achieved.keys()
            for t, pose in base.achieved.items():
                assert np.array_equal(other.achieved[t].t, pose.t)
                assert np.array_equal(other.achieved[t].q, pose.q)


def test_success_implies_thresholds(catalog):
    noise = ActuationNoise(0.004, 0.02)
    for seed in range(6):
        entry = make_entry(seed, GenSpec.default(3, seed), catalog)
        plan = _plan(entry.initial, entry.target, catalog, graph=entry.graph)
        r = execute(plan, entry.initial, entry.target, noise, seed, catalog)
        if r.success:
            assert max(r.pos_errors.values()) <= POS_THRESHOLD
            assert max(r.orn_errors.values()) <= ORN_THRESHOLD
        for t in range(r.n):
            assert r.within(t) == (t in r.achieved and r.pos_errors[t] <= POS_THRESHOLD
                                   and r.orn_errors[t] <= ORN_THRESHOLD)


# ---- noise -----------------------------------------------------------------

def test_position_noise_magnitude(catalog):
    n = 10
    target = _scene(catalog, [(1, (0.1 * (k % 5), 0.1 * (k // 5)), 0.0) for k in range(n)])
    initial = _scene(catalog, [(1, (0.1 * (k % 5), 0.5 + 0.1 * (k // 5)), 0.0) for k in range(n)])
    plan = _plan(initial, target, catalog)
    errors = []
    for seed in range(20):
        r = execute(plan, initial, target, ActuationNoise(sigma_pos=0.003), seed, catalog)
        errors += list(r.pos_errors.values())
    # planar Gaussian: mean radial error is sigma * sqrt(pi / 2) ~ 3.8 mm
    assert 0.002 <= np.mean(errors) <= 0.006
    assert np.mean(errors) == pytest.approx(0.003 * math.sqrt(math.pi / 2), rel=0.15)


def test_noise_is_seeded(tower, catalog):
    initial, target = tower
    plan = _plan(initial, target, catalog)
    noise = ActuationNoise(0.002, 0.01)
    a = execute(plan, initial, target, noise, 3, catalog)
    b = execute(plan, initial, target, noise, 3, catalog)
    assert a.to_json() == b.to_json()


# ---- baselines -------------------------------------------------------------

def test_random_on_flat_scene_needs_n_steps(flat, catalog):
    initial, target = flat
    for seed in range(5):
        r = classical_random(initial, target, seed=seed, catalog=catalog)
        assert r.success and r.steps == 5


def test_random_on_tower_wastes_steps(tower, catalog):
    initial, target = tower
    ratios = [classical_random(initial, target, seed=s, catalog=catalog).step_ratio for s in range(20)]
    assert min(ratios) >= 1.0
    assert np.mean(ratios) > 1.0


def test_budget_exhaustion_is_partial(tower, catalog):
    initial, target = tower
    r = classical_iterative(initial, target, budget=2, catalog=catalog)
    assert r.budget_exhausted and not r.success and r.steps == 2
    assert 0 < r.completion < 1


def test_iterative_in_dependency_order_needs_n_steps(tower, catalog):
    initial, target = tower
    # initial index order is slab, cube, cylinder: already bottom-up
    r = classical_iterative(initial, target, catalog=catalog)
    assert r.success and r.steps == 3


def test_iterative_top_down_order(catalog):
    target = _scene(catalog, [(4, (0.0, 0.0), 0.05), (1, (0.0, 0.0), 0.02), (3, (0.0, 0.0), 0.0)])
    initial = _scene(catalog, [(4, (0.2, 0.0), 0.0), (1, (0.3, 0.0), 0.0), (3, (0.4, 0.0), 0.0)])
    r = classical_iterative(initial, target, budget=100, catalog=catalog)
    # checks: cyl, cube, slab(ok) | cyl, cube(ok) | cyl(ok)
    assert r.success and r.steps == 6


def test_iterative_deterministic(catalog):
    entry = make_entry(4, GenSpec.default(3, 4), catalog)
    a = classical_iterative(entry.initial, entry.target, catalog=catalog)
    b = classical_iterative(entry.initial, entry.target, catalog=catalog)
    assert a.to_json() == b.to_json() and a.trace == b.trace


def test_baseline_ratios_at_least_one(catalog):
    for seed in range(6):
        entry = make_entry(seed, GenSpec.default(3, seed), catalog)
        for fn in (classical_random, classical_iterative):
            r = fn(entry.initial, entry.target, seed=seed, catalog=catalog)
            assert r.steps >= sum(placed for _, placed in r.trace)
            if r.success:
                assert r.step_ratio >= 1.0


# ---- metrics ---------------------------------------------------------------

def _result(n, errors, steps):
    r = ExecutionResult(n, steps=steps)
    for t, (p, o) in enumerate(errors):
        r.achieved[t] = Pose.identity()
        r.pos_errors[t], r.orn_errors[t] = p, o
    return r


def test_evaluate_examples():
    good = _result(2, [(0.001, 0.01), (0.003, 0.0)], 2)
    half = _result(2, [(0.02, 0.0), (0.0, 0.0)], 3)
    rep = evaluate([good, half])
    assert rep["success_rate"] == 0.5 and rep["successes"] == 1
    assert rep["completion"]["mean"] == pytest.approx(0.75)
    assert rep["step_ratio"]["mean"] == 1.0
    assert rep["pos_error"]["mean"] == pytest.approx(0.002)
    with pytest.raises(ValueError):
        evaluate([])


def test_buckets():
    assert [count_bucket(n) for n in (7, 8, 10, 11, 15, 16, 20, 21)] == \
        [None, "8-10", "8-10", "11-15", "11-15", "16-20", "16-20", None]
    r = _result(1, [(0.0, 0.0)], 1)
    out = bucketed([r], ["8-10"], ["8-10", "11-15"])
    assert list(out) == ["8-10", "11-15"] and out["11-15"] is None and out["8-10"]["success_rate"] == 1.0
