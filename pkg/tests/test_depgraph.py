import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scl.depgraph import (
    CircularDependencyError,
    DependencyGraph,
    OracleError,
    is_dag,
    oracle_graph,
    threshold_graph,
    topo_levels,
)
from scl.geometry import Pose
from scl.scenegen import GenSpec, Scene, SceneObject, generate_structure

from conftest import make_box_class


# ---- thresholding ----------------------------------------------------------

def test_threshold_examples():
    assert threshold_graph(np.full((4, 4), 0.1), 0.5).edges == frozenset()
    rho = np.zeros((3, 3))
    rho[0, 1] = 0.9
    assert threshold_graph(rho, 0.5).edges == {(0, 1)}


def test_threshold_rejects_bad_tstar():
    with pytest.raises(ValueError):
        threshold_graph(np.zeros((2, 2)), 1.0)


def test_threshold_monotone(rng):
    for _ in range(200):
        rho = rng.uniform(size=(6, 6))
        t1, t2 = sorted(rng.uniform(0.01, 0.99, 2))
        assert threshold_graph(rho, t2).edges <= threshold_graph(rho, t1).edges


# ---- DAG utilities ---------------------------------------------------------

def _has_cycle_brute(n, edges):
    """Exhaustive search for a directed simple cycle."""
    for size in range(2, n + 1):
        for nodes in itertools.permutations(range(n), size):
            if nodes[0] != min(nodes):
                continue
            if all((nodes[k], nodes[(k + 1) % size]) in edges for k in range(size)):
                return True
    return False


def _random_dag(rng, n, p=0.4):
    order = rng.permutation(n)
    edges = {(int(order[a]), int(order[b])) for a in range(n) for b in range(a) if rng.uniform() < p}
    return DependencyGraph(n, frozenset(edges))


def test_is_dag_examples():
    assert is_dag(DependencyGraph(0, frozenset()))
    assert is_dag(DependencyGraph(3, frozenset()))
    assert not is_dag(DependencyGraph(2, frozenset({(0, 1), (1, 0)})))


def test_is_dag_random_dags(rng):
    for _ in range(100):
        n = int(rng.integers(1, 7))
        g = _random_dag(rng, n)
        assert is_dag(g)
        assert not _has_cycle_brute(n, g.edges)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5).flatmap(
    lambda n: st.tuples(st.just(n), st.sets(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))))))
def test_is_dag_matches_exhaustive_cycle_search(data):
    n, edges = data
    edges = frozenset(e for e in edges if e[0] != e[1])
    assert is_dag(DependencyGraph(n, edges)) == (not _has_cycle_brute(n, edges))


def test_topo_levels_examples():
    assert topo_levels(DependencyGraph(4, frozenset())) == [(0, 0), (1, 0), (2, 0), (3, 0)]
    top, mid, bottom = 0, 1, 2
    tower = DependencyGraph(3, frozenset({(top, mid), (mid, bottom)}))
    assert topo_levels(tower) == [(bottom, 0), (mid, 1), (top, 2)]
    slab, a, b = 0, 1, 2
    bridge = DependencyGraph(3, frozenset({(slab, a), (slab, b)}))
    assert topo_levels(bridge) == [(a, 0), (b, 0), (slab, 1)]


def test_topo_levels_cycle_raises():
    with pytest.raises(CircularDependencyError, match="circular dependency"):
        topo_levels(DependencyGraph(3, frozenset({(0, 1), (1, 0)})))


def _longest_path_brute(n, edges, i):
    best = 0
    for size in range(2, n + 1):
        for path in itertools.permutations(range(n), size):
            if path[0] == i and all((path[k], path[k + 1]) in edges for k in range(size - 1)):
                best = max(best, size - 1)
    return best


def test_topo_levels_against_enumeration(rng):
    for _ in range(40):
        n = int(rng.integers(1, 9))
        g = _random_dag(rng, n, p=0.3)
        order = topo_levels(g)
        assert sorted(i for i, _ in order) == list(range(n))
        pos = {i: p for p, (i, _) in enumerate(order)}
        k = dict(order)
        assert [kk for _, kk in order] == sorted(kk for _, kk in order)
        for i, j in g.edges:
            assert pos[j] < pos[i] and k[j] < k[i]
        if n <= 6:
            for i in range(n):
                assert k[i] == _longest_path_brute(n, g.edges, i)


# ---- geometric oracle ------------------------------------------------------

def _boxes_scene(classes, poses):
    return Scene(tuple(SceneObject(k, k, p, 0) for k, p in enumerate(poses)))


def test_oracle_single_object():
    cube = make_box_class(0.03, 0.03, 0.03, cid=0)
    scene = _boxes_scene([cube], [Pose([0, 0, 0.015], [1, 0, 0, 0])])
    assert oracle_graph(scene, [cube]).edges == frozenset()


def test_oracle_tower():
    cats = [make_box_class(0.03, 0.03, 0.03, cid=k) for k in range(3)]
    top, mid, bottom = 0, 1, 2
    poses = [None] * 3
    poses[bottom] = Pose([0, 0, 0.015], [1, 0, 0, 0])
    poses[mid] = Pose([0.005, 0, 0.045], [1, 0, 0, 0])
    poses[top] = Pose([0.0, 0.004, 0.075], [1, 0, 0, 0])
    g = oracle_graph(_boxes_scene(cats, poses), cats)
    assert g.edges == {(top, mid), (mid, bottom)}


def test_oracle_slab_on_two_pillars():
    pillar = make_box_class(0.02, 0.02, 0.04, cid=1)
    slab = make_box_class(0.12, 0.03, 0.01, cid=0)
    cats = [slab, pillar, make_box_class(0.02, 0.02, 0.04, cid=2)]
    poses = [Pose([0, 0, 0.045], [1, 0, 0, 0]),
             Pose([-0.045, 0, 0.02], [1, 0, 0, 0]),
             Pose([0.045, 0, 0.02], [1, 0, 0, 0])]
    g = oracle_graph(_boxes_scene(cats, poses), cats)
    assert g.edges == {(0, 1), (0, 2)}


def test_oracle_unstable_raises():
    cats = [make_box_class(0.03, 0.03, 0.03, cid=k) for k in range(2)]
    poses = [Pose([0, 0, 0.015], [1, 0, 0, 0]), Pose([0.025, 0, 0.045], [1, 0, 0, 0])]
    with pytest.raises(OracleError, match="object 1"):
        oracle_graph(_boxes_scene(cats, poses), cats)


def test_oracle_graph_is_dag_on_generated_scenes(catalog):
    for seed in range(30):
        scene = generate_structure(GenSpec.default(3, seed), catalog)
        g = oracle_graph(scene, catalog)
        assert is_dag(g)
        for i, j in g.edges:
            assert scene.objects[j].pose.t[2] < scene.objects[i].pose.t[2]
