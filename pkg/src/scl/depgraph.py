"""Dependency graphs: geometric ground truth, thresholding, DAG checks and levels.

An edge ``(i, j)`` means object ``i`` rests on object ``j`` and must be placed
after it.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import (
    CONTACT_TOL,
    ObjectClass,
    Pose,
    contact_polygons,
    stable_on,
    support_polygon,
)


class OracleError(RuntimeError):
    """The scene is not statically sound."""


class CircularDependencyError(ValueError):
    """The dependency graph contains a directed cycle."""


@dataclass(frozen=True)
class DependencyGraph:
    n: int
    edges: frozenset

    def __post_init__(self):
        edges = frozenset((int(i), int(j)) for i, j in self.edges)
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={self.n}")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_adjacency(cls, adj: np.ndarray) -> "DependencyGraph":
        ii, jj = np.nonzero(np.asarray(adj))
        return cls(len(adj), frozenset(zip(ii.tolist(), jj.tolist())))

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for i, j in self.edges:
            a[i, j] = 1.0
        return a

    def dependencies(self, i: int) -> list[int]:
        return sorted(j for a, j in self.edges if a == i)

    def relabel(self, perm: Sequence[int]) -> "DependencyGraph":
        """Graph with node ``k`` renamed to ``perm[k]``."""
        return DependencyGraph(self.n, frozenset((perm[i], perm[j]) for i, j in self.edges))

    def to_json(self) -> dict:
        return {"n": self.n, "edges": [list(e) for e in sorted(self.edges)]}

    @classmethod
    def from_json(cls, d: dict) -> "DependencyGraph":
        return cls(int(d["n"]), frozenset(tuple(e) for e in d["edges"]))


# ---------------------------------------------------------------------------
# ground truth from geometry
# ---------------------------------------------------------------------------

Body = tuple[ObjectClass, Pose]


def contacts_below(i: int, bodies: Sequence[Body | None], tol: float = CONTACT_TOL,
                   ground: bool = True) -> dict:
    """Contact regions under body ``i``; key ``None`` is the ground plane.

    ``bodies`` entries that are ``None`` are ignored (not present).
    """
    me = bodies[i]
    out = {}
    if ground:
        regions = contact_polygons(me, None, tol)
        if regions:
            out[None] = regions
    my_v = me[0].world_vertices(me[1])
    lo, hi = my_v.min(0), my_v.max(0)
    for j, other in enumerate(bodies):
        if j == i or other is None:
            continue
        ov = other[0].world_vertices(other[1])
        if np.any(ov[:, :2].max(0) < lo[:2]) or np.any(ov[:, :2].min(0) > hi[:2]):
            continue
        if ov[:, 2].max() < lo[2] - tol or ov[:, 2].min() > hi[2]:
            continue
        regions = contact_polygons(me, other, tol)
        if regions:
            out[j] = regions
    return out


def is_supported(body: Body, contacts: dict) -> bool:
    regions = [r for rs in contacts.values() for r in rs]
    return bool(regions) and stable_on(body, support_polygon(regions))


def essential_supporters(body: Body, contacts: dict, label: object = None) -> list[int]:
    """Object contacts that the body cannot do without.

    A supporter is essential when dropping its contact regions leaves the body
    unstable, or when it is the only contact. If the essential set alone does not
    hold the body up, every object contact is returned so that placing the body
    after its listed supporters is always safe.
    """
    if not is_supported(body, contacts):
        raise OracleError(f"object {label} is not statically supported")
    objs = [j for j in contacts if j is not None]
    if len(contacts) == 1:
        return objs
    essential = []
    for j in objs:
        rest = {k: v for k, v in contacts.items() if k != j}
        if not is_supported(body, rest):
            essential.append(j)
    keep = {k: v for k, v in contacts.items() if k is None or k in essential}
    if not is_supported(body, keep):
        return sorted(objs)
    return sorted(essential)


def oracle_graph(scene, catalog: Sequence[ObjectClass] | None = None,
                 tol: float = CONTACT_TOL) -> DependencyGraph:
    """Ground-truth dependency graph of a statically sound scene."""
    from .catalog import default_catalog

    catalog = default_catalog() if catalog is None else catalog
    bodies = [(catalog[o.class_id], o.pose) for o in scene.objects]
    edges = set()
    for i, body in enumerate(bodies):
        contacts = contacts_below(i, bodies, tol)
        for j in essential_supporters(body, contacts, label=i):
            edges.add((i, j))
    return DependencyGraph(len(bodies), frozenset(edges))


# ---------------------------------------------------------------------------
# graph utilities
# ---------------------------------------------------------------------------

def threshold_graph(rho: np.ndarray, tstar: float = 0.5) -> DependencyGraph:
    rho = np.asarray(rho, dtype=float)
    if not 0.0 < tstar < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {tstar}")
    adj = rho > tstar
    np.fill_diagonal(adj, False)
    return DependencyGraph.from_adjacency(adj)


def _kahn(g: DependencyGraph) -> list[int]:
    # process sinks first: a node is ready once everything it depends on is done
    remaining = [0] * g.n
    dependents: list[list[int]] = [[] for _ in range(g.n)]
    for i, j in g.edges:
        remaining[i] += 1
        dependents[j].append(i)
    ready = deque(k for k in range(g.n) if remaining[k] == 0)
    order = []
    while ready:
        j = ready.popleft()
        order.append(j)
        for i in dependents[j]:
            remaining[i] -= 1
            if remaining[i] == 0:
                ready.append(i)
    return order


def is_dag(g: DependencyGraph) -> bool:
    return len(_kahn(g)) == g.n


def topo_levels(g: DependencyGraph) -> list[tuple[int, int]]:
    """``(object, k)`` pairs sorted by ``k`` then index.

    ``k`` is the longest dependency chain below the object; objects without
    dependencies get ``k = 0``.
    """
    order = _kahn(g)
    if len(order) != g.n:
        cyc = sorted(set(range(g.n)) - set(order))
        raise CircularDependencyError(f"circular dependency among objects {cyc}")
    deps: list[list[int]] = [[] for _ in range(g.n)]
    for i, j in g.edges:
        deps[i].append(j)
    k = [0] * g.n
    for node in order:
        if deps[node]:
            k[node] = 1 + max(k[j] for j in deps[node])
    return sorted(((i, k[i]) for i in range(g.n)), key=lambda p: (p[1], p[0]))


def edge_scores(pred: DependencyGraph, truth: DependencyGraph) -> dict:
    tp = len(pred.edges & truth.edges)
    fp = len(pred.edges - truth.edges)
    fn = len(truth.edges - pred.edges)
    return {"tp": tp, "fp": fp, "fn": fn}


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f

