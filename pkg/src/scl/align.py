"""Rigid registration of class-default clouds to observations and minimum-rotation
instance correspondence between an initial and a target scene."""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .catalog import default_catalog
from .geometry import ObjectClass, PointCloud, Pose, rotation_angle
from .scenegen import Observation, default_body_cloud

RigidTransform = Pose


class RegistrationError(ValueError):
    """Point sets are too degenerate to determine a rigid transform."""


class CorrespondenceError(ValueError):
    """Initial and target scenes cannot be matched instance-for-instance."""


def _as_points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float).reshape(-1, 3)


def register(source, target) -> tuple[Pose, float]:
    """Least-squares rigid transform taking ``source[k]`` onto ``target[k]``.

    Closed form through the SVD of the cross-covariance (Kabsch/Umeyama
    without scale). Returns the transform and the residual RMS.
    """
    src, dst = _as_points(source), _as_points(target)
    if src.shape != dst.shape:
        raise RegistrationError(f"point sets differ in shape: {src.shape} vs {dst.shape}")
    if len(src) < 3:
        raise RegistrationError(f"registration needs at least 3 points, got {len(src)}")
    cs, cd = src.mean(0), dst.mean(0)
    a, b = src - cs, dst - cd
    for pts, name in ((a, "source"), (b, "target")):
        s = np.linalg.svd(pts, compute_uv=False)
        if s[0] <= 0 or s[1] <= 1e-9 * s[0]:
            raise RegistrationError(f"{name} points are collinear or coincident")
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cd - rot @ cs
    pose = Pose.from_matrix(rot, t)
    rms = float(np.sqrt(np.mean(np.sum((pose.apply(src) - dst) ** 2, axis=1))))
    return pose, rms


def rotation_magnitude(r: Pose) -> float:
    return rotation_angle(r.q)


def register_observed(cls: ObjectClass, cloud: PointCloud, n_points: int) -> Pose:
    """Pose of an observed object: aligns the class default cloud onto the observation."""
    if cloud.sample_index is None:
        raise RegistrationError("observed cloud carries no correspondence to the default sample")
    if len(cloud) < 3:
        raise RegistrationError(f"object {cloud.source_object} has only {len(cloud)} visible points")
    default_pts, _ = default_body_cloud(cls, n_points)
    pose, _ = register(default_pts[cloud.sample_index], cloud.points)
    return pose


@dataclass(frozen=True)
class CorrespondenceMap:
    """``pairs[k] = (initial index, target index)`` with the matching transforms.

    ``deltas[k]`` moves the initial object onto its target pose,
    ``target_from_default[k]`` places the class default cloud at the target.
    """

    pairs: tuple
    deltas: tuple
    target_from_default: tuple
    initial_from_default: tuple
    rotation: tuple

    def for_target(self, target_index: int) -> int:
        for k, (_, t) in enumerate(self.pairs):
            if t == target_index:
                return k
        raise KeyError(target_index)

    def total_rotation(self) -> float:
        return float(sum(self.rotation))

    def to_json(self) -> dict:
        return {"pairs": [
            {"initial": i, "target": t, "rotation": r, **{"delta": d.to_json()}}
            for (i, t), d, r in zip(self.pairs, self.deltas, self.rotation)
        ]}


def _candidate(cls: ObjectClass, t_pose: Pose, i_pose: Pose) -> tuple[float, float, Pose]:
    """Smallest-rotation transform from the initial to the target pose, modulo class symmetry."""
    best = None
    inv = i_pose.inverse()
    for g in cls.symmetries:
        delta = t_pose.compose(Pose(np.zeros(3), g)).compose(inv)
        key = (rotation_magnitude(delta), float(np.linalg.norm(delta.t)))
        if best is None or key < best[:2]:
            best = (*key, delta)
    return best


def _assign(cost_rot: np.ndarray, cost_trans: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # lexicographic (rotation, translation) objective via integer-valued costs
    rot_q = np.round(cost_rot / 1e-6)
    trans_q = np.round(np.minimum(cost_trans, 1.0) / 1e-5)
    scale = (trans_q.max() + 1) * max(cost_rot.shape[0], 1)
    return linear_sum_assignment(rot_q * scale + trans_q)


def correspond(initial: Observation, target: Observation,
               catalog: Sequence[ObjectClass] | None = None) -> CorrespondenceMap:
    """Match every target object to a same-class initial object with least total rotation."""
    catalog = default_catalog() if catalog is None else catalog
    ci = Counter(o.class_id for o in initial.objects)
    ct = Counter(o.class_id for o in target.objects)
    if ci != ct:
        diff = {c: (ci.get(c, 0), ct.get(c, 0)) for c in sorted(set(ci) | set(ct)) if ci.get(c) != ct.get(c)}
        raise CorrespondenceError(f"class counts differ (class: initial, target): {diff}")
    init_poses = [register_observed(catalog[o.class_id], o.cloud, initial.n_points) for o in initial.objects]
    targ_poses = [register_observed(catalog[o.class_id], o.cloud, target.n_points) for o in target.objects]

    result = {}
    for cid in sorted(ct):
        ii = [k for k, o in enumerate(initial.objects) if o.class_id == cid]
        tt = [k for k, o in enumerate(target.objects) if o.class_id == cid]
        cls = catalog[cid]
        rot = np.zeros((len(tt), len(ii)))
        trans = np.zeros_like(rot)
        deltas = {}
        for a, t in enumerate(tt):
            for b, i in enumerate(ii):
                rot[a, b], trans[a, b], deltas[a, b] = _candidate(cls, targ_poses[t], init_poses[i])
        rows, cols = _assign(rot, trans)
        for a, b in zip(rows, cols):
            result[tt[a]] = (ii[b], deltas[a, b], rot[a, b])

    order = sorted(result)
    return CorrespondenceMap(
        pairs=tuple((result[t][0], t) for t in order),
        deltas=tuple(result[t][1] for t in order),
        target_from_default=tuple(targ_poses[t] for t in order),
        initial_from_default=tuple(init_poses[result[t][0]] for t in order),
        rotation=tuple(float(result[t][2]) for t in order),
    )


def brute_force_min_rotation(rot: np.ndarray) -> float:
    """Smallest assignment total by enumerating permutations (small inputs only)."""
    n = rot.shape[0]
    return min(sum(rot[a, p[a]] for a in range(n)) for p in itertools.permutations(range(n)))
