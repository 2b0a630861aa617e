"""Procedural multi-level structure generation, initial scattering, partial
observation and dataset I/O."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import default_catalog
from .depgraph import DependencyGraph, contacts_below, is_supported
from .geometry import (
    CONTACT_TOL,
    UP,
    ObjectClass,
    PointCloud,
    Pose,
    collide,
    face_area,
    fit_plane,
    polygon_area,
    quat_between,
    quat_mul,
    quat_to_matrix,
    sample_body_surface,
    sample_face_points,
    top_face,
    vertical_gap,
    yaw_quat,
)

ATTEMPTS_PER_SLOT = 200
MIN_UNCOVERED_FRACTION = 0.30
PAIR_MAX_HEIGHT_DIFF = 0.005
MAX_TILT_DEG = 10.0
MIN_SUPPORT_OVERLAP = 0.005
WORKSPACE_BOUNDS = ((-0.3, -0.3, 0.0), (0.3, 0.3, 0.5))
STRUCTURE_BOUNDS = ((-0.15, -0.15, 0.0), (0.15, 0.15, 0.5))
DEFAULT_CAPS = {1: [9], 2: [5, 4], 3: [4, 3, 2]}
DATASET_VERSION = 1


class GenerationError(RuntimeError):
    """The requested scene cannot be produced."""


class DatasetError(RuntimeError):
    """A dataset file is missing or malformed."""


@dataclass(frozen=True)
class Bounds:
    lo: tuple
    hi: tuple

    @classmethod
    def default(cls) -> "Bounds":
        return cls(*WORKSPACE_BOUNDS)

    @classmethod
    def structure(cls) -> "Bounds":
        return cls(*STRUCTURE_BOUNDS)

    def contains(self, pts: np.ndarray, eps: float = 1e-9) -> bool:
        return bool(np.all(pts >= np.asarray(self.lo) - eps) and np.all(pts <= np.asarray(self.hi) + eps))

    def to_json(self) -> list:
        return [list(map(float, self.lo)), list(map(float, self.hi))]

    @classmethod
    def from_json(cls, d) -> "Bounds":
        return cls(tuple(map(float, d[0])), tuple(map(float, d[1])))


@dataclass(frozen=True)
class SceneObject:
    index: int
    class_id: int
    pose: Pose
    level: int = 0

    def to_json(self) -> dict:
        return {"index": self.index, "class_id": self.class_id,
                "t": [float(v) for v in self.pose.t], "q": [float(v) for v in self.pose.q],
                "level": self.level}

    @classmethod
    def from_json(cls, d: dict) -> "SceneObject":
        return cls(int(d["index"]), int(d["class_id"]), Pose(d["t"], d["q"]), int(d["level"]))


@dataclass(frozen=True)
class Scene:
    objects: tuple
    bounds: Bounds = field(default_factory=Bounds.default)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if [o.index for o in self.objects] != list(range(len(self.objects))):
            raise ValueError("scene object indices must be contiguous from 0")

    def __len__(self):
        return len(self.objects)

    @property
    def num_levels(self) -> int:
        return 1 + max((o.level for o in self.objects), default=-1)

    def class_ids(self) -> list[int]:
        return [o.class_id for o in self.objects]

    def bodies(self, catalog: Sequence[ObjectClass] | None = None) -> list:
        catalog = default_catalog() if catalog is None else catalog
        return [(catalog[o.class_id], o.pose) for o in self.objects]

    def to_json(self) -> dict:
        return {"bounds": self.bounds.to_json(), "seed": self.seed,
                "objects": [o.to_json() for o in self.objects]}

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(tuple(SceneObject.from_json(o) for o in d["objects"]),
                   Bounds.from_json(d["bounds"]), int(d.get("seed", 0)))

    def same_as(self, other: "Scene") -> bool:
        return self.to_json() == other.to_json()


@dataclass(frozen=True)
class GenSpec:
    """Levels are ``0 .. len(caps) - 1``; ``caps[i]`` bounds the objects on level ``i``."""

    caps: tuple
    seed: int = 0
    bounds: Bounds = field(default_factory=Bounds.structure)

    def __post_init__(self):
        caps = tuple(int(c) for c in self.caps)
        if not caps:
            raise ValueError("at least one level is required")
        if any(c < 0 for c in caps):
            raise ValueError(f"level caps must be non-negative, got {caps}")
        object.__setattr__(self, "caps", caps)

    @property
    def levels(self) -> int:
        return len(self.caps)

    @classmethod
    def default(cls, levels: int = 3, seed: int = 0) -> "GenSpec":
        caps = DEFAULT_CAPS.get(levels) or [5, 3] + [2] * (levels - 2)
        return cls(tuple(caps), seed)

    @classmethod
    def sized(cls, total: int, levels: int = 3, seed: int = 0) -> "GenSpec":
        """Caps summing to ``total`` in the default per-level proportions, footprint scaled to keep density."""
        if total < levels:
            raise ValueError(f"{total} objects cannot fill {levels} levels")
        base = np.asarray(cls.default(levels).caps, float)
        caps = np.maximum(np.floor(base * total / base.sum()), 1).astype(int)
        for k in range(total - int(caps.sum())):
            caps[k % levels] += 1
        half = STRUCTURE_BOUNDS[1][0] * math.sqrt(total / base.sum())
        bounds = Bounds((-half, -half, 0.0), (half, half, STRUCTURE_BOUNDS[1][2]))
        return cls(tuple(int(c) for c in caps), seed, bounds)

    def to_json(self) -> dict:
        return {"caps": list(self.caps), "seed": self.seed, "bounds": self.bounds.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "GenSpec":
        bounds = Bounds.from_json(d["bounds"]) if "bounds" in d else Bounds.structure()
        caps = d.get("caps")
        if caps is None:
            caps = GenSpec.default(int(d.get("levels", 3))).caps
        return cls(tuple(caps), int(d.get("seed", 0)), bounds)


# ---------------------------------------------------------------------------
# structure generation
# ---------------------------------------------------------------------------

@dataclass
class _Placed:
    cls: ObjectClass
    pose: Pose
    level: int
    top: object = None
    top_area: float = 0.0
    covered: float = 0.0

    @property
    def body(self):
        return (self.cls, self.pose)

    def available(self) -> bool:
        return self.top is not None and self.covered <= (1 - MIN_UNCOVERED_FRACTION) * self.top_area


def _footprint_axis(cls: ObjectClass, q: np.ndarray) -> tuple[float, float, float]:
    """Yaw of the footprint's long axis and its (length, width) under orientation ``q``."""
    v = cls.vertices @ quat_to_matrix(q).T
    ext = v[:, :2].max(0) - v[:, :2].min(0)
    if ext[0] >= ext[1]:
        return 0.0, float(ext[0]), float(ext[1])
    return math.pi / 2, float(ext[1]), float(ext[0])


class _Builder:
    def __init__(self, spec: GenSpec, catalog: Sequence[ObjectClass]):
        self.spec = spec
        self.catalog = catalog
        self.rng = np.random.default_rng(spec.seed)
        self.placed: list[_Placed] = []
        self.lo = np.asarray(spec.bounds.lo, float)
        self.hi = np.asarray(spec.bounds.hi, float)

    # -- candidates --------------------------------------------------------
    def orientations(self, level: int) -> list[tuple[ObjectClass, np.ndarray]]:
        final = level == self.spec.levels - 1
        out = []
        for cls in self.catalog:
            qs = list(cls.stable_orientations)
            if final:
                qs += list(cls.top_orientations)
            out.extend((cls, q) for q in qs)
        return out

    def _in_bounds(self, cls, pose) -> bool:
        return self.spec.bounds.contains(cls.world_vertices(pose))

    def _collision_free(self, cls, pose) -> bool:
        return not any(collide((cls, pose), p.body, CONTACT_TOL) for p in self.placed)

    def _commit(self, cls, pose, level, contacts: dict) -> None:
        for j, regions in contacts.items():
            if j is not None:
                self.placed[j].covered += sum(polygon_area(r) for r in regions)
        top = top_face(cls, pose, MAX_TILT_DEG)
        area = face_area(top) if top is not None else 0.0
        self.placed.append(_Placed(cls, pose, level, top, area))

    def _settle(self, cls, pose) -> Pose | None:
        """Drop ``pose`` vertically onto whatever lies beneath it."""
        gaps = [vertical_gap((cls, pose), None)]
        v = cls.world_vertices(pose)
        lo, hi = v[:, :2].min(0), v[:, :2].max(0)
        for p in self.placed:
            pv = p.cls.world_vertices(p.pose)
            if np.any(pv[:, :2].max(0) < lo) or np.any(pv[:, :2].min(0) > hi):
                continue
            gaps.append(vertical_gap((cls, pose), p.body))
        drop = min(gaps)
        if not np.isfinite(drop):
            return None
        return Pose(pose.t - drop * UP, pose.q)

    def _try_stacked(self, cls, q_base, xy, plane_pts, yaw, level, supporters: set[int],
                     exact: bool) -> bool:
        normal, _ = fit_plane(plane_pts)
        if math.degrees(math.acos(min(1.0, normal[2]))) > MAX_TILT_DEG:
            return False
        q = quat_mul(quat_between(UP, normal), quat_mul(yaw_quat(yaw), q_base))
        top_z = max(self.placed[j].top.zmax for j in supporters)
        verts = cls.vertices @ quat_to_matrix(q).T
        pose = Pose([xy[0], xy[1], top_z + 0.01 - verts[:, 2].min()], q)
        pose = self._settle(cls, pose)
        if pose is None or not self._in_bounds(cls, pose):
            return False
        if not self._collision_free(cls, pose):
            return False
        bodies = [p.body for p in self.placed] + [(cls, pose)]
        contacts = contacts_below(len(self.placed), bodies, CONTACT_TOL)
        touched = set(contacts)
        if None in touched:
            return False
        prev = {j for j in touched if self.placed[j].level == level - 1}
        if prev != touched:
            return False
        if exact and touched != supporters:
            return False
        if not supporters <= touched:
            return False
        for j in supporters:
            if sum(polygon_area(r) for r in contacts[j]) < MIN_SUPPORT_OVERLAP ** 2:
                return False
        if not is_supported((cls, pose), contacts):
            return False
        self._commit(cls, pose, level, contacts)
        return True

    # -- level 0 -----------------------------------------------------------
    def place_ground(self) -> int:
        cands = self.orientations(0)
        count = 0
        for _ in range(self.spec.caps[0]):
            for _ in range(ATTEMPTS_PER_SLOT):
                cls, q_base = cands[self.rng.integers(len(cands))]
                q = quat_mul(yaw_quat(self.rng.uniform(0, 2 * math.pi)), q_base)
                xy = self.rng.uniform(self.lo[:2], self.hi[:2])
                pose = cls.resting_pose(q, xy, self.lo[2])
                if not self._in_bounds(cls, pose) or not self._collision_free(cls, pose):
                    continue
                self._commit(cls, pose, 0, {})
                count += 1
                break
        return count

    # -- level i >= 1 ------------------------------------------------------
    def _pair_attempts(self, a: int, b: int, level: int):
        pa, pb = self.placed[a], self.placed[b]
        if abs(pa.top.zmax - pb.top.zmax) > PAIR_MAX_HEIGHT_DIFF:
            return
        ca, cb = pa.top.poly2d.mean(0), pb.top.poly2d.mean(0)
        d = cb - ca
        dist = float(np.linalg.norm(d))
        if dist < 1e-6:
            return
        u = d / dist
        ext_a = float(((pa.top.poly2d - ca) @ u).max())
        ext_b = float(((pb.top.poly2d - cb) @ -u).max())
        cands = self.orientations(level)
        order = self.rng.permutation(len(cands))
        for k in order:
            cls, q_base = cands[k]
            axis_yaw, length, _ = _footprint_axis(cls, q_base)
            reach = length / 2 - dist / 2
            if reach + ext_a < MIN_SUPPORT_OVERLAP or reach + ext_b < MIN_SUPPORT_OVERLAP:
                continue
            for _ in range(2):
                jitter = self.rng.uniform(-0.003, 0.003, 2)
                xy = (ca + cb) / 2 + jitter
                yaw = math.atan2(u[1], u[0]) - axis_yaw + self.rng.uniform(-0.15, 0.15)
                pts = np.vstack([sample_face_points(pa.top, 12, self.rng),
                                 sample_face_points(pb.top, 12, self.rng)])
                yield cls, q_base, xy, pts, yaw

    def _single_attempts(self, a: int, level: int):
        pa = self.placed[a]
        ca = pa.top.poly2d.mean(0)
        cands = self.orientations(level)
        order = self.rng.permutation(len(cands))
        for k in order:
            cls, q_base = cands[k]
            for _ in range(2):
                xy = ca + self.rng.uniform(-0.004, 0.004, 2)
                yaw = self.rng.uniform(0, 2 * math.pi)
                pts = sample_face_points(pa.top, 16, self.rng)
                yield cls, q_base, xy, pts, yaw

    def place_level(self, level: int) -> int:
        cap = self.spec.caps[level]
        below = [k for k, p in enumerate(self.placed) if p.level == level - 1]
        count = 0
        budget = ATTEMPTS_PER_SLOT
        slots = cap

        def spend(placed: bool) -> bool:
            # returns False once the level has no slots left
            nonlocal budget, slots, count
            if placed:
                count += 1
                slots -= 1
                budget = ATTEMPTS_PER_SLOT
            else:
                budget -= 1
                if budget <= 0:
                    slots -= 1
                    budget = ATTEMPTS_PER_SLOT
            return slots > 0

        if slots <= 0:
            return 0
        pairs = list(itertools.combinations(below, 2))
        self.rng.shuffle(pairs)
        for a, b in pairs:
            if not (self.placed[a].available() and self.placed[b].available()):
                continue
            for cls, q_base, xy, pts, yaw in self._pair_attempts(a, b, level):
                ok = self._try_stacked(cls, q_base, xy, pts, yaw, level, {a, b}, exact=True)
                if not spend(ok):
                    return count
                if ok:
                    break
        singles = list(below)
        self.rng.shuffle(singles)
        for a in singles:
            if not self.placed[a].available():
                continue
            for cls, q_base, xy, pts, yaw in self._single_attempts(a, level):
                ok = self._try_stacked(cls, q_base, xy, pts, yaw, level, {a}, exact=False)
                if not spend(ok):
                    return count
                if ok:
                    break
        return count

    def run(self) -> list[_Placed]:
        if self.place_ground() == 0:
            raise GenerationError("no object could be placed on the ground level")
        for level in range(1, self.spec.levels):
            if not any(p.level == level - 1 for p in self.placed):
                break
            self.place_level(level)
        return self.placed


def generate_structure(spec: GenSpec, catalog: Sequence[ObjectClass] | None = None) -> Scene:
    """Build a statically sound multi-level structure.

    Level 0 is filled by rejection sampling on the ground. Each higher level is
    filled first by objects bridging two supporters from the level below, then
    by objects resting on a single supporter. Object indices are randomly
    permuted at the end so index order carries no level information.
    """
    catalog = default_catalog() if catalog is None else catalog
    builder = _Builder(spec, catalog)
    placed = builder.run()
    perm = builder.rng.permutation(len(placed))
    objects = [None] * len(placed)
    for old, new in enumerate(perm):
        p = placed[old]
        objects[new] = SceneObject(int(new), p.cls.id, p.pose, p.level)
    return Scene(tuple(objects), spec.bounds, spec.seed)


def scatter_initial(target: Scene, seed: int, catalog: Sequence[ObjectClass] | None = None,
                    bounds: Bounds | None = None) -> Scene:
    """Lay the target's objects flat on the ground at random collision-free poses.

    Objects are spread over ``bounds`` (the full workspace by default) in a
    random index order.
    """
    catalog = default_catalog() if catalog is None else catalog
    bounds = Bounds.default() if bounds is None else bounds
    if not target.objects:
        raise GenerationError("target scene is empty")
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(bounds.lo), np.asarray(bounds.hi)
    class_ids = [target.objects[k].class_id for k in rng.permutation(len(target))]
    bodies = []
    objects = []
    for idx, cid in enumerate(class_ids):
        cls = catalog[cid]
        for _ in range(ATTEMPTS_PER_SLOT):
            q_base = cls.stable_orientations[rng.integers(len(cls.stable_orientations))]
            q = quat_mul(yaw_quat(rng.uniform(0, 2 * math.pi)), q_base)
            pose = cls.resting_pose(q, rng.uniform(lo[:2], hi[:2]), lo[2])
            if not bounds.contains(cls.world_vertices(pose)):
                continue
            if any(collide((cls, pose), b, CONTACT_TOL) for b in bodies):
                continue
            bodies.append((cls, pose))
            objects.append(SceneObject(idx, cid, pose, 0))
            break
        else:
            raise GenerationError(f"could not scatter object {idx} (class {cid}) inside the workspace")
    return Scene(tuple(objects), bounds, seed)


# ---------------------------------------------------------------------------
# observation
# ---------------------------------------------------------------------------

DEFAULT_SAMPLE_SEED = 7919
DEFAULT_VIEWS = tuple(
    (math.cos(math.radians(45)) * math.cos(a), math.cos(math.radians(45)) * math.sin(a), math.sin(math.radians(45)))
    for a in (0.0, 2 * math.pi / 3, 4 * math.pi / 3)
)

_DEFAULT_CLOUDS: dict = {}


def default_body_cloud(cls: ObjectClass, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed body-frame surface sample (points, normals) for a class.

    Observed clouds are subsets of this sample moved to the object's pose, so a
    point's index identifies its body-frame counterpart.
    """
    key = (id(cls), n)
    if key not in _DEFAULT_CLOUDS:
        _DEFAULT_CLOUDS[key] = sample_body_surface(cls, n, DEFAULT_SAMPLE_SEED + cls.id)
    return _DEFAULT_CLOUDS[key]


@dataclass(frozen=True)
class ObservationModel:
    """Directional culling toward fixed view directions plus Gaussian noise."""

    views: tuple | None = DEFAULT_VIEWS
    n_points: int = 256
    noise_sigma: float = 0.0

    def to_json(self) -> dict:
        return {"views": None if self.views is None else [list(v) for v in self.views],
                "n_points": self.n_points, "noise_sigma": self.noise_sigma}


@dataclass(frozen=True)
class ObservedObject:
    class_id: int
    cloud: PointCloud
    occluded_fraction: float
    fully_occluded: bool = False


@dataclass(frozen=True)
class Observation:
    objects: tuple
    n_points: int

    def __len__(self):
        return len(self.objects)


def observe(scene: Scene, model: ObservationModel = ObservationModel(), seed: int = 0,
            catalog: Sequence[ObjectClass] | None = None) -> Observation:
    """Per-object partial point clouds of a scene with true class labels."""
    catalog = default_catalog() if catalog is None else catalog
    if model.n_points < 1:
        raise ValueError("n_points must be at least 1")
    rng = np.random.default_rng(seed)
    views = None if model.views is None else np.asarray(model.views, float)
    out = []
    for obj in scene.objects:
        cls = catalog[obj.class_id]
        pts, normals = default_body_cloud(cls, model.n_points)
        keep = np.arange(len(pts))
        if views is not None:
            wn = normals @ obj.pose.rotation.T
            keep = keep[np.any(wn @ views.T > 0, axis=1)]
        world = obj.pose.apply(pts[keep])
        if model.noise_sigma > 0:
            world = world + rng.normal(0.0, model.noise_sigma, world.shape)
        frac = 1.0 - len(keep) / len(pts)
        out.append(ObservedObject(obj.class_id, PointCloud(world, obj.index, keep), frac, len(keep) == 0))
    return Observation(tuple(out), model.n_points)


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetEntry:
    id: int
    seed: int
    target: Scene
    initial: Scene
    graph: DependencyGraph


def make_entry(entry_id: int, spec: GenSpec, catalog=None) -> DatasetEntry:
    from .depgraph import oracle_graph

    target = generate_structure(spec, catalog)
    initial = scatter_initial(target, spec.seed + 1, catalog)
    return DatasetEntry(entry_id, spec.seed, target, initial, oracle_graph(target, catalog))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True) + "\n")


def save_dataset(entries: Sequence[DatasetEntry], path: str | Path, gen_spec: dict | None = None) -> dict:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "scenes").mkdir(exist_ok=True)
    manifest_entries = []
    for e in entries:
        stem = f"scenes/{e.id:06d}"
        files = {"target_file": f"{stem}_target.json", "initial_file": f"{stem}_initial.json",
                 "graph_file": f"{stem}_graph.json"}
        _write_json(root / files["target_file"], e.target.to_json())
        _write_json(root / files["initial_file"], e.initial.to_json())
        _write_json(root / files["graph_file"], e.graph.to_json())
        manifest_entries.append({"id": e.id, "seed": e.seed, **files})
    manifest = {"version": DATASET_VERSION, "count": len(entries), "gen_spec": gen_spec or {},
                "entries": manifest_entries}
    _write_json(root / "manifest.json", manifest)
    return manifest


def _read_json(path: Path, what: str):
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"{what}: cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{what}: malformed JSON in {path} at offset {exc.pos} "
                           f"(line {exc.lineno}, column {exc.colno}): {exc.msg}") from None


def load_manifest(path: str | Path) -> dict:
    manifest = _read_json(Path(path) / "manifest.json", "manifest")
    if manifest.get("count") != len(manifest.get("entries", [])):
        raise DatasetError("manifest: count does not match number of entries")
    return manifest


def load_entry(root: str | Path, meta: dict) -> DatasetEntry:
    root = Path(root)
    what = f"scene {meta['id']}"
    try:
        target = Scene.from_json(_read_json(root / meta["target_file"], what))
        initial = Scene.from_json(_read_json(root / meta["initial_file"], what))
        graph = DependencyGraph.from_json(_read_json(root / meta["graph_file"], what))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{what}: invalid content: {exc}") from None
    return DatasetEntry(int(meta["id"]), int(meta["seed"]), target, initial, graph)


def load_dataset(path: str | Path) -> list[DatasetEntry]:
    manifest = load_manifest(path)
    return [load_entry(path, meta) for meta in manifest["entries"]]
