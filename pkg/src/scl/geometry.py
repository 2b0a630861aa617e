"""Rigid-body geometry: quaternions, poses, convex object primitives, sampling,
collision, plane fitting, contact polygons and quasi-static support tests.

Conventions
-----------
* Quaternions are ``(w, x, y, z)`` numpy arrays.
* Gravity points along ``-UP``; ``UP`` is +z.
* Every mesh is stored in its body frame with the volume centroid at the origin,
  so a pose translation is the world position of the object's center of mass.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import ConvexHull, HalfspaceIntersection

UP = np.array([0.0, 0.0, 1.0])
CONTACT_TOL = 1e-3
STABILITY_MARGIN = 1e-3
MIN_FOOTPRINT_AREA = 4e-4

_UNIT_TOL = 1e-6


class GeometryError(ValueError):
    """Invalid argument to a geometric operation."""


class DegenerateGeometryError(GeometryError):
    """Input points or meshes do not span enough dimensions."""


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_mul(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise GeometryError(f"cannot normalize quaternion {q!r}")
    return q / n


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Representative of ``{q, -q}`` with the first nonzero component positive."""
    for c in q:
        if abs(c) > 1e-15:
            return q if c > 0 else -q
    return q


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    s = math.sin(angle / 2.0)
    return np.array([math.cos(angle / 2.0), *(axis * s)])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    # Shepperd's method; picks the numerically largest pivot.
    tr = np.trace(m)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_between(u, v) -> np.ndarray:
    """Shortest-arc rotation taking direction ``u`` onto direction ``v``."""
    u = np.asarray(u, float) / np.linalg.norm(u)
    v = np.asarray(v, float) / np.linalg.norm(v)
    d = float(np.dot(u, v))
    if d < -1.0 + 1e-12:
        axis = np.cross(u, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(u, [0.0, 1.0, 0.0])
        return quat_from_axis_angle(axis, math.pi)
    c = np.cross(u, v)
    return quat_normalize([1.0 + d, *c])


def _check_unit(q: np.ndarray, name: str) -> None:
    if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > _UNIT_TOL:
        raise GeometryError(f"{name} must be a unit quaternion, got {q!r}")


def quat_distance(q1, q2) -> float:
    """Normalized antipodal-invariant quaternion distance in [0, 1].

    ``min(|q1 + q2|, |q1 - q2|) / sqrt(2)``; the normalizer is the largest value
    the minimum can take over unit quaternions.
    """
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    _check_unit(q1, "q1")
    _check_unit(q2, "q2")
    d = min(np.linalg.norm(q1 + q2), np.linalg.norm(q1 - q2))
    return float(min(d / math.sqrt(2.0), 1.0))


def rotation_angle(q: np.ndarray) -> float:
    """Rotation magnitude ``2 acos(|w|)`` in [0, pi]."""
    return 2.0 * math.acos(min(1.0, abs(float(q[0]))))


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _unit_fixed_point(q: np.ndarray) -> np.ndarray:
    # leave already-unit quaternions untouched so that serialized poses reload bit-exactly
    if abs(np.linalg.norm(q) - 1.0) <= 8 * np.finfo(float).eps:
        return q
    return q / np.linalg.norm(q)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R(q) x + t``."""

    t: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise GeometryError(f"pose translation must be a finite 3-vector, got {t!r}")
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise GeometryError(f"pose rotation must be a quaternion, got {q!r}")
        n = np.linalg.norm(q)
        if abs(n - 1.0) > _UNIT_TOL:
            raise GeometryError(f"pose quaternion is not unit norm (|q|={n})")
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "q", _frozen(_unit_fixed_point(q)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, rot: np.ndarray, t) -> "Pose":
        return cls(np.asarray(t, float), quat_from_matrix(rot))

    @functools.cached_property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.t + self.rotation @ other.t, quat_normalize(quat_mul(self.q, other.q)))

    __matmul__ = compose

    def inverse(self) -> "Pose":
        qi = quat_conj(self.q)
        return Pose(-(quat_to_matrix(qi) @ self.t), qi)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, float) @ self.rotation.T + self.t

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (np.allclose(self.t, other.t, atol=atol)
                and quat_distance(self.q, other.q) <= atol)

    def to_json(self) -> dict:
        return {"t": [float(v) for v in self.t], "q": [float(v) for v in self.q]}

    def __repr__(self):
        return f"Pose(t={self.t.tolist()}, q={self.q.tolist()})"


def yaw_quat(theta: float) -> np.ndarray:
    return quat_from_axis_angle(UP, theta)


# ---------------------------------------------------------------------------
# point clouds and polygons
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    source_object: int | None = None
    # Indices into the class's default sample; lets registration use known correspondences.
    sample_index: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))
        if self.sample_index is not None:
            idx = np.asarray(self.sample_index, dtype=np.int64)
            idx.setflags(write=False)
            object.__setattr__(self, "sample_index", idx)

    def __len__(self):
        return len(self.points)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


def convex_hull_2d(points) -> np.ndarray:
    """Monotone-chain hull; counter-clockwise, collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, float).reshape(-1, 2).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=float).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 1e-18:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 1e-18:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(y[:-1], x[1:]) + x[-1] * y[0] - y[-1] * x[0])


def clip_halfplane(poly: np.ndarray, a: float, b: float, c: float) -> np.ndarray:
    """Keep the part of a convex polygon where ``a*x + b*y + c <= 0``."""
    if len(poly) == 0:
        return poly
    vals = poly[:, 0] * a + poly[:, 1] * b + c
    if np.all(vals <= 0):
        return poly
    if np.all(vals > 0):
        return poly[:0]
    out = []
    n = len(poly)
    for k in range(n):
        p, vp = poly[k], vals[k]
        q, vq = poly[(k + 1) % n], vals[(k + 1) % n]
        if vp <= 0:
            out.append(p)
        if (vp <= 0) != (vq <= 0):
            s = vp / (vp - vq)
            out.append(p + s * (q - p))
    return np.array(out).reshape(-1, 2)


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Intersection of two convex CCW polygons (Sutherland-Hodgman)."""
    out = subject
    n = len(clip)
    for k in range(n):
        if len(out) == 0:
            break
        p, q = clip[k], clip[(k + 1) % n]
        # inside is left of p->q: cross(q-p, x-p) >= 0  <=>  -(dy)*x + dx*y + ... <= 0 negated
        dx, dy = q[0] - p[0], q[1] - p[1]
        out = clip_halfplane(out, dy, -dx, -(dy * p[0] - dx * p[1]))
    return out


@dataclass(frozen=True, eq=False)
class SupportPolygon:
    """Convex support region in the horizontal plane, CCW vertices."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if len(v) >= 3 and polygon_area(v) < 0:
            v = v[::-1]
        object.__setattr__(self, "vertices", _frozen(v))

    @classmethod
    def from_points(cls, points) -> "SupportPolygon":
        return cls(convex_hull_2d(points))

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    def margin_distance(self, p) -> float:
        """Smallest signed inward distance from ``p`` to the polygon's edge lines.

        Positive inside, negative outside; ``-inf`` for polygons without area.
        """
        v = self.vertices
        if len(v) < 3 or self.area <= 0:
            return -math.inf
        e = np.roll(v, -1, axis=0) - v
        lens = np.linalg.norm(e, axis=1)
        keep = lens > 0
        e, vv, lens = e[keep], v[keep], lens[keep]
        d = (e[:, 0] * (p[1] - vv[:, 1]) - e[:, 1] * (p[0] - vv[:, 0])) / lens
        return float(d.min())


# ---------------------------------------------------------------------------
# object classes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Face:
    normal: np.ndarray      # outward unit normal, body frame
    offset: float           # normal . x = offset on the face
    polygon: np.ndarray     # (k, 3) ordered boundary vertices


def _mesh_volume_centroid(vertices: np.ndarray, faces: np.ndarray) -> tuple[float, np.ndarray]:
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    vols = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
    vol = vols.sum()
    if abs(vol) < 1e-15:
        return 0.0, np.zeros(3)
    cen = ((a + b + c) / 4.0 * vols[:, None]).sum(axis=0) / vol
    return float(vol), cen


@dataclass(frozen=True, eq=False)
class ObjectClass:
    """A convex rigid primitive with its placement whitelists and symmetry group."""

    id: int
    name: str
    vertices: np.ndarray
    faces: np.ndarray
    stable_orientations: np.ndarray
    top_orientations: np.ndarray
    symmetries: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.0, 0.0, 0.0]]))

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(np.asarray(self.vertices, float).reshape(-1, 3)))
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        f.setflags(write=False)
        object.__setattr__(self, "faces", f)
        for name in ("stable_orientations", "top_orientations", "symmetries"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), float).reshape(-1, 4)))

    def __hash__(self):
        return id(self)

    @functools.cached_property
    def volume(self) -> float:
        return _mesh_volume_centroid(self.vertices, self.faces)[0]

    @functools.cached_property
    def centroid(self) -> np.ndarray:
        return _mesh_volume_centroid(self.vertices, self.faces)[1]

    @functools.cached_property
    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @functools.cached_property
    def triangle_normals(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        n = np.cross(b - a, c - a)
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(ln > 0, ln, 1.0)

    @functools.cached_property
    def polygon_faces(self) -> tuple[Face, ...]:
        """Planar faces obtained by merging coplanar triangles."""
        groups: dict = {}
        for tri, n in zip(self.faces, self.triangle_normals):
            off = float(np.dot(n, self.vertices[tri[0]]))
            key = tuple(np.round(np.append(n, off), 6))
            groups.setdefault(key, (n, off, set()))[2].update(tri.tolist())
        out = []
        for n, off, vids in groups.values():
            pts = self.vertices[sorted(vids)]
            # order boundary CCW seen from outside
            u = np.cross(n, [1.0, 0.0, 0.0])
            if np.linalg.norm(u) < 1e-6:
                u = np.cross(n, [0.0, 1.0, 0.0])
            u /= np.linalg.norm(u)
            w = np.cross(n, u)
            c = pts.mean(axis=0)
            ang = np.arctan2((pts - c) @ w, (pts - c) @ u)
            out.append(Face(n, off, pts[np.argsort(ang)]))
        return tuple(out)

    def world_vertices(self, pose: Pose) -> np.ndarray:
        return pose.apply(self.vertices)

    def com(self, pose: Pose) -> np.ndarray:
        return pose.apply(self.centroid[None])[0]

    def resting_pose(self, q: np.ndarray, xy, z_ground: float = 0.0) -> Pose:
        """Pose with orientation ``q`` whose lowest vertex touches ``z = z_ground``."""
        verts = self.vertices @ quat_to_matrix(q).T
        return Pose(np.array([xy[0], xy[1], z_ground - verts[:, 2].min()]), q)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "vertices": self.vertices.tolist(),
            "faces": self.faces.tolist(),
            "stable_orientations": self.stable_orientations.tolist(),
            "top_orientations": self.top_orientations.tolist(),
            "symmetries": self.symmetries.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ObjectClass":
        return cls(
            id=int(d["id"]),
            name=str(d["name"]),
            vertices=d["vertices"],
            faces=d["faces"],
            stable_orientations=d.get("stable_orientations", []),
            top_orientations=d.get("top_orientations", []),
            symmetries=d.get("symmetries", [[1.0, 0.0, 0.0, 0.0]]),
        )


def convex_mesh(points) -> tuple[np.ndarray, np.ndarray]:
    """Outward-oriented triangulated hull of ``points``, recentred on its volume centroid."""
    pts = np.asarray(points, dtype=float)
    try:
        hull = ConvexHull(pts)
    except Exception as exc:  # qhull raises its own error type
        raise DegenerateGeometryError(f"mesh has no volume: {exc}") from None
    faces = hull.simplices.copy()
    # orient each triangle so its normal matches the hull facet normal
    for k, (tri, eq) in enumerate(zip(faces, hull.equations)):
        a, b, c = pts[tri]
        if np.dot(np.cross(b - a, c - a), eq[:3]) < 0:
            faces[k] = tri[[0, 2, 1]]
    used = np.unique(faces)
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = pts[used]
    faces = remap[faces]
    _, cen = _mesh_volume_centroid(verts, faces)
    return verts - cen, faces


def box_points(dx: float, dy: float, dz: float) -> np.ndarray:
    return np.array(list(itertools.product([-dx / 2, dx / 2], [-dy / 2, dy / 2], [-dz / 2, dz / 2])))


def cylinder_points(radius: float, height: float, sides: int = 24) -> np.ndarray:
    ang = np.arange(sides) * 2 * math.pi / sides
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    return np.vstack([np.column_stack([ring, np.full(sides, -height / 2)]),
                      np.column_stack([ring, np.full(sides, height / 2)])])


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_body_surface(cls: ObjectClass, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform surface samples in the body frame and their outward normals."""
    if n < 1:
        raise GeometryError("sample count must be at least 1")
    areas = cls.triangle_areas
    total = areas.sum()
    if not np.isfinite(total) or total <= 0 or cls.volume <= 0:
        raise GeometryError(f"class {cls.name!r} has a degenerate mesh")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = cls.vertices
    a, b, c = v[cls.faces[tri, 0]], v[cls.faces[tri, 1]], v[cls.faces[tri, 2]]
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return pts, cls.triangle_normals[tri]


def sample_surface(cls: ObjectClass, pose: Pose, n: int, seed: int = 0) -> PointCloud:
    pts, _ = sample_body_surface(cls, n, seed)
    return PointCloud(pose.apply(pts), sample_index=np.arange(n))


# ---------------------------------------------------------------------------
# collision
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _ErodedHull:
    vertices: np.ndarray
    normals: np.ndarray
    edges: np.ndarray
    radius: float


def _unique_directions(dirs: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    out: list[np.ndarray] = []
    for d in dirs:
        n = np.linalg.norm(d)
        if n < tol:
            continue
        d = d / n
        if not any(abs(abs(float(np.dot(d, e))) - 1.0) < 1e-9 for e in out):
            out.append(d)
    return np.array(out).reshape(-1, 3)


@functools.lru_cache(maxsize=None)
def _eroded_hull(cls: ObjectClass, tol: float) -> _ErodedHull:
    faces = cls.polygon_faces
    if tol > 0:
        hs = np.array([[*f.normal, -(f.offset - tol)] for f in faces])
        try:
            verts = HalfspaceIntersection(hs, cls.centroid.copy()).intersections
        except Exception as exc:
            raise GeometryError(f"tolerance {tol} erodes class {cls.name!r} away") from exc
    else:
        verts = np.array(cls.vertices)
    hull = ConvexHull(verts)
    normals = _unique_directions(hull.equations[:, :3])
    edge_set = []
    for simplex in hull.simplices:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            edge_set.append(verts[simplex[b]] - verts[simplex[a]])
    # only edges lying on true face boundaries matter, but extra axes are harmless
    edges = _unique_directions(np.array(edge_set))
    radius = float(np.linalg.norm(verts - cls.centroid, axis=1).max())
    return _ErodedHull(verts, normals, edges, radius)


def collide(a: tuple[ObjectClass, Pose], b: tuple[ObjectClass, Pose], tol: float = CONTACT_TOL) -> bool:
    """True iff the two convex shapes, each shrunk inward by ``tol``, intersect.

    Separating-axis test over face normals and edge cross products of the
    eroded hulls.
    """
    (ca, pa), (cb, pb) = a, b
    ha, hb = _eroded_hull(ca, float(tol)), _eroded_hull(cb, float(tol))
    ctr_a, ctr_b = ca.com(pa), cb.com(pb)
    if np.linalg.norm(ctr_a - ctr_b) > ha.radius + hb.radius:
        return False
    va, vb = pa.apply(ha.vertices), pb.apply(hb.vertices)
    if np.any(va.max(0) < vb.min(0)) or np.any(vb.max(0) < va.min(0)):
        return False
    na, nb = ha.normals @ pa.rotation.T, hb.normals @ pb.rotation.T
    ea, eb = ha.edges @ pa.rotation.T, hb.edges @ pb.rotation.T
    cross = np.cross(ea[:, None, :], eb[None, :, :]).reshape(-1, 3)
    ln = np.linalg.norm(cross, axis=1)
    cross = cross[ln > 1e-9] / ln[ln > 1e-9, None]
    axes = np.vstack([na, nb, cross])
    pa_proj, pb_proj = va @ axes.T, vb @ axes.T
    sep = (pa_proj.max(0) < pb_proj.min(0) - 1e-12) | (pb_proj.max(0) < pa_proj.min(0) - 1e-12)
    return not bool(np.any(sep))


# ---------------------------------------------------------------------------
# plane fitting
# ---------------------------------------------------------------------------

def fit_plane(points) -> tuple[np.ndarray, float]:
    """Least-squares plane ``normal . x = offset`` through a point set."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, float).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateGeometryError(f"plane fit needs at least 3 points, got {len(pts)}")
    c = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - c, full_matrices=False)
    if s[0] <= 0 or s[1] <= 1e-9 * s[0]:
        raise DegenerateGeometryError("plane fit points are collinear")
    normal = vt[2]
    if normal[2] < 0 or (abs(normal[2]) < 1e-12 and normal[np.argmax(np.abs(normal))] < 0):
        normal = -normal
    return normal, float(np.dot(normal, c))


# ---------------------------------------------------------------------------
# contacts and support
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _WorldFace:
    normal: np.ndarray
    offset: float
    poly2d: np.ndarray  # CCW projection onto the horizontal plane
    zmin: float
    zmax: float


@functools.lru_cache(maxsize=8192)
def _world_faces(cls: ObjectClass, pose: Pose, downward: bool, min_nz: float = 1e-6) -> list[_WorldFace]:
    out = []
    r = pose.rotation
    for f in cls.polygon_faces:
        n = r @ f.normal
        if (n[2] < -min_nz) if downward else (n[2] > min_nz):
            poly = pose.apply(f.polygon)
            p2 = poly[:, :2]
            if polygon_area(p2) < 0:
                p2 = p2[::-1]
            out.append(_WorldFace(n, float(np.dot(n, poly[0])), p2, poly[:, 2].min(), poly[:, 2].max()))
    return out


def _plane_z_coeffs(face: _WorldFace) -> tuple[float, float, float]:
    # z = c0 + cx x + cy y on the face plane
    n = face.normal
    return face.offset / n[2], -n[0] / n[2], -n[1] / n[2]


def _face_pair_gap(upper: _WorldFace, lower: _WorldFace | None):
    """Overlap polygon and affine gap coefficients between a downward face and an upward face.

    ``lower=None`` stands for the ground plane ``z = 0``.
    """
    if lower is None:
        region = upper.poly2d
        l0 = lx = ly = 0.0
    else:
        if upper.zmin - lower.zmax > 0.05:
            return None
        region = clip_convex(upper.poly2d, lower.poly2d)
        l0, lx, ly = _plane_z_coeffs(lower)
    if len(region) < 3:
        return None
    u0, ux, uy = _plane_z_coeffs(upper)
    return region, (u0 - l0, ux - lx, uy - ly)


def contact_polygons(upper: tuple[ObjectClass, Pose], lower: tuple[ObjectClass, Pose] | None,
                     tol: float = CONTACT_TOL) -> list[np.ndarray]:
    """Horizontal regions where ``upper`` rests on ``lower`` (or the ground if None).

    A region is the part of the xy-overlap of a downward face of ``upper`` and
    an upward face of ``lower`` on which the vertical gap lies within ``tol``.
    """
    cu, pu = upper
    down = _world_faces(cu, pu, downward=True)
    if lower is None:
        ups = [None]
    else:
        cl, pl = lower
        ups = _world_faces(cl, pl, downward=False)
        lo_top = max((f.zmax for f in ups), default=-math.inf)
        if min((f.zmin for f in down), default=math.inf) - lo_top > tol:
            return []
    out = []
    for fu in down:
        for fl in ups:
            res = _face_pair_gap(fu, fl)
            if res is None:
                continue
            region, (g0, gx, gy) = res
            region = clip_halfplane(region, gx, gy, g0 - tol)
            region = clip_halfplane(region, -gx, -gy, -g0 - tol)
            if len(region) >= 3 and polygon_area(region) > 1e-12:
                out.append(region)
    return out


def vertical_gap(upper: tuple[ObjectClass, Pose], lower: tuple[ObjectClass, Pose] | None) -> float:
    """Minimum vertical clearance between ``upper``'s underside and ``lower``'s top.

    Returns ``inf`` when the shapes do not overlap in the horizontal plane.
    Negative values mean the shapes interpenetrate along the vertical.
    """
    cu, pu = upper
    down = _world_faces(cu, pu, downward=True)
    ups = [None] if lower is None else _world_faces(lower[0], lower[1], downward=False)
    best = math.inf
    for fu in down:
        for fl in ups:
            if fl is not None:
                region = clip_convex(fu.poly2d, fl.poly2d)
                if len(region) < 3 or polygon_area(region) <= 1e-12:
                    continue
                l0, lx, ly = _plane_z_coeffs(fl)
            else:
                region, l0, lx, ly = fu.poly2d, 0.0, 0.0, 0.0
            u0, ux, uy = _plane_z_coeffs(fu)
            g = (u0 - l0) + (ux - lx) * region[:, 0] + (uy - ly) * region[:, 1]
            best = min(best, float(g.min()))
    return best


def stable_on(obj: tuple[ObjectClass, Pose], supports: SupportPolygon,
              margin: float = STABILITY_MARGIN) -> bool:
    """Center of mass projects strictly inside the support polygon shrunk by ``margin``."""
    cls, pose = obj
    com = cls.com(pose)
    return supports.margin_distance(com[:2]) > margin


def support_polygon(regions: Iterable[np.ndarray]) -> SupportPolygon:
    pts = [r for r in regions if len(r)]
    if not pts:
        return SupportPolygon(np.zeros((0, 2)))
    return SupportPolygon.from_points(np.vstack(pts))


def top_face(cls: ObjectClass, pose: Pose, max_tilt_deg: float = 10.0) -> _WorldFace | None:
    """Highest upward face within ``max_tilt_deg`` of horizontal, if any."""
    cos_lim = math.cos(math.radians(max_tilt_deg))
    cands = [f for f in _world_faces(cls, pose, downward=False) if f.normal[2] >= cos_lim]
    if not cands:
        return None
    return max(cands, key=lambda f: f.zmax)


def face_area(face: _WorldFace) -> float:
    return polygon_area(face.poly2d) / max(face.normal[2], 1e-12)


def sample_face_points(face: _WorldFace, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points on a (projected) face, lifted back onto the face plane."""
    poly = face.poly2d
    tris = [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]
    areas = np.array([abs(polygon_area(np.array(t))) for t in tris])
    idx = rng.choice(len(tris), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a = np.array([tris[k][0] for k in idx])
    b = np.array([tris[k][1] for k in idx])
    c = np.array([tris[k][2] for k in idx])
    xy = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    c0, cx, cy = _plane_z_coeffs(face)
    return np.column_stack([xy, c0 + cx * xy[:, 0] + cy * xy[:, 1]])


def symmetry_reduced(cls: ObjectClass, q: np.ndarray) -> Sequence[np.ndarray]:
    """All orientations geometrically identical to ``q`` under the class symmetry group."""
    return [quat_mul(q, g) for g in cls.symmetries]


def symmetric_quat_distance(cls: ObjectClass, q1, q2) -> float:
    return min(quat_distance(q1, g) for g in symmetry_reduced(cls, np.asarray(q2, float)))
