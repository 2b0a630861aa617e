"""The default set of eight primitives and their JSON (de)serialization."""

from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import (
    ObjectClass,
    box_points,
    convex_mesh,
    cylinder_points,
    quat_between,
    quat_canonical,
    quat_from_axis_angle,
    quat_mul,
    quat_to_matrix,
)

NUM_CLASSES = 8
CATALOG_RESOURCE = "catalog.json"

# (name, builder, stable bottom normals, top-only bottom normals), body frame
_DOWN = np.array([0.0, 0.0, -1.0])


def _pyramid_points(base: float, height: float) -> np.ndarray:
    b = base / 2
    return np.array([[-b, -b, 0.0], [b, -b, 0.0], [b, b, 0.0], [-b, b, 0.0], [0.0, 0.0, height]])


def _prism_points(base: float, height: float, length: float) -> np.ndarray:
    b, l2 = base / 2, length / 2
    tri = [(-b, 0.0), (b, 0.0), (0.0, height)]
    return np.array([[x, y, z] for (x, z) in tri for y in (-l2, l2)])


def _orientation_for_bottom(normal) -> np.ndarray:
    """Rotation that turns the face with outward ``normal`` to face straight down."""
    return quat_canonical(quat_between(normal, _DOWN))


def _symmetry_group(vertices: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Proper rotations about the centroid mapping the vertex set onto itself."""
    cands = []
    # octahedral group generated by quarter turns, combined with 15-degree yaw steps
    quarter = [quat_from_axis_angle(ax, k * math.pi / 2) for ax in np.eye(3) for k in range(4)]
    octa = [np.array([1.0, 0, 0, 0])]
    frontier = list(octa)
    while frontier:
        nxt = []
        for a in frontier:
            for b in quarter:
                c = quat_canonical(quat_mul(a, b))
                if not any(np.allclose(c, o, atol=1e-9) for o in octa):
                    octa.append(c)
                    nxt.append(c)
        frontier = nxt
    for k in range(24):
        z = quat_from_axis_angle([0, 0, 1], k * math.pi / 12)
        for o in octa:
            cands.append(quat_canonical(quat_mul(z, o)))
    scale = np.abs(vertices).max()
    found: list[np.ndarray] = []
    for q in cands:
        if any(np.allclose(q, f, atol=1e-9) for f in found):
            continue
        moved = vertices @ quat_to_matrix(q).T
        d = np.linalg.norm(moved[:, None, :] - vertices[None, :, :], axis=2).min(axis=1)
        if np.all(d < tol * scale + 1e-12):
            found.append(q)
    return np.array(found)


def _make(cid: int, name: str, points: np.ndarray, stable: list, top: list) -> ObjectClass:
    verts, faces = convex_mesh(points)
    return ObjectClass(
        id=cid,
        name=name,
        vertices=verts,
        faces=faces,
        stable_orientations=[_orientation_for_bottom(n) for n in stable],
        top_orientations=[_orientation_for_bottom(n) for n in top],
        symmetries=_symmetry_group(verts),
    )


def build_default_catalog() -> list[ObjectClass]:
    """Construct the eight primitives from their dimensions (meters)."""
    down, side_x, side_y = [0, 0, -1], [1, 0, 0], [0, 1, 0]
    pyr_side = [0.0, -2.0, 1.0]           # outward normal of a triangular pyramid face
    return [
        _make(0, "small_cuboid", box_points(0.03, 0.03, 0.06), [down, side_x], []),
        _make(1, "cube", box_points(0.03, 0.03, 0.03), [down], []),
        _make(2, "long_plank", box_points(0.03, 0.03, 0.12), [side_x], [down]),
        _make(3, "wide_slab", box_points(0.06, 0.06, 0.02), [down], [side_x]),
        _make(4, "cylinder", cylinder_points(0.015, 0.06, 24), [down], []),
        _make(5, "square_pyramid", _pyramid_points(0.04, 0.04), [pyr_side], [down]),
        _make(6, "triangular_prism", _prism_points(0.04, 0.04, 0.04), [side_y], [down]),
        _make(7, "tall_cuboid", box_points(0.04, 0.04, 0.08), [down, side_x], []),
    ]


def catalog_to_json(classes: list[ObjectClass]) -> dict:
    return {"classes": [c.to_json() for c in classes]}


def catalog_from_json(doc: dict) -> list[ObjectClass]:
    classes = [ObjectClass.from_json(c) for c in doc["classes"]]
    classes.sort(key=lambda c: c.id)
    if [c.id for c in classes] != list(range(len(classes))):
        raise ValueError("catalog class ids must be contiguous from 0")
    return classes


_DEFAULT: list[ObjectClass] | None = None


def default_catalog() -> list[ObjectClass]:
    """The shipped catalog, loaded once per process."""
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("scl").joinpath(CATALOG_RESOURCE).read_text()
        _DEFAULT = catalog_from_json(json.loads(text))
    return _DEFAULT


def load_catalog(path: str | Path | None = None) -> list[ObjectClass]:
    if path is None:
        return default_catalog()
    with open(path) as fh:
        return catalog_from_json(json.load(fh))


def write_catalog(path: str | Path, classes: list[ObjectClass] | None = None) -> None:
    classes = build_default_catalog() if classes is None else classes
    Path(path).write_text(json.dumps(catalog_to_json(classes), indent=1) + "\n")


if __name__ == "__main__":
    write_catalog(Path(__file__).with_name(CATALOG_RESOURCE))
