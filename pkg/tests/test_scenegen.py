import json
import math
from collections import Counter

import numpy as np
import pytest
from scipy.spatial import cKDTree

from scl.depgraph import contacts_below, is_supported, oracle_graph
from scl.geometry import CONTACT_TOL, collide, quat_to_matrix, sample_body_surface
from scl.scenegen import (
    DatasetError,
    GenerationError,
    GenSpec,
    ObservationModel,
    Scene,
    SceneObject,
    generate_structure,
    load_dataset,
    make_entry,
    observe,
    save_dataset,
    scatter_initial,
)


def _pairwise_free(scene, catalog):
    bodies = scene.bodies(catalog)
    return all(not collide(a, b, CONTACT_TOL) for k, a in enumerate(bodies) for b in bodies[k + 1:])


def test_single_level_scene(catalog):
    scene = generate_structure(GenSpec((5,), seed=3), catalog)
    assert 1 <= len(scene) <= 5
    assert all(o.level == 0 for o in scene.objects)
    assert _pairwise_free(scene, catalog)
    for cls, pose in scene.bodies(catalog):
        assert cls.world_vertices(pose)[:, 2].min() == pytest.approx(0.0, abs=1e-6)


def test_supporters_are_one_level_down(catalog):
    for seed in range(20):
        scene = generate_structure(GenSpec((4, 3, 2), seed=seed), catalog)
        assert len(scene) <= 9
        g = oracle_graph(scene, catalog)
        for o in scene.objects:
            deps = g.dependencies(o.index)
            if o.level == 0:
                assert deps == []
            else:
                assert deps and all(scene.objects[j].level == o.level - 1 for j in deps)


def test_indices_contiguous_and_within_bounds(catalog):
    for seed in range(10):
        scene = generate_structure(GenSpec.default(3, seed), catalog)
        assert [o.index for o in scene.objects] == list(range(len(scene)))
        for cls, pose in scene.bodies(catalog):
            assert scene.bounds.contains(cls.world_vertices(pose))


def test_mean_object_count(catalog):
    counts = [len(generate_structure(GenSpec.default(3, seed), catalog)) for seed in range(200)]
    assert abs(np.mean(counts) - 9) <= 2


def test_static_soundness_in_level_order(catalog):
    for seed in range(20):
        scene = generate_structure(GenSpec.default(3, seed), catalog)
        order = sorted(scene.objects, key=lambda o: (o.level, o.index))
        bodies = [None] * len(scene)
        for o in order:
            bodies[o.index] = (catalog[o.class_id], o.pose)
            contacts = contacts_below(o.index, bodies)
            assert is_supported(bodies[o.index], contacts), (seed, o.index)


def _bottom_normal(q):
    return quat_to_matrix(q).T @ np.array([0.0, 0.0, -1.0])


def test_orientation_whitelist(catalog):
    for seed in range(20):
        spec = GenSpec.default(3, seed)
        scene = generate_structure(spec, catalog)
        for o in scene.objects:
            cls = catalog[o.class_id]
            allowed = list(cls.stable_orientations)
            if o.level == spec.levels - 1:
                allowed += list(cls.top_orientations)
            d = _bottom_normal(o.pose.q)
            angles = [math.degrees(math.acos(np.clip(d @ _bottom_normal(q), -1, 1))) for q in allowed]
            assert min(angles) <= 10.0 + 1e-6


def test_generation_is_pure(catalog):
    a = generate_structure(GenSpec.default(3, 42), catalog)
    b = generate_structure(GenSpec.default(3, 42), catalog)
    assert a.to_json() == b.to_json()


def test_unsatisfiable_spec_raises(catalog):
    from scl.scenegen import Bounds
    tiny = Bounds((0.0, 0.0, 0.0), (0.01, 0.01, 0.5))
    with pytest.raises(GenerationError):
        generate_structure(GenSpec((3,), seed=0, bounds=tiny), catalog)


# ---- initial scenes --------------------------------------------------------

def test_scatter_initial(catalog):
    target = generate_structure(GenSpec.default(3, 9), catalog)
    initial = scatter_initial(target, 10, catalog)
    assert Counter(initial.class_ids()) == Counter(target.class_ids())
    assert all(o.level == 0 for o in initial.objects)
    assert _pairwise_free(initial, catalog)
    again = scatter_initial(target, 10, catalog)
    assert initial.to_json() == again.to_json()


# ---- observation -----------------------------------------------------------

def test_observe_identity_points_on_surface(catalog):
    scene = generate_structure(GenSpec.default(3, 1), catalog)
    obs = observe(scene, ObservationModel(views=None, n_points=128), seed=0, catalog=catalog)
    for o, ob in zip(scene.objects, obs.objects):
        cls = catalog[o.class_id]
        local = o.pose.inverse().apply(ob.cloud.points)
        # a point is on the surface of a convex body when it lies on a face plane and inside all others
        signed = np.stack([local @ f.normal - f.offset for f in cls.polygon_faces], axis=1)
        assert np.all(signed.max(axis=1) == pytest.approx(0.0, abs=1e-12))
        assert len(ob.cloud) == 128 and not ob.fully_occluded


def test_observe_culls_cube_bottom(catalog):
    cube = catalog[1]
    scene = Scene((SceneObject(0, 1, cube.resting_pose(cube.stable_orientations[0], (0, 0)), 0),))
    model = ObservationModel(views=((1, 0, 0), (0, 1, 0), (0, 0, 1)), n_points=512)
    ob = observe(scene, model, seed=0, catalog=catalog).objects[0]
    z = ob.cloud.points[:, 2]
    assert z.min() > 1e-6
    assert 0 < ob.occluded_fraction < 1


def test_observe_noise_distance(catalog):
    cube = catalog[1]
    pose = cube.resting_pose(cube.stable_orientations[0], (0, 0))
    scene = Scene((SceneObject(0, 1, pose, 0),))
    ob = observe(scene, ObservationModel(views=None, n_points=4096, noise_sigma=1e-3), seed=2,
                 catalog=catalog).objects[0]
    dense, _ = sample_body_surface(cube, 200_000, seed=99)
    dist, _ = cKDTree(pose.apply(dense)).query(ob.cloud.points)
    assert dist.mean() < 2e-3


# ---- dataset I/O -----------------------------------------------------------

def test_dataset_round_trip(tmp_path, catalog):
    entries = [make_entry(k, GenSpec.default(3, 100 + k), catalog) for k in range(10)]
    manifest = save_dataset(entries, tmp_path, {"levels": 3})
    assert manifest["count"] == 10
    assert [e["seed"] for e in manifest["entries"]] == [100 + k for k in range(10)]
    loaded = load_dataset(tmp_path)
    for a, b in zip(entries, loaded):
        assert a.target.same_as(b.target) and a.initial.same_as(b.initial)
        for oa, ob in zip(a.target.objects, b.target.objects):
            assert np.array_equal(oa.pose.t, ob.pose.t) and np.array_equal(oa.pose.q, ob.pose.q)
        assert a.graph == b.graph


def test_dataset_truncated_file_names_scene(tmp_path, catalog):
    entries = [make_entry(k, GenSpec.default(2, k), catalog) for k in range(3)]
    save_dataset(entries, tmp_path)
    path = tmp_path / "scenes" / "000002_target.json"
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(DatasetError, match=r"scene 2.*offset \d+"):
        load_dataset(tmp_path)


def test_dataset_files_are_sorted_json(tmp_path, catalog):
    save_dataset([make_entry(0, GenSpec.default(3, 0), catalog)], tmp_path)
    text = (tmp_path / "scenes" / "000000_target.json").read_text()
    d = json.loads(text)
    assert set(d) >= {"bounds", "objects"}
    assert set(d["objects"][0]) >= {"index", "class_id", "t", "q", "level"}


@pytest.mark.parametrize("total,levels", [(8, 3), (10, 3), (15, 3), (20, 3), (12, 5), (3, 3)])
def test_sized_caps(total, levels):
    spec = GenSpec.sized(total, levels, seed=1)
    assert sum(spec.caps) == total and len(spec.caps) == levels and min(spec.caps) >= 1
    assert list(spec.caps) == sorted(spec.caps, reverse=True)


def test_sized_scales_footprint_with_count():
    small, large = GenSpec.sized(9, 3), GenSpec.sized(36, 3)
    width = lambda s: s.bounds.hi[0] - s.bounds.lo[0]
    assert width(large) == pytest.approx(2 * width(small))
    with pytest.raises(ValueError):
        GenSpec.sized(2, 3)
