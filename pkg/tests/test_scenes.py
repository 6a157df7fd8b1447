"""Analytic scene fields, ground-truth oracle, and dataset round trips."""

import json

import numpy as np
import pytest

from radflow.scenes import (
    AnalyticScene,
    Primitive,
    arc_camera,
    generate_dataset,
    load_dataset,
    load_scene,
    occlusion_scene,
    oracle_render,
    point_visibility,
    save_dataset,
    scene_field,
    scene_from_dict,
    scene_to_dict,
    two_sphere_scene,
)


def single_sphere_scene(density=8.0):
    return AnalyticScene(
        name="one-sphere",
        primitives=(Primitive("sphere", (0.0, 0.0, 0.0), (0.5,), density, (1.0, 0.0, 0.0)),),
        background=(0.0, 0.0, 0.0),
        bounds_lo=(-1.0, -1.0, -1.0),
        bounds_hi=(1.0, 1.0, 1.0),
        near=1.0,
        far=5.0,
    )


class TestSceneField:
    def test_empty_space(self):
        scene = two_sphere_scene()
        alpha, rgb = scene_field(scene, np.array([[0.0, 1.1, 0.0]]))
        assert alpha[0] == 0.0
        np.testing.assert_array_equal(rgb[0], scene.background)

    def test_single_membership(self):
        scene = single_sphere_scene(density=5.0)
        alpha, rgb = scene_field(scene, np.array([[0.1, 0.0, 0.0]]))
        assert alpha[0] == 5.0
        np.testing.assert_array_equal(rgb[0], [1.0, 0.0, 0.0])

    def test_overlapping_primitives_sum(self):
        scene = AnalyticScene(
            name="overlap",
            primitives=(
                Primitive("sphere", (0.0, 0.0, 0.0), (0.5,), 2.0, (1.0, 0.0, 0.0)),
                Primitive("box", (0.2, 0.0, 0.0), (0.4, 0.4, 0.4), 3.0, (0.0, 1.0, 0.0)),
            ),
            background=(0.0, 0.0, 0.0),
            bounds_lo=(-1.0, -1.0, -1.0),
            bounds_hi=(1.0, 1.0, 1.0),
            near=1.0,
            far=5.0,
        )
        alpha, rgb = scene_field(scene, np.array([[0.1, 0.0, 0.0]]))
        assert alpha[0] == 5.0
        np.testing.assert_allclose(rgb[0], [2 / 5, 3 / 5, 0.0])

    def test_direction_independent(self):
        scene = two_sphere_scene()
        x = np.array([[-0.45, 0.0, 0.0]])
        a1, _ = scene_field(scene, x, np.array([[0.0, 0.0, 1.0]]))
        a2, _ = scene_field(scene, x, np.array([[1.0, 0.0, 0.0]]))
        assert a1[0] == a2[0]


class TestOracleRender:
    def test_missing_ray_background_and_vacuum(self):
        scene = single_sphere_scene()
        color, depth, vacuum = oracle_render(
            scene, np.array([[0.0, 2.0, 3.0]]), np.array([[0.0, 0.0, -1.0]]), 1024
        )
        np.testing.assert_allclose(color[0], scene.background, atol=1e-12)
        assert vacuum[0]
        assert depth[0] == 0.0

    def test_opaque_sphere_depth_is_entry_distance(self):
        scene = single_sphere_scene(density=10_000.0)
        origin = np.array([[0.0, 0.0, 3.0]])
        direction = np.array([[0.0, 0.0, -1.0]])
        _, depth, vacuum = oracle_render(scene, origin, direction, 4096)
        assert not vacuum[0]
        entry = 3.0 - 0.5  # analytic ray-sphere intersection
        assert abs(depth[0] - entry) < 1e-3

    def test_quadrature_convergence(self):
        scene = single_sphere_scene()
        # ray straight through the sphere center
        o = np.array([[0.0, 0.0, 3.0]])
        d = np.array([[0.0, 0.0, -1.0]])
        c1, _, _ = oracle_render(scene, o, d, 2048)
        c2, _, _ = oracle_render(scene, o, d, 4096)
        assert np.max(np.abs(c1 - c2)) < 1e-4
        # random camera rays: average discrepancy is far below the bound
        cam = arc_camera(two_sphere_scene(), 20.0, 16, 16, 25.0)
        from radflow.render import camera_rays

        o, d = camera_rays(cam)
        pick = np.random.default_rng(2).choice(len(o), 24, replace=False)
        c1, _, _ = oracle_render(two_sphere_scene(), o[pick], d[pick], 2048)
        c2, _, _ = oracle_render(two_sphere_scene(), o[pick], d[pick], 4096)
        assert np.mean(np.abs(c1 - c2)) < 1e-4

    def test_convergence_monotone_in_max_error(self):
        scene = two_sphere_scene()
        cam = arc_camera(scene, -10.0, 12, 12, 20.0)
        from radflow.render import camera_rays

        o, d = camera_rays(cam)
        ref, _, _ = oracle_render(scene, o, d, 32768)
        errs = []
        for n in [1024, 2048, 4096, 8192]:
            c, _, _ = oracle_render(scene, o, d, n)
            errs.append(np.max(np.abs(c - ref)))
        assert all(errs[i + 1] <= errs[i] for i in range(len(errs) - 1))

    def test_minimum_node_count_enforced(self):
        with pytest.raises(ValueError):
            oracle_render(single_sphere_scene(), np.zeros((1, 3)), np.eye(3)[:1], 512)


class TestDatasetGeneration:
    def test_counting_and_ranges(self):
        ds = generate_dataset(two_sphere_scene(), 4, 2, 16, np.random.default_rng(0), 1024)
        assert len(ds.split_views("train")) == 4
        assert len(ds.split_views("test")) == 2
        for v in ds.views:
            assert v.image.shape == (16, 16, 3)
            assert np.all((v.image >= 0) & (v.image <= 1))
            assert np.all(v.depth >= 0)

    def test_determinism(self):
        a = generate_dataset(two_sphere_scene(), 2, 1, 12, np.random.default_rng(0), 1024)
        b = generate_dataset(two_sphere_scene(), 2, 1, 12, np.random.default_rng(99), 1024)
        for va, vb in zip(a.views, b.views):
            np.testing.assert_array_equal(va.image, vb.image)
            np.testing.assert_array_equal(va.depth, vb.depth)

    def test_validation(self):
        with pytest.raises(ValueError):
            generate_dataset(two_sphere_scene(), 0, 1, 8, np.random.default_rng(0), 1024)
        with pytest.raises(ValueError):
            generate_dataset(two_sphere_scene(), 1, 1, 0, np.random.default_rng(0), 1024)


class TestDatasetRoundTrip:
    @pytest.fixture
    def dataset(self):
        return generate_dataset(two_sphere_scene(), 2, 1, 12, np.random.default_rng(0), 1024)

    def test_save_load_identity(self, dataset, tmp_path):
        save_dataset(dataset, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert loaded.scene_name == dataset.scene_name
        assert len(loaded.views) == len(dataset.views)
        for va, vb in zip(dataset.views, loaded.views):
            np.testing.assert_array_equal(va.image, vb.image)
            np.testing.assert_array_equal(va.depth, vb.depth)
            np.testing.assert_allclose(va.camera.pose_matrix(), vb.camera.pose_matrix())
            assert va.split == vb.split

    def test_truncated_payload_names_file(self, dataset, tmp_path):
        save_dataset(dataset, tmp_path / "ds")
        victim = tmp_path / "ds" / "view_001.pfm"
        victim.write_bytes(victim.read_bytes()[:-64])
        with pytest.raises(Exception, match="view_001"):
            load_dataset(tmp_path / "ds")

    def test_unknown_manifest_version(self, dataset, tmp_path):
        save_dataset(dataset, tmp_path / "ds")
        manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
        manifest["format_version"] = 42
        (tmp_path / "ds" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match="version"):
            load_dataset(tmp_path / "ds")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_flat_rays_shapes(self, dataset):
        o, d, c, dep, mask = dataset.flat_rays("train")
        assert o.shape == d.shape == (2 * 144, 3)
        assert c.shape == (288, 3)
        assert dep.shape == mask.shape == (288,)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)


class TestSceneSerialization:
    def test_round_trip(self):
        scene = occlusion_scene()
        again = scene_from_dict(scene_to_dict(scene))
        assert again == scene

    def test_load_scene_from_file(self, tmp_path):
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(scene_to_dict(two_sphere_scene())))
        loaded = load_scene(str(path))
        assert loaded == two_sphere_scene()

    def test_unknown_scene_name(self):
        with pytest.raises(FileNotFoundError):
            load_scene("not-a-scene")


class TestOcclusionGeometry:
    """The scene exists to make a region unknowable during training."""

    @staticmethod
    def _hidden_surface(scene, n=200):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(n, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        hidden = scene.primitives[-1]
        return np.asarray(hidden.center) + 0.999 * hidden.size[0] * pts

    def test_hidden_sphere_invisible_from_train_views(self):
        scene = occlusion_scene()
        surf = self._hidden_surface(scene)
        for i, az in enumerate(scene.train_azimuths_deg):
            cam = arc_camera(scene, az, 24, 24, 38.0, scene.elevation_for("train", i))
            vis = point_visibility(scene, surf, cam, pullback=0.1)
            assert vis.max() < 0.05

    def test_hidden_sphere_visible_from_a_test_view(self):
        scene = occlusion_scene()
        surf = self._hidden_surface(scene)
        best = 0.0
        for i, az in enumerate(scene.test_azimuths_deg):
            cam = arc_camera(scene, az, 24, 24, 38.0, scene.elevation_for("test", i))
            vis = point_visibility(scene, surf, cam, pullback=0.1)
            best = max(best, (vis > 0.5).mean())
        assert best > 0.3
