import numpy as np
import pytest

from conrf.errors import CapabilityError, ConfigError
from conrf.pipeline import (load_pipeline, orbit_cameras, render_stylized,
                            register_style_image, resolve_camera,
                            resolve_style)
from conrf.scene_io import load_blender_scene
from conrf.style import StyleStatistics

RNG = np.random.default_rng(99)


@pytest.fixture(scope="module")
def state3(mini_checkpoints, toy_scene):
    return load_pipeline(mini_checkpoints["stage3"], dataset=toy_scene)


@pytest.fixture(scope="module")
def state2(mini_checkpoints, toy_scene):
    return load_pipeline(mini_checkpoints["stage2"], dataset=toy_scene)


class TestLoading:
    def test_stage1_checkpoint_rejected(self, mini_checkpoints):
        with pytest.raises(ConfigError):
            load_pipeline(mini_checkpoints["stage1"])

    def test_selection_support_flags(self, state2, state3):
        assert not state2.supports_selection
        assert state3.supports_selection


class TestStyleResolution:
    def test_text_and_image_styles(self, state3):
        a = resolve_style(state3, {"text": "a misty watercolor"})
        b = resolve_style(state3, {"image": RNG.random((32, 32, 3))})
        assert isinstance(a, StyleStatistics) and isinstance(b, StyleStatistics)
        assert a.width == state3.config.feature_channels

    def test_stats_passthrough(self, state3):
        stats = resolve_style(state3, {"stats": {"mu": [0.0] * 24,
                                                 "sigma": [1.0] * 24}})
        np.testing.assert_array_equal(stats.sigma, 1.0)

    def test_image_stats_memoized(self, state3):
        img = RNG.random((16, 16, 3))
        a = resolve_style(state3, {"image": img})
        b = resolve_style(state3, {"image": img})
        assert a is b

    def test_image_id_roundtrip(self, state3):
        img = RNG.random((16, 16, 3))
        sid = register_style_image(state3, img)
        direct = resolve_style(state3, {"image": img})
        by_id = resolve_style(state3, {"image_id": sid})
        np.testing.assert_array_equal(direct.mu, by_id.mu)

    def test_bad_specs(self, state3):
        with pytest.raises(ConfigError):
            resolve_style(state3, {"text": "x", "image": RNG.random((4, 4, 3))})
        with pytest.raises(ConfigError):
            resolve_style(state3, {"image_id": "missing"})
        with pytest.raises(ConfigError):
            resolve_style(state3, {"what": 1})


class TestCameraResolution:
    def test_view_indexed(self, state3, toy_scene):
        cam = resolve_camera(state3, {"view": 2})
        assert cam is toy_scene.cameras[2]
        with pytest.raises(ConfigError):
            resolve_camera(state3, {"view": 99})

    def test_explicit_pose(self, state3, toy_scene):
        ref = toy_scene.cameras[0]
        pose = {"c2w": ref.c2w.tolist(), "focal": ref.focal,
                "width": ref.width, "height": ref.height}
        cam = resolve_camera(state3, pose)
        np.testing.assert_array_equal(cam.c2w, ref.c2w)
        assert cam.near == ref.near   # inherited from the dataset

    def test_invalid_pose(self, state3):
        with pytest.raises(ConfigError):
            resolve_camera(state3, {"c2w": np.eye(4).tolist()})

    def test_orbit(self, state3):
        cams = orbit_cameras(state3, 6)
        assert len(cams) == 6
        radii = [np.linalg.norm(c.position) for c in cams]
        assert np.std(radii) < 1e-6


class TestRenderStylized:
    def test_global_render_shape_and_determinism(self, state3, toy_scene):
        cam = toy_scene.cameras[1]
        a = render_stylized(state3, cam, {"text": "the red ball"})
        b = render_stylized(state3, cam, {"text": "the red ball"})
        assert a["image"].shape == (64, 64, 3)
        assert a["image"].dtype == np.uint8
        np.testing.assert_array_equal(a["image"], b["image"])
        assert a["mask"] is None
        assert a["timings"]["total_ms"] > 0

    def test_local_render_has_mask(self, state3, toy_scene):
        out = render_stylized(state3, toy_scene.cameras[0],
                              {"text": "the red ball"},
                              style2={"image": RNG.random((16, 16, 3))},
                              content_text="the red ball", threshold=0.5)
        assert out["mask"] is not None and out["mask"].shape == (16, 16)
        assert set(np.unique(out["mask"])) <= {0.0, 1.0}
        assert out["similarity"].shape == (16, 16)

    def test_local_needs_selection_head(self, state2, toy_scene):
        with pytest.raises(CapabilityError):
            render_stylized(state2, toy_scene.cameras[0], {"text": "x"},
                            style2={"text": "y"}, content_text="the red ball")

    def test_two_styles_need_content_prompt(self, state3, toy_scene):
        with pytest.raises(ConfigError):
            render_stylized(state3, toy_scene.cameras[0], {"text": "x"},
                            style2={"text": "y"})
        with pytest.raises(ConfigError):
            render_stylized(state3, toy_scene.cameras[0], {"text": "x"},
                            content_text="the red ball")

    def test_threshold_validation(self, state3, toy_scene):
        with pytest.raises(ConfigError):
            render_stylized(state3, toy_scene.cameras[0], {"text": "x"},
                            style2={"text": "y"}, content_text="the red ball",
                            threshold=2.0)

    def test_identity_stats_reproduce_unstylized_decode(self, state3, toy_scene):
        from conrf.field import render
        from conrf.scene_io import generate_patch_rays
        from conrf.style import decode
        cam_idx = 0
        identity = StyleStatistics.identity(state3.config.feature_channels)
        out = render_stylized(state3, toy_scene.cameras[cam_idx],
                              {"stats": {"mu": identity.mu.tolist(),
                                         "sigma": identity.sigma.tolist()}})
        rays, (hc, wc) = generate_patch_rays(toy_scene, cam_idx, 4)
        bundle = render(state3.checkpoint.field, rays, heads=("feature",),
                        n_samples=state3.config.n_samples)
        fimg = bundle.feature.reshape(hc, wc, -1).transpose(2, 0, 1)
        direct = decode(state3.checkpoint.decoder, fimg)
        np.testing.assert_array_equal(
            out["image"], (np.clip(direct, 0, 1) * 255).round().astype(np.uint8))
