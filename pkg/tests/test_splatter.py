import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import random_pose
from stormfield.camera import CameraFrame, make_pose
from stormfield.errors import ValidationError
from stormfield.field import ParticleSet
from stormfield.splatter import (Splat2D, Splats, project, project_one, quat_to_matrix, rasterize,
                                 render_frame, render_sequence)


def particles(positions, scales=0.1, quats=None, colors=0.8, opacities=0.9, velocities=None):
    positions = np.atleast_2d(np.asarray(positions, float))
    n = len(positions)
    return ParticleSet(
        positions=positions,
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)) if quats is None else quats,
        scales=np.broadcast_to(np.asarray(scales, float), (n, 3)),
        colors=np.broadcast_to(np.asarray(colors, float), (n, 3)),
        opacities=np.broadcast_to(np.asarray(opacities, float), (n,)),
        velocities=np.zeros((n, 3)) if velocities is None else velocities,
    )


def cam128(pose=None):
    return CameraFrame(np.eye(4) if pose is None else pose, 100.0, 100.0, 64.0, 64.0, 128, 128)


def brute_force(splats, bg):
    """Untruncated per-pixel compositing straight from the formula."""
    h, w, _ = bg.shape
    order = np.argsort(splats.depths, kind="stable")
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    color = np.zeros_like(bg)
    trans = np.ones((h, w))
    for k in order:
        d = np.stack([xs - splats.centers[k, 0], ys - splats.centers[k, 1]], -1)
        inv = np.linalg.inv(splats.covs[k])
        q = np.einsum("...i,ij,...j->...", d, inv, d)
        alpha = splats.opacities[k] * np.exp(-0.5 * q)
        color += splats.colors[k] * (alpha * trans)[..., None]
        trans *= 1 - alpha
    return np.clip(color + bg * trans[..., None], 0, 1)


def random_splats(rng, n, w, h, depth=None):
    centers = rng.uniform([0, 0], [w, h], size=(n, 2))
    A = rng.normal(size=(n, 2, 2)) * rng.uniform(0.5, 3.0, size=(n, 1, 1))
    covs = A @ np.swapaxes(A, 1, 2) + 0.3 * np.eye(2)
    return Splats(centers=centers, covs=covs,
                  depths=rng.uniform(0.5, 20, n) if depth is None else depth,
                  colors=rng.random((n, 3)), opacities=rng.random(n), index=np.arange(n))


class TestProject:
    def test_on_axis(self):
        s = project_one(particles([0, 0, 5]), 0, cam128())
        assert s.center == (64.0, 64.0)
        assert s.depth == 5.0

    def test_behind_camera_culled(self):
        assert project_one(particles([0, 0, -1]), 0, cam128()) is None

    def test_near_plane_culled(self):
        assert project_one(particles([0, 0, 0.05]), 0, cam128()) is None
        assert project_one(particles([0, 0, 0.06], scales=0.001), 0, cam128()) is not None

    def test_outside_image_culled(self):
        assert project_one(particles([50, 0, 5]), 0, cam128()) is None
        # center is off-image but the footprint still reaches in
        assert project_one(particles([3.3, 0, 5], scales=0.2), 0, cam128()) is not None

    def test_isotropic_on_axis_covariance(self):
        s, z = 0.07, 4.0
        sp = project_one(particles([0, 0, z], scales=s), 0, cam128())
        np.testing.assert_allclose(sp.cov2d, np.diag([(100 * s / z) ** 2] * 2), rtol=0.01)

    def test_covariance_matches_numeric_jacobian(self, rng):
        for _ in range(20):
            pose = random_pose(rng, t_scale=1.0)
            cam = cam128(pose)
            local = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(3, 8)])
            world = cam.pose[:3, :3] @ local + cam.pose[:3, 3]
            q = np.roll(Rotation.random(random_state=rng).as_quat(), 1)
            scales = rng.uniform(0.01, 0.3, 3)
            sp = project_one(particles(world, scales=scales, quats=q[None]), 0, cam)
            if sp is None:
                continue

            def pix(X):
                return np.array([100 * X[0] / X[2] + 64, 100 * X[1] / X[2] + 64])

            eps = 1e-6
            J = np.stack([(pix(local + eps * e) - pix(local - eps * e)) / (2 * eps) for e in np.eye(3)], 1)
            Rw = quat_to_matrix(q)
            sigma_world = Rw @ np.diag(scales**2) @ Rw.T
            W = cam.pose[:3, :3].T
            expected = J @ W @ sigma_world @ W.T @ J.T
            np.testing.assert_allclose(sp.cov2d, expected, rtol=1e-6, atol=1e-9)
            np.testing.assert_allclose(sp.center, pix(local), atol=1e-9)

    def test_vectorized_agrees_with_single(self, rng):
        p = particles(rng.uniform([-3, -3, -2], [3, 3, 10], size=(200, 3)), scales=0.05)
        batch = project(p, cam128())
        assert 0 < len(batch) < 200
        for j, i in enumerate(batch.index[:20]):
            one = project_one(p, i, cam128())
            np.testing.assert_allclose(one.cov2d, batch.covs[j])


class TestRasterize:
    def test_empty_is_identity(self, rng):
        bg = rng.random((20, 30, 3))
        out = rasterize([], bg)
        assert out.tobytes() == bg.tobytes()

    def test_opaque_center_equals_color(self):
        out = rasterize([Splat2D((5.0, 7.0), np.eye(2) * 4, 1.0, (0.2, 0.6, 0.9), 1.0)], np.zeros((16, 16, 3)))
        np.testing.assert_array_equal(out[7, 5], [0.2, 0.6, 0.9])

    def test_two_splats_closed_form(self, rng):
        bg = np.full((12, 12, 3), 0.25)
        c1, c2 = np.array([0.9, 0.1, 0.3]), np.array([0.2, 0.8, 0.5])
        cov1, cov2 = np.array([[4.0, 1.0], [1.0, 3.0]]), np.array([[2.0, -0.5], [-0.5, 5.0]])
        s_far = Splat2D((6.4, 5.7), cov2, 2.0, tuple(c2), 0.7)
        s_near = Splat2D((5.0, 6.0), cov1, 1.0, tuple(c1), 0.6)
        out = rasterize([s_far, s_near], bg)
        d1, d2 = np.array([0.0, 0.0]), np.array([5 - 6.4, 6 - 5.7])
        a1 = 0.6 * np.exp(-0.5 * d1 @ np.linalg.inv(cov1) @ d1)
        a2 = 0.7 * np.exp(-0.5 * d2 @ np.linalg.inv(cov2) @ d2)
        expected = c1 * a1 + c2 * a2 * (1 - a1) + 0.25 * (1 - a1) * (1 - a2)
        np.testing.assert_allclose(out[6, 5], expected, atol=1e-12)

    def test_matches_untruncated_oracle(self, rng):
        bg = rng.random((40, 48, 3))
        sp = random_splats(rng, 60, 48, 40)
        out = rasterize(sp, bg)
        assert np.max(np.abs(out - brute_force(sp, bg))) < 1e-3

    def test_order_invariance(self, rng):
        bg = rng.random((32, 32, 3))
        sp = random_splats(rng, 40, 32, 32)
        perm = rng.permutation(40)
        shuffled = Splats(sp.centers[perm], sp.covs[perm], sp.depths[perm], sp.colors[perm],
                          sp.opacities[perm], sp.index[perm])
        np.testing.assert_allclose(rasterize(sp, bg), rasterize(shuffled, bg), atol=1e-12)

    def test_equal_depth_ties_follow_input_order(self):
        a = Splat2D((4.0, 4.0), np.eye(2), 1.0, (1.0, 0.0, 0.0), 1.0)
        b = Splat2D((4.0, 4.0), np.eye(2), 1.0, (0.0, 1.0, 0.0), 1.0)
        bg = np.zeros((8, 8, 3))
        np.testing.assert_array_equal(rasterize([a, b], bg)[4, 4], [1, 0, 0])
        np.testing.assert_array_equal(rasterize([b, a], bg)[4, 4], [0, 1, 0])

    def test_zero_opacity_preserves_background(self, rng):
        bg = rng.random((24, 24, 3))
        sp = random_splats(rng, 30, 24, 24)
        sp = Splats(sp.centers, sp.covs, sp.depths, sp.colors, np.zeros(30), sp.index)
        assert rasterize(sp, bg).tobytes() == bg.tobytes()

    def test_outputs_in_unit_range(self, rng):
        bg = rng.random((24, 24, 3))
        sp = random_splats(rng, 200, 24, 24)
        out = rasterize(sp, bg)
        assert out.min() >= 0 and out.max() <= 1

    def test_untouched_pixels_are_exact(self, rng):
        bg = rng.random((64, 64, 3))
        out = rasterize([Splat2D((10.0, 10.0), np.eye(2), 1.0, (1, 1, 1), 1.0)], bg)
        assert out[40:, 40:].tobytes() == bg[40:, 40:].tobytes()

    def test_cutoff_error_bound(self):
        assert np.exp(-0.5 * 18) < 1.3e-4

    def test_rejects_bad_background(self):
        with pytest.raises(ValidationError):
            rasterize([], np.zeros((4, 4)))

    def test_rejects_non_pd_covariance(self):
        with pytest.raises(ValidationError):
            rasterize([Splat2D((1.0, 1.0), np.zeros((2, 2)), 1.0, (1, 1, 1), 1.0)], np.zeros((4, 4, 3)))

    def test_tiles_crossed(self, rng):
        # large splats spanning several 16px tiles must match the oracle everywhere
        bg = rng.random((50, 70, 3))
        sp = Splats(np.array([[35.0, 25.0], [10.0, 40.0]]), np.array([np.eye(2) * 60, np.eye(2) * 30]),
                    np.array([1.0, 2.0]), rng.random((2, 3)), np.array([0.8, 0.9]), np.arange(2))
        assert np.max(np.abs(rasterize(sp, bg) - brute_force(sp, bg))) < 1e-3


class TestRenderFrame:
    def test_culled_particle_changes_nothing(self, rng):
        bg = rng.random((128, 128, 3))
        visible = particles([[0, 0, 5], [0.3, 0.2, 6]])
        with_culled = particles([[0, 0, 5], [0.3, 0.2, 6], [0, 0, -3], [80, 0, 5]])
        a = render_frame(visible, cam128(), bg)
        b = render_frame(with_culled, cam128(), bg)
        assert a.tobytes() == b.tobytes()

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError, match="does not match"):
            render_frame(particles([0, 0, 5]), cam128(), np.zeros((10, 10, 3)))

    def test_sequence_errors_carry_frame_index(self):
        good = (particles([0, 0, 5]), cam128(), np.zeros((128, 128, 3)))
        bad = (particles([0, 0, 5]), cam128(), np.zeros((10, 10, 3)))
        with pytest.raises(ValidationError, match="frame 1"):
            render_sequence([good, bad])

    def test_empty_sets_return_backgrounds(self, rng):
        bgs = [rng.random((128, 128, 3)) for _ in range(3)]
        outs = render_sequence([(ParticleSet.empty(), cam128(), b) for b in bgs])
        for o, b in zip(outs, bgs):
            assert o.tobytes() == b.tobytes()

    def test_sequence_deterministic(self, rng):
        p = particles(rng.uniform([-2, -2, 2], [2, 2, 10], size=(300, 3)), scales=0.05)
        frames = [(p, cam128(), np.zeros((128, 128, 3)))] * 2
        a, b = render_sequence(frames), render_sequence(frames)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))

    def test_moving_particle_tracks_monotonically(self):
        p = particles([-1.5, 0, 6], scales=0.08, colors=1.0, opacities=1.0, velocities=np.array([[1.0, 0, 0]]))
        xs = []
        for _ in range(6):
            img = render_frame(p, cam128(), np.zeros((128, 128, 3)))
            lum = img.sum(axis=2)
            xs.append(np.unravel_index(np.argmax(lum), lum.shape)[1])
            p = p.replace(positions=p.positions + p.velocities * 0.5)
        assert all(b > a for a, b in zip(xs, xs[1:]))


def test_rotated_rain_streak_is_anisotropic():
    # an elongated scale along y, seen head on, gives a tall thin footprint
    sp = project_one(particles([0, 0, 5], scales=(0.01, 0.2, 0.01)), 0, cam128())
    assert sp.cov2d[1, 1] > 100 * sp.cov2d[0, 0]
    R = Rotation.from_euler("z", 90, degrees=True)
    q = np.roll(R.as_quat(), 1)[None]
    sp = project_one(particles([0, 0, 5], scales=(0.01, 0.2, 0.01), quats=q), 0, cam128())
    assert sp.cov2d[0, 0] > 100 * sp.cov2d[1, 1]


def test_camera_validation():
    with pytest.raises(ValidationError):
        CameraFrame(np.eye(4), 0.0, 1.0, 1, 1, 4, 4)
    with pytest.raises(ValidationError):
        CameraFrame(np.eye(4), 1.0, 1.0, 5, 1, 4, 4)
    skew = make_pose()
    skew[0, 1] = 0.2
    with pytest.raises(ValidationError):
        CameraFrame(skew, 1.0, 1.0, 1, 1, 4, 4)
