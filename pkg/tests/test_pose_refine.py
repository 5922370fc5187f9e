from __future__ import annotations

import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from fewview.errors import LengthMismatch, SingularSystem, TooFewPoints
from fewview.features import FeatureMap, analytic_feature_extractor
from fewview.joint import AlternationConfig, view_problem
from fewview.metrics import pixel_error
from fewview.pose_refine import (
    AlignmentProblem,
    apply_update,
    jacobian,
    jacobians,
    linearized_correction,
    lm_step,
    perturbation_twist,
    pose_refine_loss,
    prior_twist,
    projection_jacobian,
    residual,
    residuals,
    warp,
    warp_jacobian,
)
from fewview.scenes import generate_scene
from fewview.se3 import Intrinsics, Pose, Twist, exp_map, log_map

K64 = Intrinsics(60.0, 60.0, 32.0, 32.0, 64, 64)


def smooth_features(rng, c=3, size=64):
    """Sum of random low-frequency sinusoids per channel."""
    v, u = np.mgrid[0:size, 0:size] / size
    data = np.zeros((c, size, size))
    for k in range(c):
        for _ in range(3):
            fu, fv, ph = rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi)
            data[k] += rng.uniform(0.5, 1.5) * np.sin(2 * np.pi * (fu * u + fv * v) + ph)
    return FeatureMap(data)


def random_problem(rng, n=60, observed=None, rendered=None, **kw):
    px = rng.uniform(12, 52, size=(n, 2))
    depth = rng.uniform(1.0, 3.0, n)
    pts = np.column_stack([(px[:, 0] - K64.cx) / K64.fx, (px[:, 1] - K64.cy) / K64.fy, np.ones(n)]) * depth[:, None]
    observed = observed if observed is not None else smooth_features(rng)
    rendered = rendered if rendered is not None else smooth_features(rng)
    return AlignmentProblem(observed, rendered, px, pts, K64, **kw)


def warped_uv(prob, twist):
    pw = warp(prob.points, twist)
    return np.column_stack([K64.fx * pw[:, 0] / pw[:, 2] + K64.cx, K64.fy * pw[:, 1] / pw[:, 2] + K64.cy])


def finite_difference_jacobian(prob, twist, h=1e-6):
    xi = twist.as_vector()
    cols = []
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        rp, _ = residuals(prob, Twist.from_vector(xi + e))
        rm, _ = residuals(prob, Twist.from_vector(xi - e))
        cols.append((rp - rm) / (2 * h))
    return np.stack(cols, axis=-1)


def away_from_texel_edges(uv, tol=1e-3):
    frac = uv % 1.0
    return np.all((frac > tol) & (frac < 1 - tol), axis=1)


# feature maps


def test_bilinear_sample_at_integer_coordinates_is_exact():
    fm = smooth_features(np.random.default_rng(0))
    rng = np.random.default_rng(1)
    u, v = rng.integers(0, 63, 200), rng.integers(0, 63, 200)
    np.testing.assert_array_equal(fm.sample(u, v), fm.data[:, v, u].T)
    # the far edge is sampled exactly too
    np.testing.assert_array_equal(fm.sample([63], [63]), fm.data[:, 63, 63][None])


def test_bilinear_sample_matches_map_coordinates():
    fm = smooth_features(np.random.default_rng(2))
    rng = np.random.default_rng(3)
    u, v = rng.uniform(0, 63, 500), rng.uniform(0, 63, 500)
    oracle = np.stack([map_coordinates(ch, [v, u], order=1) for ch in fm.data], axis=1)
    np.testing.assert_allclose(fm.sample(u, v), oracle, atol=1e-12)


def test_spatial_gradient_matches_finite_differences():
    fm = smooth_features(np.random.default_rng(4))
    rng = np.random.default_rng(5)
    uv = rng.uniform(1, 62, size=(400, 2))
    uv = uv[away_from_texel_edges(uv, 0.01)]
    h = 1e-4
    du = (fm.sample(uv[:, 0] + h, uv[:, 1]) - fm.sample(uv[:, 0] - h, uv[:, 1])) / (2 * h)
    dv = (fm.sample(uv[:, 0], uv[:, 1] + h) - fm.sample(uv[:, 0], uv[:, 1] - h)) / (2 * h)
    g = fm.spatial_gradient(uv[:, 0], uv[:, 1])
    np.testing.assert_allclose(g[..., 0], du, atol=1e-5)
    np.testing.assert_allclose(g[..., 1], dv, atol=1e-5)


def test_sample_padded_zero_outside():
    fm = FeatureMap(np.ones((2, 8, 8)))
    out = fm.sample_padded(np.array([3.0, -2.0, 9.0]), np.array([3.0, 3.0, 3.0]))
    np.testing.assert_array_equal(out, [[1, 1], [0, 0], [0, 0]])


def test_extractor_zero_inputs():
    z = np.zeros((32, 32))
    fm = analytic_feature_extractor(z, z.astype(bool), np.full((32, 32), np.inf))
    assert fm.channels == 4 and np.all(fm.data == 0.0)


def disk(shape, center, radius):
    v, u = np.mgrid[0:shape[0], 0:shape[1]]
    return (u - center[0]) ** 2 + (v - center[1]) ** 2 <= radius ** 2


def test_extractor_shifted_mask_changes_silhouette_band():
    a = disk((96, 96), (48, 48), 20)
    b = disk((96, 96), (51, 48), 20)
    depth_a = np.where(a, 1.5, np.inf)
    depth_b = np.where(b, 1.5, np.inf)
    fa = analytic_feature_extractor(a * 0.7, a, depth_a).data[0]
    fb = analytic_feature_extractor(b * 0.7, b, depth_b).data[0]
    gained = b & ~a
    lost = a & ~b
    assert np.all(fb[gained] - fa[gained] > 0)
    assert np.all(fb[lost] - fa[lost] < 0)


def test_extractor_is_shift_equivariant():
    rng = np.random.default_rng(6)
    mask = disk((96, 96), (44, 50), 18)
    intensity = np.where(mask, rng.uniform(0.3, 1.0, mask.shape), 0.0)
    depth = np.where(mask, rng.uniform(1.2, 1.8, mask.shape), np.inf)
    shift = (5, -3)

    def roll(x):
        return np.roll(x, shift, axis=(0, 1))

    f = analytic_feature_extractor(intensity, mask, depth).data
    g = analytic_feature_extractor(roll(intensity), roll(mask), roll(depth)).data
    diff = np.abs(g - np.roll(f, shift, axis=(1, 2)))[:, 20:-20, 20:-20]
    assert diff.max() < 1e-3


# residuals and jacobians


def test_self_alignment_has_zero_residual():
    rng = np.random.default_rng(7)
    fm = smooth_features(rng)
    prob = random_problem(rng, observed=fm, rendered=fm)
    r, valid = residuals(prob)
    assert valid.all()
    assert np.max(np.abs(r)) < 1e-12


def test_constant_offset_residual():
    rng = np.random.default_rng(8)
    fm = smooth_features(rng)
    prob = random_problem(rng, observed=FeatureMap(fm.data + 0.5), rendered=fm)
    np.testing.assert_allclose(residual(prob, 3), 0.5, atol=1e-12)


def test_residual_matches_direct_reevaluation():
    rng = np.random.default_rng(9)
    prob = random_problem(rng)
    for _ in range(20):
        tw = Twist(rng.normal(scale=0.01, size=3), rng.normal(scale=0.01, size=3))
        j = int(rng.integers(len(prob)))
        p = prob.points[j]
        pw = p + np.cross(tw.rot, p) + tw.trans
        u, v = K64.fx * pw[0] / pw[2] + K64.cx, K64.fy * pw[1] / pw[2] + K64.cy
        obs = [map_coordinates(ch, [[v], [u]], order=1)[0] for ch in prob.observed.data]
        ren = [map_coordinates(ch, [[prob.pixels[j, 1]], [prob.pixels[j, 0]]], order=1)[0] for ch in prob.rendered.data]
        np.testing.assert_allclose(residual(prob, j, tw), np.subtract(obs, ren), atol=1e-9)


def test_out_of_bounds_point_has_no_residual():
    rng = np.random.default_rng(10)
    prob = random_problem(rng)
    big = Twist(np.zeros(3), [5.0, 0.0, 0.0])
    assert residual(prob, 0, big) is None
    assert jacobian(prob, 0, big) is None


def test_jacobian_matches_central_differences():
    rng = np.random.default_rng(11)
    for _ in range(20):
        prob = random_problem(rng)
        tw = Twist(rng.normal(scale=1e-3, size=3), rng.normal(scale=1e-3, size=3))
        keep = away_from_texel_edges(warped_uv(prob, tw))
        J, valid = jacobians(prob, tw)
        fd = finite_difference_jacobian(prob, tw)
        sel = keep & valid
        Ja, Jf = J[sel], fd[sel]
        assert np.max(np.abs(Ja - Jf)) < 1e-4 * (1 + np.max(np.abs(Ja)))


def test_translation_along_optical_axis_does_not_move_pixel():
    p = np.array([[0.0, 0.0, 2.0]])
    duv = projection_jacobian(K64, p) @ warp_jacobian(p)
    np.testing.assert_array_equal(duv[0, :, 5], [0.0, 0.0])


def test_constant_features_give_zero_jacobian():
    rng = np.random.default_rng(12)
    flat = FeatureMap(np.full((2, 64, 64), 0.3))
    prob = random_problem(rng, observed=flat, rendered=flat)
    J, valid = jacobians(prob)
    assert np.all(J[valid] == 0.0)


def test_warp_jacobian_structure():
    p = np.array([[1.0, 2.0, 3.0]])
    W = warp_jacobian(p)[0]
    np.testing.assert_array_equal(W[:, 3:], np.eye(3))
    dc = np.array([1e-3, -2e-3, 5e-4])
    np.testing.assert_allclose(W[:, :3] @ dc, np.cross(dc, p[0]), atol=1e-15)


# LM step


def test_fixed_point_of_aligned_problem():
    rng = np.random.default_rng(13)
    fm = smooth_features(rng)
    upd = lm_step(random_problem(rng, observed=fm, rendered=fm))
    assert upd.twist.norm() < 1e-8
    assert upd.residual_norm_before < 1e-12


def ramp_problem(shift_px=2.0, depth=2.0):
    v, u = np.mgrid[0:64, 0:64].astype(float)
    rendered = FeatureMap(np.stack([u / 10, v / 10]))
    observed = FeatureMap(np.stack([(u - shift_px) / 10, v / 10]))
    px = np.array([[a, b] for a in range(16, 48, 3) for b in range(16, 48, 3)], dtype=float)
    pts = np.column_stack([(px[:, 0] - K64.cx) / K64.fx, (px[:, 1] - K64.cy) / K64.fy, np.ones(len(px))]) * depth
    return AlignmentProblem(observed, rendered, px, pts, K64)


def test_translation_offset_recovered_in_one_step():
    upd = lm_step(ramp_problem())
    assert upd.residual_norm_after < 0.2 * upd.residual_norm_before
    # a fronto-parallel plane cannot separate x-translation from y-rotation,
    # so check the image motion the twist produces
    prob = ramp_problem()
    shift = warped_uv(prob, upd.twist) - prob.pixels
    assert np.mean(shift[:, 0]) == pytest.approx(2.0, rel=0.05)
    assert abs(np.mean(shift[:, 1])) < 0.05


def test_damping_shrinks_step_monotonically():
    rng = np.random.default_rng(14)
    prob = random_problem(rng)
    def step(lam):
        return lm_step(AlignmentProblem(prob.observed, prob.rendered, prob.pixels, prob.points, K64, damping=lam))

    norms = [step(lam).twist.norm() for lam in (1e-2, 1.0, 1e2, 1e4)]
    assert all(b <= a for a, b in zip(norms, norms[1:]))
    scale = lm_step(prob).damping / 1e-3
    assert step(1e6 * scale).twist.norm() < 1e-5 * norms[0]


def test_prior_pulls_towards_prior_pose():
    rng = np.random.default_rng(15)
    base = random_problem(rng)
    current = exp_map(Twist([0.02, -0.01, 0.03], [0.01, 0.02, -0.01]))
    prior = Pose.identity()
    dists = []
    for mu in (0.0, 0.1, 1.0, 10.0, 100.0, 1e4):
        prob = AlignmentProblem(base.observed, base.rendered, base.pixels, base.points, K64,
                                prior_weight=mu, prior_pose=prior, current_pose=current)
        final = apply_update(current, lm_step(prob).twist)
        dists.append(np.linalg.norm(prior_twist(final, prior)))
    assert all(b <= a + 1e-12 for a, b in zip(dists, dists[1:]))
    assert dists[-1] < 0.01 * np.linalg.norm(prior_twist(current, prior))


def test_prior_twist_moves_current_onto_prior():
    rng = np.random.default_rng(16)
    current = exp_map(Twist(rng.normal(scale=0.2, size=3), rng.normal(size=3)))
    prior = exp_map(Twist(rng.normal(scale=0.2, size=3), rng.normal(size=3)))
    moved = apply_update(current, Twist.from_vector(prior_twist(current, prior)))
    np.testing.assert_allclose(moved.matrix(), prior.matrix(), atol=1e-12)


def test_out_of_bounds_points_do_not_change_the_update():
    rng = np.random.default_rng(17)
    prob = random_problem(rng)
    far_px = np.array([[500.0, 20.0], [-300.0, 40.0]])
    far_pts = np.array([[8.0, -0.4, 1.0], [-5.0, 0.3, 1.0]])
    padded = AlignmentProblem(prob.observed, prob.rendered, np.vstack([prob.pixels, far_px]),
                              np.vstack([prob.points, far_pts]), K64)
    a, b = lm_step(prob), lm_step(padded)
    assert np.array_equal(a.twist.as_vector(), b.twist.as_vector())
    assert a.num_points_used == b.num_points_used == len(prob)


def test_too_few_points():
    rng = np.random.default_rng(18)
    with pytest.raises(TooFewPoints):
        lm_step(random_problem(rng, n=5))


def test_singular_system_on_flat_features():
    rng = np.random.default_rng(19)
    flat = FeatureMap(np.full((2, 64, 64), 0.3))
    with pytest.raises(SingularSystem):
        lm_step(random_problem(rng, observed=flat, rendered=flat))


def test_summed_mode_is_available():
    prob = ramp_problem()
    upd = lm_step(prob, mode="summed")
    assert np.all(np.isfinite(upd.twist.as_vector()))
    with pytest.raises(ValueError):
        lm_step(prob, mode="bogus")


def test_lm_update_fields():
    upd = lm_step(ramp_problem())
    assert upd.num_points_used <= len(ramp_problem())
    assert np.all(np.isfinite(upd.twist.as_vector()))


@pytest.fixture(scope="module")
def refine_scenes():
    return [generate_scene(seed=300 + s) for s in range(4)]


def test_one_step_reduces_pixel_error(refine_scenes):
    cfg = AlternationConfig(prior_weight=0.0)
    rng = np.random.default_rng(20)
    improved = 0
    trials = 100
    for t in range(trials):
        scene = refine_scenes[t % len(refine_scenes)]
        i = t % len(scene.views)
        gt = scene.gt_poses[i]
        v = scene.views[i]
        observed = analytic_feature_extractor(v.intensity, v.mask, v.depth, cfg.features)
        start = exp_map(perturbation_twist(rng)) @ gt
        prob = view_problem(scene.gt_grid, start, observed, scene.K, cfg)
        after = apply_update(start, lm_step(prob).twist)
        samples = scene.gt_mesh.vertices
        improved += pixel_error(after, gt, scene.K, samples) < pixel_error(start, gt, scene.K, samples)
    assert improved >= 0.9 * trials


# training loss


def test_loss_zero_at_ground_truth():
    rng = np.random.default_rng(21)
    poses = [exp_map(Twist(rng.normal(size=3), rng.normal(size=3))) for _ in range(3)]
    assert pose_refine_loss([Twist()] * 3, poses, poses) == 0.0


def test_loss_matches_matrix_arithmetic():
    rng = np.random.default_rng(22)
    gt = [exp_map(Twist(rng.normal(size=3), rng.normal(size=3))) for _ in range(4)]
    init = [exp_map(Twist(rng.normal(scale=0.05, size=3), rng.normal(scale=0.05, size=3))) @ g for g in gt]
    twists = [Twist(rng.normal(scale=0.01, size=3), rng.normal(scale=0.01, size=3)) for _ in gt]
    expected = 0.0
    for tw, p0, pg in zip(twists, init, gt):
        M = np.eye(4)
        M[:3, :3] += np.array([[0, -tw.rot[2], tw.rot[1]], [tw.rot[2], 0, -tw.rot[0]], [-tw.rot[1], tw.rot[0], 0]])
        M[:3, 3] = tw.trans
        D = M @ np.linalg.inv(p0.matrix()) - np.linalg.inv(pg.matrix())
        expected += np.sum(D ** 2)
    assert pose_refine_loss(twists, init, gt) == pytest.approx(expected, rel=1e-12)
    # zero updates: plain matrix difference
    plain = sum(np.sum((np.linalg.inv(p.matrix()) - np.linalg.inv(g.matrix())) ** 2) for p, g in zip(init, gt))
    assert pose_refine_loss([Twist()] * 4, init, gt) == pytest.approx(plain, rel=1e-12)
    c2w = sum(np.sum((p.matrix() - g.matrix()) ** 2) for p, g in zip(init, gt))
    assert pose_refine_loss([Twist()] * 4, init, gt, frame="camera_to_world") == pytest.approx(c2w, rel=1e-12)


def test_loss_non_negative():
    rng = np.random.default_rng(23)
    for _ in range(1000):
        tw = Twist(rng.normal(size=3), rng.normal(size=3))
        a = exp_map(Twist(rng.normal(size=3), rng.normal(size=3)))
        b = exp_map(Twist(rng.normal(size=3), rng.normal(size=3)))
        assert pose_refine_loss([tw], [a], [b]) >= 0.0


def test_loss_length_mismatch():
    with pytest.raises(LengthMismatch):
        pose_refine_loss([Twist()], [Pose.identity()] * 2, [Pose.identity()] * 2)


def test_linearized_correction_is_first_order_exp():
    tw = Twist([1e-4, -2e-4, 3e-4], [0.1, 0.2, 0.3])
    np.testing.assert_allclose(linearized_correction(tw), exp_map(tw).matrix(), atol=1e-7)


def test_apply_update_corrects_world_to_camera_from_the_left():
    pose = exp_map(Twist([0.1, 0.2, -0.1], [1.0, 0.0, 0.5]))
    tw = Twist([0.01, 0.0, 0.02], [0.0, 0.03, 0.0])
    new = apply_update(pose, tw)
    np.testing.assert_allclose(new.inverse().matrix(), exp_map(tw).matrix() @ pose.inverse().matrix(), atol=1e-12)
    assert log_map(new.inverse() @ pose).norm() > 0
