import math
from dataclasses import replace

import numpy as np
import pytest

from splatgcn.errors import ConfigError, DimensionError
from splatgcn.render import (
    GaussianPrimitive2D,
    RenderConfig,
    build_covariance,
    evaluate_gaussian,
    pixel_centers,
    project_to_view,
    render_frame,
    render_sequence,
    render_sequence_with_grad,
)
from splatgcn.skeleton import KinematicSequence, SkeletonSequence, compute_velocity, normalize_sequence


def random_kinematics(seed=0, frames=6, joints=4):
    rng = np.random.default_rng(seed)
    seq = SkeletonSequence(rng.uniform(-0.9, 0.9, (frames, joints, 3)))
    return compute_velocity(normalize_sequence(seq))


def brute_force_render(kin, cfg):
    """Full-grid, truncation-free reference rasterizer."""
    from splatgcn.render import _covariance_arrays

    views = cfg.views_for(kin.num_channels)
    xs, ys = pixel_centers(cfg.width), pixel_centers(cfg.height)
    out = np.zeros((len(views), kin.num_frames, cfg.height, cfg.width))
    for vi, view in enumerate(views):
        pos2d, vel2d = project_to_view(kin.positions, kin.velocities, view)
        _, _, _, sigma = _covariance_arrays(vel2d, cfg)
        for t in range(kin.num_frames):
            acc = np.zeros((cfg.height, cfg.width))
            for j in range(pos2d.shape[1]):
                inv = np.linalg.inv(sigma[t, j])
                dx = xs[None, :] - pos2d[t, j, 0]
                dy = ys[:, None] - pos2d[t, j, 1]
                q = inv[0, 0] * dx ** 2 + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy ** 2
                g = np.exp(-0.5 * q)
                acc = np.maximum(acc, g) if cfg.aggregation == "max" else acc + g
            out[vi, t] = acc if cfg.aggregation == "max" else np.minimum(acc, 1.0)
    return out


class TestProjection:
    def test_xy_view_selects_first_two(self):
        pos = np.array([[[1.0, 2.0, 3.0]]])
        p, v = project_to_view(pos, pos, (0, 1))
        np.testing.assert_array_equal(p[0, 0], [1.0, 2.0])

    def test_zx_view_ordering(self):
        pos = np.array([[[1.0, 2.0, 3.0]]])
        p, _ = project_to_view(pos, pos, (2, 0))
        np.testing.assert_array_equal(p[0, 0], [3.0, 1.0])

    def test_axis_out_of_range_for_2d(self):
        pos = np.zeros((2, 3, 2))
        with pytest.raises(DimensionError):
            project_to_view(pos, pos, (1, 2))

    def test_view_lists_by_channel_count(self):
        cfg = RenderConfig()
        assert cfg.views_for(3) == ((0, 1), (1, 2), (2, 0))
        assert cfg.views_for(2) == ((0, 1),)


class TestCovariance:
    def test_zero_velocity_isotropic_at_default_scale(self):
        prim = build_covariance(np.zeros(2), RenderConfig(log_scale=-2.0))
        expected = math.exp(-4.0) * np.eye(2)
        np.testing.assert_allclose(prim.sigma, expected, rtol=1e-12)
        assert prim.theta == 0.0

    def test_unit_x_velocity_hand_computed(self):
        cfg = RenderConfig(log_scale=math.log(0.1), alpha=2.0)
        prim = build_covariance(np.array([1.0, 0.0]), cfg)
        sx = 0.1 * (1.0 + 2.0 * math.tanh(1.0))
        assert prim.theta == 0.0
        assert prim.scale_x == pytest.approx(sx, rel=1e-12)
        np.testing.assert_allclose(prim.sigma, np.diag([sx ** 2, 0.01]), rtol=1e-12)

    def test_pure_y_velocity_axis_aligned(self):
        for c in (0.1, 1.0, 7.0):
            prim = build_covariance(np.array([0.0, c]), RenderConfig())
            assert abs(prim.sigma[0, 1]) < 1e-16
            assert prim.sigma[1, 1] >= prim.sigma[0, 0]

    def test_det_trace_eigen_identities(self):
        # acceptance-grade identities on a quick sample
        rng = np.random.default_rng(0)
        cfg = RenderConfig()
        for _ in range(200):
            v = rng.normal(scale=2.0, size=2)
            prim = build_covariance(v, cfg)
            det = np.linalg.det(prim.sigma)
            assert det == pytest.approx(prim.scale_x ** 2 * prim.scale_y ** 2, rel=1e-12)
            assert np.trace(prim.sigma) == pytest.approx(
                prim.scale_x ** 2 + prim.scale_y ** 2, rel=1e-12)
            eig = np.sort(np.linalg.eigvalsh(prim.sigma))
            np.testing.assert_allclose(
                eig, [prim.scale_y ** 2, prim.scale_x ** 2], rtol=1e-9)

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(1)
        cfg = RenderConfig()
        for _ in range(50):
            v = rng.normal(size=2)
            if np.linalg.norm(v) <= 1e-6:
                continue
            phi = rng.uniform(0, 2 * np.pi)
            rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
            a = build_covariance(rot @ v, cfg).sigma
            b = rot @ build_covariance(v, cfg).sigma @ rot.T
            np.testing.assert_allclose(a, b, atol=1e-9)

    def test_elongation_bounded_and_saturating(self):
        cfg = RenderConfig(alpha=2.0)
        fast = build_covariance(np.array([15.0, 0.0]), cfg)
        assert fast.scale_x / fast.scale_y < 3.0  # strict below 1 + alpha
        huge = build_covariance(np.array([1e6, 0.0]), cfg)
        assert huge.scale_x / huge.scale_y == pytest.approx(3.0, rel=1e-9)

    def test_isotropic_flag_ignores_velocity(self):
        cfg = RenderConfig(isotropic=True)
        prim = build_covariance(np.array([5.0, -3.0]), cfg)
        np.testing.assert_allclose(prim.sigma, cfg.base_scale ** 2 * np.eye(2), rtol=1e-12)


class TestEvaluateGaussian:
    def test_value_at_mean_is_one(self):
        prim = build_covariance(np.array([0.3, 0.1]), RenderConfig())
        prim.mu = np.array([0.2, -0.1])
        assert evaluate_gaussian(prim, prim.mu) == 1.0

    def test_mahalanobis_four_gives_exp_minus_two(self):
        prim = GaussianPrimitive2D(sigma=np.diag([0.04, 0.01]), theta=0.0,
                                   scale_x=0.2, scale_y=0.1, mu=np.zeros(2))
        # point at squared Mahalanobis distance 4 along x: x = 2 * 0.2
        assert evaluate_gaussian(prim, [0.4, 0.0]) == pytest.approx(math.exp(-2.0), rel=1e-12)

    def test_isotropic_depends_only_on_distance(self):
        prim = GaussianPrimitive2D(sigma=0.09 * np.eye(2), theta=0.0,
                                   scale_x=0.3, scale_y=0.3, mu=np.zeros(2))
        r = 0.17
        vals = [evaluate_gaussian(prim, [r * np.cos(a), r * np.sin(a)])
                for a in np.linspace(0, 2 * np.pi, 9)]
        np.testing.assert_allclose(vals, vals[0], rtol=1e-12)


class TestRenderFrame:
    def test_joint_at_pixel_center_hits_one(self):
        cfg = RenderConfig()
        xs, ys = pixel_centers(cfg.width), pixel_centers(cfg.height)
        prim = build_covariance(np.zeros(2), cfg)
        prim.mu = np.array([xs[10], ys[20]])
        frame = render_frame([prim], cfg)
        assert frame[20, 10] == pytest.approx(1.0, abs=1e-12)

    def test_coincident_joints_idempotent_under_max(self):
        cfg = RenderConfig()
        prim = build_covariance(np.array([0.2, 0.1]), cfg)
        prim.mu = np.array([0.1, 0.3])
        one = render_frame([prim], cfg)
        two = render_frame([prim, prim], cfg)
        np.testing.assert_array_equal(one, two)

    def test_disjoint_clamped_sum_equals_sum_of_singles(self):
        cfg = RenderConfig(aggregation="clamped_sum", log_scale=-3.5)
        prims = []
        for mu in ([-0.7, -0.7], [0.7, 0.7]):
            p = build_covariance(np.zeros(2), cfg)
            p.mu = np.array(mu)
            prims.append(p)
        combined = render_frame(prims, cfg)
        singles = sum(render_frame([p], cfg) for p in prims)
        np.testing.assert_allclose(combined, np.minimum(singles, 1.0), atol=1e-15)

    def test_zero_velocity_heatmap_rot90_invariant(self):
        cfg = RenderConfig()
        prim = build_covariance(np.zeros(2), cfg)
        prim.mu = np.zeros(2)  # grid center: exact symmetry
        frame = render_frame([prim], cfg)
        np.testing.assert_array_equal(frame, np.rot90(frame))

    def test_out_of_bounds_mean_clamped_with_warning(self, caplog):
        cfg = RenderConfig()
        prim = build_covariance(np.zeros(2), cfg)
        prim.mu = np.array([1.5, 0.0])
        with caplog.at_level("WARNING", logger="splatgcn.render"):
            frame = render_frame([prim], cfg)
        assert "clamped" in caplog.text
        assert frame.max() > 0.5  # splat landed at the boundary


class TestRenderSequence:
    def test_default_3d_shapes(self):
        kin = random_kinematics()
        stack, grids = render_sequence(kin, RenderConfig())
        assert stack.values.shape == (3, 6, 32, 32)
        assert len(grids) == 3
        assert grids[0].mu.shape == (6, 4, 2)

    def test_2d_input_single_view(self):
        rng = np.random.default_rng(5)
        kin = compute_velocity(normalize_sequence(
            SkeletonSequence(rng.uniform(-1, 1, (4, 3, 2)))))
        stack, grids = render_sequence(kin, RenderConfig())
        assert stack.values.shape == (1, 4, 32, 32)

    def test_static_sequence_constant_over_time(self):
        pos = np.tile(np.array([[[0.2, -0.1, 0.4], [-0.3, 0.5, 0.0]]]), (5, 1, 1))
        kin = compute_velocity(normalize_sequence(SkeletonSequence(pos)))
        stack, _ = render_sequence(kin, RenderConfig())
        for t in range(1, 5):
            np.testing.assert_array_equal(stack.values[:, t], stack.values[:, 0])

    def test_max_values_within_unit_interval(self):
        stack, _ = render_sequence(random_kinematics(2), RenderConfig())
        assert stack.values.min() >= 0.0
        assert stack.values.max() <= 1.0

    def test_double_speed_increases_directional_second_moment(self):
        # one joint on the same straight path, sampled at 1x and 2x speed
        def line_kin(step):
            t = np.arange(8)
            pos = np.zeros((8, 1, 3))
            pos[:, 0, 0] = -0.4 + step * t
            return compute_velocity(SkeletonSequence(pos))

        def x_moment(kin):
            stack, _ = render_sequence(kin, RenderConfig())
            frame = stack.values[0, 3]
            xs = pixel_centers(32)
            col_mass = frame.sum(axis=0)
            mean = (col_mass * xs).sum() / col_mass.sum()
            return (col_mass * (xs - mean) ** 2).sum() / col_mass.sum()

        slow = x_moment(line_kin(0.05))
        fast = x_moment(line_kin(0.10))
        assert fast > slow * 1.05

    def test_matches_brute_force_within_truncation_bound(self):
        kin = random_kinematics(7)
        for agg in ("max", "clamped_sum"):
            cfg = RenderConfig(aggregation=agg)
            stack, _ = render_sequence(kin, cfg)
            ref = brute_force_render(kin, cfg)
            per_joint = math.exp(-cfg.truncation_sigmas ** 2 / 2)
            bound = per_joint * (kin.num_joints if agg == "clamped_sum" else 1.0)
            assert np.abs(stack.values - ref).max() <= bound + 1e-12

    def test_render_frame_agrees_with_sequence_path(self):
        kin = random_kinematics(8, frames=3, joints=3)
        cfg = RenderConfig()
        stack, grids = render_sequence(kin, cfg)
        for t in range(3):
            prims = [grids[0].primitive(t, v) for v in range(3)]
            np.testing.assert_array_equal(render_frame(prims, cfg), stack.values[0, t])

    def test_primitive_grids_are_psd(self):
        _, grids = render_sequence(random_kinematics(9), RenderConfig())
        for grid in grids:
            np.linalg.cholesky(grid.sigma.reshape(-1, 2, 2))


class TestLogScaleDerivative:
    @pytest.mark.parametrize("agg", ["max", "clamped_sum"])
    def test_matches_central_differences(self, agg):
        kin = random_kinematics(11)
        cfg = RenderConfig(aggregation=agg)
        stack, _, deriv = render_sequence_with_grad(kin, cfg)
        h = 1e-5
        hi, _ = render_sequence(kin, replace(cfg, log_scale=cfg.log_scale + h))
        lo, _ = render_sequence(kin, replace(cfg, log_scale=cfg.log_scale - h))
        fd = (hi.values - lo.values) / (2 * h)
        rng = np.random.default_rng(0)
        flat = np.arange(fd.size)
        picks = rng.choice(flat, size=100, replace=False)
        rel = np.abs(fd.reshape(-1)[picks] - deriv.reshape(-1)[picks]) / np.maximum(
            np.maximum(np.abs(fd.reshape(-1)[picks]), np.abs(deriv.reshape(-1)[picks])), 1e-8)
        assert rel.max() < 1e-6


class TestConfigValidation:
    def test_resolution_floor(self):
        with pytest.raises(ConfigError):
            RenderConfig(height=1)

    def test_aggregation_name(self):
        with pytest.raises(ConfigError):
            RenderConfig(aggregation="mean")

    def test_truncation_positive(self):
        with pytest.raises(ConfigError):
            RenderConfig(truncation_sigmas=0.0)


class TestExport:
    def test_pgm_csv_sidecar_files(self, tmp_path):
        from splatgcn.render import export_heatmaps

        kin = random_kinematics(12, frames=2, joints=2)
        stack, _ = render_sequence(kin, RenderConfig(), source="unit")
        export_heatmaps(stack, tmp_path)
        pgms = sorted(tmp_path.glob("*.pgm"))
        csvs = sorted(tmp_path.glob("*.csv"))
        assert len(pgms) == len(csvs) == 3 * 2
        header = pgms[0].read_text().splitlines()
        assert header[0] == "P2"
        assert header[1] == "32 32"
        # CSV is a lossless oracle
        frame = np.loadtxt(csvs[0], delimiter=",")
        np.testing.assert_array_equal(frame, stack.values[0, 0])
        assert (tmp_path / "heatmaps.json").exists()
