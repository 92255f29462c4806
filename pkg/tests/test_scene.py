import numpy as np
import pytest

from rfsplat.scene import (GaussianCloud, SceneBounds, activate_opacity,
                           build_covariance, init_uniform, load_checkpoint,
                           mlp_param_count, normalize_quaternions,
                           quaternions_to_matrices, rotation_backward,
                           save_checkpoint)

from conftest import make_cloud


class TestActivations:
    def test_opacity_values(self):
        assert activate_opacity(0.0) == 0.5
        assert np.isclose(activate_opacity(-2.0), 1.0 / (1.0 + np.e ** 2))
        assert np.isclose(activate_opacity(40.0), 1.0, atol=1e-15)
        assert activate_opacity(-800.0) == 0.0  # no overflow

    def test_opacity_open_interval(self):
        rng = np.random.default_rng(0)
        v = activate_opacity(rng.normal(0, 10, 1000))
        assert np.all(v >= 0.0) and np.all(v <= 1.0)

    def test_quaternion_normalization(self):
        q = normalize_quaternions([[2.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]])
        assert np.allclose(np.linalg.norm(q, axis=1), 1.0)
        assert np.allclose(normalize_quaternions(q), q)  # idempotent
        with pytest.raises(ValueError):
            normalize_quaternions([0.0, 0.0, 0.0, 0.0])

    def test_identity_quaternion(self):
        R = quaternions_to_matrices(np.array([1.0, 0.0, 0.0, 0.0]))
        assert np.allclose(R, np.eye(3))

    def test_quaternion_matrices_are_rotations(self):
        rng = np.random.default_rng(1)
        q = normalize_quaternions(rng.normal(size=(100, 4)))
        R = quaternions_to_matrices(q)
        assert np.allclose(np.einsum("nij,nkj->nik", R, R),
                           np.broadcast_to(np.eye(3), (100, 3, 3)), atol=1e-12)
        assert np.allclose(np.linalg.det(R), 1.0)

    def test_half_turn_about_z(self):
        R = quaternions_to_matrices(np.array([0.0, 0.0, 0.0, 1.0]))
        assert np.allclose(R, np.diag([-1.0, -1.0, 1.0]))


class TestCovariance:
    def test_identity_rotation_diagonal(self):
        cov = build_covariance([1.0, 0.0, 0.0, 0.0], np.log([1.0, 2.0, 3.0]))
        assert np.allclose(cov, np.diag([1.0, 4.0, 9.0]))

    def test_eigenvalues_match_scales(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            q = rng.normal(size=4)
            ls = rng.uniform(-1.5, 0.5, 3)
            cov = build_covariance(q, ls)
            eig = np.sort(np.linalg.eigvalsh(cov))
            assert np.allclose(eig, np.sort(np.exp(2 * ls)), rtol=1e-10)

    def test_cloud_covariances_match_single(self):
        cloud = make_cloud(8, seed=3)
        covs = cloud.covariances()
        for i in range(8):
            assert np.allclose(
                covs[i], build_covariance(cloud.rotations[i],
                                          cloud.log_scales[i]))


class TestRotationBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            q = rng.normal(size=4)
            U = rng.normal(size=(3, 3))  # random linear functional of R

            def f(qv):
                return float(np.sum(
                    U * quaternions_to_matrices(normalize_quaternions(qv))))

            g = rotation_backward(q, U)
            step = 1e-6
            fd = np.empty(4)
            for i in range(4):
                dp = np.zeros(4); dp[i] = step
                fd[i] = (f(q + dp) - f(q - dp)) / (2 * step)
            assert np.abs(g - fd).max() <= 1e-6 * max(1.0, np.abs(fd).max())


class TestInit:
    def test_shapes_and_constants(self):
        b = SceneBounds([0, 0, 0], [1, 1, 1])
        c = init_uniform(b, 7, seed=9, init_scale=0.1)
        assert c.n == 7
        assert c.mlp_weights.shape == (7, mlp_param_count())
        assert np.allclose(c.log_scales, np.log(0.1))
        assert np.allclose(c.rotations, [1.0, 0.0, 0.0, 0.0])
        assert np.allclose(c.raw_opacities, -2.0)
        assert np.all(c.positions >= 0.0) and np.all(c.positions <= 1.0)

    def test_default_scale_is_two_percent_of_diagonal(self):
        b = SceneBounds([0, 0, 0], [3, 4, 0.0001])
        c = init_uniform(b, 2, seed=0)
        assert np.allclose(np.exp(c.log_scales[0, 0]), 0.02 * b.diagonal,
                           rtol=1e-6)

    def test_seed_reproducible(self):
        b = SceneBounds([-1, 0, -1], [1, 1, 1])
        c1 = init_uniform(b, 50, seed=123)
        c2 = init_uniform(b, 50, seed=123)
        for k, v in c1.param_arrays().items():
            assert np.array_equal(v, c2.param_arrays()[k]), k
        c3 = init_uniform(b, 50, seed=124)
        assert not np.array_equal(c1.positions, c3.positions)

    def test_validation(self):
        b = SceneBounds([0, 0, 0], [1, 1, 1])
        with pytest.raises(ValueError):
            init_uniform(b, 0, seed=0)
        with pytest.raises(ValueError):
            init_uniform(b, 4, seed=0, init_scale=-1.0)
        with pytest.raises(ValueError):
            SceneBounds([0, 0, 0], [1, -1, 1])
        with pytest.raises(ValueError):
            GaussianCloud(np.zeros((2, 3)), np.zeros((2, 3)),
                          np.zeros((2, 4)), np.zeros((2, 1)),
                          np.zeros((2, 7)))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cloud = make_cloud(17, seed=6)
        path = tmp_path / "c.gspc"
        save_checkpoint(path, cloud)
        back = load_checkpoint(path)
        assert back.n == cloud.n
        assert back.mlp_dims == cloud.mlp_dims
        for k, v in cloud.param_arrays().items():
            # payload is f32: round-trip exact at f32 precision
            assert np.array_equal(back.param_arrays()[k],
                                  v.astype(np.float32).astype(np.float64)), k

    def test_bit_identical_rewrite(self, tmp_path):
        cloud = make_cloud(5, seed=7)
        p1, p2 = tmp_path / "a.gspc", tmp_path / "b.gspc"
        save_checkpoint(p1, cloud)
        save_checkpoint(p2, cloud)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.gspc"
        p.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)

    def test_truncated(self, tmp_path):
        cloud = make_cloud(5, seed=7)
        p = tmp_path / "c.gspc"
        save_checkpoint(p, cloud)
        (tmp_path / "t.gspc").write_bytes(p.read_bytes()[:-10])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(tmp_path / "t.gspc")
