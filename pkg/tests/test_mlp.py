import numpy as np
import pytest

from rfsplat.geometry import ViewPose
from rfsplat.mlp import (batch_forward, batch_mlp_backward, batch_mlp_forward,
                         direction_angles, direction_angles_backward,
                         mlp_backward, mlp_forward, split_weights)
from rfsplat.scene import mlp_param_count

from conftest import make_cloud

P = mlp_param_count()


def _weights_with(b2=(0.0, 0.0)):
    w = np.zeros(P)
    w[-2:] = b2
    return w


class TestForward:
    def test_zero_weights_zero_output(self):
        out = mlp_forward(np.zeros(P), [1.0, 2.0, 3.0], 0.5, 0.2)
        assert np.array_equal(out, [0.0, 0.0])

    def test_output_bias_passthrough(self):
        out = mlp_forward(_weights_with((0.7, -0.3)), [0, 0, 0], 0.0, 0.0)
        assert np.allclose(out, [0.7, -0.3])

    def test_known_single_path(self):
        # one hidden unit fed by azimuth only: out_re = relu(2*az + 1)
        w = np.zeros(P)
        W1, b1, W2, b2 = split_weights(w[None, :])
        w[3] = 2.0          # W1[0, 3]: azimuth into hidden 0
        w[5 * 16] = 1.0     # b1[0]
        w[5 * 16 + 16] = 1.0  # W2[0, 0]
        assert np.allclose(mlp_forward(w, [0, 0, 0], 0.5, 0.0), [2.0, 0.0])
        assert np.allclose(mlp_forward(w, [0, 0, 0], -1.0, 0.0), [0.0, 0.0])

    def test_angle_not_periodic_input(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=P)
        a = mlp_forward(w, [1, 1, 1], 0.3, 0.1)
        b = mlp_forward(w, [1, 1, 1], 0.3 + 2 * np.pi, 0.1)
        assert not np.allclose(a, b)

    def test_wrong_length_raises(self):
        with pytest.raises(ValueError, match="length"):
            mlp_forward(np.zeros(P - 1), [0, 0, 0], 0.0, 0.0)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(1)
        wts = rng.normal(size=(6, P))
        inp = rng.normal(size=(6, 5))
        out = batch_mlp_forward(wts, inp)
        for m in range(6):
            single = mlp_forward(wts[m], inp[m, :3], inp[m, 3], inp[m, 4])
            assert np.allclose(out[m], single)


class TestBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for trial in range(20):
            w = rng.normal(size=P)
            inp = rng.normal(size=5)
            up = rng.normal(size=2)

            g_w, g_in = mlp_backward(w, inp[:3], inp[3], inp[4], up)
            step = 1e-6

            def loss(wv, iv):
                return float(mlp_forward(wv, iv[:3], iv[3], iv[4]) @ up)

            # skip coordinates near ReLU kinks
            W1, b1, _, _ = split_weights(w[None, :])
            pre = (W1[0] @ inp + b1[0])
            if np.any(np.abs(pre) < 1e-6):
                continue
            for i in rng.choice(P, size=25, replace=False):
                wp, wm = w.copy(), w.copy()
                wp[i] += step; wm[i] -= step
                fd = (loss(wp, inp) - loss(wm, inp)) / (2 * step)
                assert abs(g_w[i] - fd) <= 1e-4 * max(1.0, abs(fd))
            for i in range(5):
                ip, im = inp.copy(), inp.copy()
                ip[i] += step; im[i] -= step
                fd = (loss(w, ip) - loss(w, im)) / (2 * step)
                assert abs(g_in[i] - fd) <= 1e-4 * max(1.0, abs(fd))

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(3)
        g_w, g_in = mlp_backward(rng.normal(size=P), [1, 2, 3], 0.1, 0.2,
                                 [0.0, 0.0])
        assert not g_w.any() and not g_in.any()

    def test_dead_relu_blocks_gradient(self):
        # drive every hidden pre-activation negative: W1/b1 grads vanish
        w = np.zeros(P)
        w[5 * 16:5 * 16 + 16] = -1.0   # b1 = -1
        g_w, g_in = mlp_backward(w, [0, 0, 0], 0.0, 0.0, [1.0, 1.0])
        i, h, o = 5, 16, 2
        assert not g_w[:i * h + h].any()   # W1 and b1
        assert not g_in.any()
        assert g_w[-o:].tolist() == [1.0, 1.0]  # b2 passthrough


class TestDirectionAngles:
    def test_known_directions(self):
        th, ph = direction_angles([[0.0, 1.0, 1.0]])
        assert np.isclose(th[0], 0.0) and np.isclose(ph[0], np.pi / 4)
        th, ph = direction_angles([[1.0, 0.0, 0.0]])
        assert np.isclose(th[0], np.pi / 2) and np.isclose(ph[0], 0.0)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            p = rng.uniform(0.2, 2.0, 3)
            u = rng.normal(size=2)
            g = direction_angles_backward(p[None, :], u[:1], u[1:])[0]
            step = 1e-7
            for i in range(3):
                pp, pm = p.copy(), p.copy()
                pp[i] += step; pm[i] -= step
                tp, fp = direction_angles(pp[None, :])
                tm, fm = direction_angles(pm[None, :])
                fd = (u[0] * (tp[0] - tm[0]) + u[1] * (fp[0] - fm[0])) / (2 * step)
                assert abs(g[i] - fd) <= 1e-5 * max(1.0, abs(fd))


class TestBatchForward:
    def test_rows_follow_indices_and_are_independent(self, origin_pose):
        cloud = make_cloud(10, seed=5)
        tx = np.array([0.5, 0.5, 0.5])
        full = batch_forward(cloud, np.arange(10), tx, origin_pose)
        sub = batch_forward(cloud, np.array([7, 2]), tx, origin_pose)
        assert np.allclose(sub, full[[7, 2]])

    def test_empty_indices(self, origin_pose):
        cloud = make_cloud(3, seed=5)
        out = batch_forward(cloud, np.array([], dtype=int), [0, 0, 0],
                            origin_pose)
        assert out.shape == (0, 2)
