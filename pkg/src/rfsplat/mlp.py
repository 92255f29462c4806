"""Per-Gaussian signal predictor: a tiny fully-connected network mapping
(transmitter position, azimuth, elevation) to a complex coefficient stored as
(re, im). One weight vector per Gaussian; everything is vectorized over the
Gaussian axis. Hidden activation is ReLU, output is linear.

Flattened weight layout for dims (i, h, o):
    W1 (h*i, row-major) | b1 (h) | W2 (o*h, row-major) | b2 (o)
"""

from __future__ import annotations

import numpy as np

from .scene import DEFAULT_MLP_DIMS, mlp_param_count


def split_weights(weights, dims=DEFAULT_MLP_DIMS):
    """(M, P) flattened weights -> (W1 (M,h,i), b1 (M,h), W2 (M,o,h), b2 (M,o))."""
    i, h, o = dims
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[-1] != mlp_param_count(dims):
        raise ValueError(
            f"weight vector length {weights.shape[-1]} does not match "
            f"architecture {dims} (need {mlp_param_count(dims)})")
    ofs = 0
    W1 = weights[..., ofs:ofs + i * h].reshape(weights.shape[:-1] + (h, i)); ofs += i * h
    b1 = weights[..., ofs:ofs + h]; ofs += h
    W2 = weights[..., ofs:ofs + h * o].reshape(weights.shape[:-1] + (o, h)); ofs += h * o
    b2 = weights[..., ofs:ofs + o]
    return W1, b1, W2, b2


def mlp_forward(weights, tx, azimuth, elevation, dims=DEFAULT_MLP_DIMS):
    """Single forward pass; returns the (re, im) coefficient as a 2-vector."""
    x = np.concatenate([np.asarray(tx, dtype=np.float64).reshape(3),
                        [float(azimuth), float(elevation)]])
    return batch_mlp_forward(np.asarray(weights)[None, :], x[None, :], dims)[0]


def batch_mlp_forward(weights, inputs, dims=DEFAULT_MLP_DIMS):
    """(M, P) weights, (M, in) inputs -> (M, out)."""
    W1, b1, W2, b2 = split_weights(weights, dims)
    pre = np.einsum("mhi,mi->mh", W1, inputs) + b1
    hid = np.maximum(pre, 0.0)
    return np.einsum("moh,mh->mo", W2, hid) + b2


def batch_mlp_backward(weights, inputs, upstream, dims=DEFAULT_MLP_DIMS):
    """Analytic gradients of batch_mlp_forward.

    upstream: (M, out) dL/d(output). Returns (grad_weights (M, P),
    grad_inputs (M, in)).
    """
    i, h, o = dims
    W1, b1, W2, b2 = split_weights(weights, dims)
    inputs = np.asarray(inputs, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    pre = np.einsum("mhi,mi->mh", W1, inputs) + b1
    hid = np.maximum(pre, 0.0)
    g_b2 = upstream
    g_W2 = upstream[:, :, None] * hid[:, None, :]
    g_hid = np.einsum("moh,mo->mh", W2, upstream)
    g_pre = g_hid * (pre > 0.0)
    g_b1 = g_pre
    g_W1 = g_pre[:, :, None] * inputs[:, None, :]
    g_in = np.einsum("mhi,mh->mi", W1, g_pre)
    m = weights.shape[0]
    g_w = np.concatenate([g_W1.reshape(m, h * i), g_b1,
                          g_W2.reshape(m, o * h), g_b2], axis=1)
    return g_w, g_in


def mlp_backward(weights, tx, azimuth, elevation, upstream, dims=DEFAULT_MLP_DIMS):
    """Single-sample wrapper: returns (grad_weights (P,), grad_inputs (in,))."""
    x = np.concatenate([np.asarray(tx, dtype=np.float64).reshape(3),
                        [float(azimuth), float(elevation)]])
    g_w, g_in = batch_mlp_backward(np.asarray(weights)[None, :], x[None, :],
                                   np.asarray(upstream, dtype=np.float64)[None, :],
                                   dims)
    return g_w[0], g_in[0]


def direction_angles(mu_view):
    """Azimuth/elevation (radians) of receiver-frame centers (M, 3)."""
    mu_view = np.atleast_2d(np.asarray(mu_view, dtype=np.float64))
    x, y, z = mu_view[:, 0], mu_view[:, 1], mu_view[:, 2]
    theta = np.arctan2(x, z)
    phi = np.arctan2(y, np.sqrt(x * x + z * z))
    return theta, phi


def direction_angles_backward(mu_view, g_theta, g_phi):
    """Chain dL/d(theta, phi) back to the receiver-frame centers (M, 3)."""
    mu_view = np.atleast_2d(np.asarray(mu_view, dtype=np.float64))
    x, y, z = mu_view[:, 0], mu_view[:, 1], mu_view[:, 2]
    rho2 = x * x + z * z
    rho = np.sqrt(rho2)
    r2 = rho2 + y * y
    g = np.zeros_like(mu_view)
    g[:, 0] = g_theta * (z / rho2) + g_phi * (-x * y / (r2 * rho))
    g[:, 2] = g_theta * (-x / rho2) + g_phi * (-y * z / (r2 * rho))
    g[:, 1] = g_phi * (rho / r2)
    return g


def batch_forward(cloud, indices, tx, pose, dims=None):
    """Signal coefficients for the selected Gaussians at transmitter tx.

    Angles are taken from the receiver-frame direction of each center.
    Returns (M, 2), rows ordered as `indices`.
    """
    from .geometry import view_transform

    indices = np.asarray(indices, dtype=np.intp)
    if indices.size == 0:
        return np.zeros((0, 2))
    dims = dims or cloud.mlp_dims
    mu_v = view_transform(cloud.positions[indices], pose)
    theta, phi = direction_angles(mu_v)
    tx = np.asarray(tx, dtype=np.float64).reshape(3)
    inputs = np.concatenate(
        [np.broadcast_to(tx, (indices.size, 3)),
         theta[:, None], phi[:, None]], axis=1)
    return batch_mlp_forward(cloud.mlp_weights[indices], inputs, dims)
