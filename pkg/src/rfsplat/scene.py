"""Gaussian cloud state: parameterization, activations, initialization, and
the GSPC checkpoint format.

Learnable arrays are kept raw (log-scales, quaternion before normalization,
opacity logits); activations are applied on read so the covariance is
positive definite and opacities stay in (0, 1) by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

GSPC_MAGIC = b"GSPC"
GSPC_VERSION = 1

DEFAULT_MLP_DIMS = (5, 16, 2)

# sigmoid(-2) ~ 0.12: the "small constant" starting opacity.
DEFAULT_OPACITY_LOGIT = -2.0


def mlp_param_count(dims=DEFAULT_MLP_DIMS):
    i, h, o = dims
    return i * h + h + h * o + o


@dataclass
class SceneBounds:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        self.min_corner = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        self.max_corner = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if not np.all(self.min_corner < self.max_corner):
            raise ValueError("degenerate scene bounds")

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.max_corner - self.min_corner))


@dataclass
class GaussianCloud:
    """Plain value holding the N learnable primitives."""

    positions: np.ndarray      # (N, 3)
    log_scales: np.ndarray     # (N, 3)
    rotations: np.ndarray      # (N, 4) quaternions (w, x, y, z), unnormalized
    raw_opacities: np.ndarray  # (N, 1) logits
    mlp_weights: np.ndarray    # (N, P)
    mlp_dims: tuple = DEFAULT_MLP_DIMS

    def __post_init__(self):
        n = self.positions.shape[0]
        if n == 0:
            raise ValueError("cloud must contain at least one Gaussian")
        shapes = {
            "positions": (n, 3), "log_scales": (n, 3), "rotations": (n, 4),
            "raw_opacities": (n, 1),
            "mlp_weights": (n, mlp_param_count(self.mlp_dims)),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise ValueError(f"{name}: expected shape {want}, got {arr.shape}")

    @property
    def n(self):
        return self.positions.shape[0]

    def opacities(self):
        return activate_opacity(self.raw_opacities[:, 0])

    def unit_quaternions(self):
        return normalize_quaternions(self.rotations)

    def scales(self):
        return np.exp(self.log_scales)

    def covariances(self):
        """R S S^T R^T for every Gaussian: (N, 3, 3)."""
        R = quaternions_to_matrices(self.unit_quaternions())
        M = R * self.scales()[:, None, :]
        return M @ np.swapaxes(M, 1, 2)

    def copy(self):
        return GaussianCloud(
            self.positions.copy(), self.log_scales.copy(), self.rotations.copy(),
            self.raw_opacities.copy(), self.mlp_weights.copy(), self.mlp_dims)

    def param_arrays(self):
        """Learnable arrays in a fixed order (shared with optimizer/gradients)."""
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "raw_opacities": self.raw_opacities,
            "mlp_weights": self.mlp_weights,
        }


def activate_opacity(raw):
    """Numerically stable sigmoid."""
    raw = np.asarray(raw, dtype=np.float64)
    out = np.empty_like(raw)
    pos = raw >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-raw[pos]))
    e = np.exp(raw[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def normalize_quaternions(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("zero quaternion")
    return q / norm


def quaternions_to_matrices(q):
    """Unit quaternions (..., 4), (w, x, y, z) -> rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_backward(q_raw, grad_R):
    """Gradient of a loss through quaternions_to_matrices(normalize(q_raw)).

    q_raw: (..., 4) unnormalized quaternions; grad_R: (..., 3, 3).
    Returns grad wrt q_raw, (..., 4).
    """
    q_raw = np.asarray(q_raw, dtype=np.float64)
    qh = normalize_quaternions(q_raw)
    w, x, y, z = qh[..., 0], qh[..., 1], qh[..., 2], qh[..., 3]
    zero = np.zeros_like(w)
    # dR/d(qhat_k), each (..., 3, 3)
    dRw = 2 * np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1)], -2)
    dRx = 2 * np.stack([
        np.stack([zero, y, z], -1),
        np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1)], -2)
    dRy = 2 * np.stack([
        np.stack([-2 * y, x, w], -1),
        np.stack([x, zero, z], -1),
        np.stack([-w, z, -2 * y], -1)], -2)
    dRz = 2 * np.stack([
        np.stack([-2 * z, -w, x], -1),
        np.stack([w, -2 * z, y], -1),
        np.stack([x, y, zero], -1)], -2)
    g_hat = np.stack(
        [np.sum(grad_R * d, axis=(-2, -1)) for d in (dRw, dRx, dRy, dRz)], -1)
    # backward through normalization: (I - qh qh^T) / |q|
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    return (g_hat - qh * np.sum(g_hat * qh, axis=-1, keepdims=True)) / norm


def build_covariance(quaternion, log_scale):
    """R S S^T R^T for a single Gaussian; symmetric positive definite."""
    q = normalize_quaternions(np.asarray(quaternion, dtype=np.float64).reshape(4))
    R = quaternions_to_matrices(q)
    M = R * np.exp(np.asarray(log_scale, dtype=np.float64).reshape(3))[None, :]
    return M @ M.T


def init_uniform(bounds: SceneBounds, n, seed, init_scale=None,
                 init_opacity_logit=DEFAULT_OPACITY_LOGIT,
                 mlp_dims=DEFAULT_MLP_DIMS):
    """Seeded uniform initialization of a fresh cloud.

    Positions uniform in bounds, identity rotations, constant log-scale
    (default 2% of the bounds diagonal), constant opacity logit, standard
    normal MLP weights. Bit-reproducible for a fixed seed (PCG64 stream).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if init_scale is None:
        init_scale = 0.02 * bounds.diagonal
    if init_scale <= 0:
        raise ValueError("init_scale must be > 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    positions = rng.uniform(bounds.min_corner, bounds.max_corner, size=(n, 3))
    log_scales = np.full((n, 3), np.log(init_scale))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    raw_opacities = np.full((n, 1), float(init_opacity_logit))
    mlp_weights = rng.standard_normal((n, mlp_param_count(mlp_dims)))
    return GaussianCloud(positions, log_scales, rotations, raw_opacities,
                         mlp_weights, mlp_dims)


def save_checkpoint(path, cloud: GaussianCloud):
    """Write the GSPC binary checkpoint (little-endian f32 payload)."""
    i, h, o = cloud.mlp_dims
    with open(path, "wb") as f:
        f.write(GSPC_MAGIC)
        f.write(struct.pack("<4I", GSPC_VERSION, cloud.n, i, h))
        f.write(struct.pack("<I", o))
        for arr in cloud.param_arrays().values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != GSPC_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected GSPC")
        version, n, mi, mh, mo = struct.unpack("<5I", f.read(20))
        if version != GSPC_VERSION:
            raise ValueError(f"{path}: unsupported GSPC version {version}")
        dims = (mi, mh, mo)
        shapes = [(n, 3), (n, 3), (n, 4), (n, 1), (n, mlp_param_count(dims))]
        arrays = []
        for shape in shapes:
            count = shape[0] * shape[1]
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"{path}: truncated GSPC payload")
            arrays.append(np.frombuffer(buf, dtype="<f4").astype(np.float64)
                          .reshape(shape))
    return GaussianCloud(*arrays, mlp_dims=dims)
