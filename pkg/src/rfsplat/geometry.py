"""Receiver-frame geometry: viewing transform, equirectangular hemisphere
projection, its analytic Jacobian (and second derivatives for the covariance
backward pass), covariance projection to 2D, and view culling.

Conventions: the receiver sits at the origin of the view frame, +z is the
forward azimuth reference, +y points at the zenith. A pixel grid of width w
spans azimuth [-pi, pi] (periodic) and height h spans elevation [0, pi/2],
with row 0 at the horizon. Pixel (u, v) has its center at (u+0.5, v+0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Anti-aliasing floor added to the 2D covariance diagonal before inversion
# (prevents degenerate conics for sub-pixel footprints).
COV2D_REG = 0.3

# Footprints are truncated where the unclamped opacity falls below the
# compositing skip threshold 1/255: sigma * exp(-q/2) < 1/255 for sigma <= 1
# implies q > 2*ln(255), so a radius of sqrt(2*ln(255)) sigma-units loses
# nothing that the renderer would composite.
FOOTPRINT_SIGMA = float(np.sqrt(2.0 * np.log(255.0)))

NEAR_PLANE = 0.05
FAR_PLANE = 1000.0

# Elevation clamp below the zenith where the equirectangular Jacobian blows up.
POLE_CLAMP_DEG = 89.0


@dataclass
class ViewPose:
    """Receiver position and world-to-receiver rotation."""

    rx_position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.rx_position = np.asarray(self.rx_position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-9):
            raise ValueError("ViewPose.rotation must be orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("ViewPose.rotation must be a proper rotation (det +1)")


@dataclass
class ProjectedGaussian:
    """Screen-space footprint of one Gaussian."""

    mean2d: np.ndarray        # (p_x, p_y) pixels
    conic: np.ndarray         # (a, b, c): inverse 2x2 covariance, upper triangle
    depth: float              # radial distance from receiver, meters
    bbox: tuple               # (x0, x1, y0, y1) integer pixel rect, x may exceed w (wraps)
    source_index: int


def view_transform(position, pose: ViewPose):
    """W (mu - x_rx): world point into the receiver frame."""
    p = np.asarray(position, dtype=np.float64)
    return (p - pose.rx_position) @ pose.rotation.T


def equirect_project(p, w, h):
    """Project a receiver-frame point to equirectangular pixel coordinates.

    p_x = (arctan2(x, z)/pi + 1) * w/2 in [0, w];
    p_y = 2*arcsin(y/r) * h/pi in [-h, h] (negative below the horizon).
    """
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = np.sqrt(x * x + y * y + z * z)
    if np.any(r == 0.0):
        raise ValueError("cannot project the origin")
    px = (np.arctan2(x, z) / np.pi + 1.0) * (w / 2.0)
    py = 2.0 * np.arcsin(np.clip(y / r, -1.0, 1.0)) * (h / np.pi)
    return np.stack([px, py], axis=-1)


def pixel_to_direction(u, v, w, h):
    """Unit direction whose projection lands on the center of pixel (u, v).

    Accepts scalars or arrays. Row v covers elevation [v, v+1) * (pi/2)/h.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(u >= w) or np.any(v < 0) or np.any(v >= h):
        raise ValueError("pixel index out of range")
    az = ((u + 0.5) * 2.0 / w - 1.0) * np.pi
    el = (v + 0.5) * (np.pi / 2.0) / h
    ce = np.cos(el)
    return np.stack([ce * np.sin(az), np.sin(el), ce * np.cos(az)], axis=-1)


def _clamp_pole(p):
    """Pull points above the pole-clamp elevation down to it (same azimuth)."""
    p = np.asarray(p, dtype=np.float64).copy()
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = np.sqrt(x * x + y * y + z * z)
    lim = np.deg2rad(POLE_CLAMP_DEG)
    el = np.arcsin(np.clip(y / r, -1.0, 1.0))
    bad = el > lim
    if np.any(bad):
        # keep azimuth and radius, set elevation to the clamp
        az = np.arctan2(x, z)
        tgt_rho = r * np.cos(lim)
        p[..., 0] = np.where(bad, tgt_rho * np.sin(az), x)
        p[..., 1] = np.where(bad, r * np.sin(lim), y)
        p[..., 2] = np.where(bad, tgt_rho * np.cos(az), z)
    return p


def equirect_jacobian(p, w, h, clamp_pole=False):
    """2x3 derivative of equirect_project at receiver-frame point(s) p.

    With clamp_pole=True, points above the clamp elevation are evaluated at
    the clamped elevation instead of raising.
    """
    p = np.asarray(p, dtype=np.float64)
    scalar = p.ndim == 1
    p = np.atleast_2d(p)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    r2 = x * x + y * y + z * z
    if np.any(r2 == 0.0):
        raise ValueError("Jacobian undefined at the origin")
    rho2 = x * x + z * z
    lim = np.deg2rad(POLE_CLAMP_DEG)
    at_pole = rho2 <= r2 * np.cos(lim) ** 2
    if np.any(at_pole & (y > 0)):
        if not clamp_pole:
            raise ValueError("Jacobian degenerate near the zenith; cull or clamp")
        p = _clamp_pole(p)
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        r2 = x * x + y * y + z * z
        rho2 = x * x + z * z
    rho = np.sqrt(rho2)
    ca = w / (2.0 * np.pi)
    ce = 2.0 * h / np.pi
    J = np.empty(p.shape[:1] + (2, 3))
    J[:, 0, 0] = ca * z / rho2
    J[:, 0, 1] = 0.0
    J[:, 0, 2] = -ca * x / rho2
    J[:, 1, 0] = -ce * x * y / (r2 * rho)
    J[:, 1, 1] = ce * rho / r2
    J[:, 1, 2] = -ce * y * z / (r2 * rho)
    return J[0] if scalar else J


def equirect_jacobian_deriv(p, w, h):
    """Second derivatives d(J)/d(p): shape (..., 2, 3, 3).

    out[k, i, j] = d^2 P_k / (d p_i d p_j). Used by the covariance backward.
    """
    p = np.asarray(p, dtype=np.float64)
    scalar = p.ndim == 1
    p = np.atleast_2d(_clamp_pole(p))
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    rho2 = x * x + z * z
    rho = np.sqrt(rho2)
    r2 = rho2 + y * y
    r4 = r2 * r2
    ca = w / (2.0 * np.pi)
    ce = 2.0 * h / np.pi
    H = np.zeros(p.shape[:1] + (2, 3, 3))
    # azimuth: Hessian of arctan2(x, z), no y dependence
    H[:, 0, 0, 0] = ca * (-2.0 * x * z / rho2**2)
    H[:, 0, 0, 2] = H[:, 0, 2, 0] = ca * (x * x - z * z) / rho2**2
    H[:, 0, 2, 2] = ca * (2.0 * x * z / rho2**2)
    # elevation: Hessian of arcsin(y/r) = atan2(y, rho)
    A = 2.0 / (r4 * rho) + 1.0 / (r2 * rho**3)
    H[:, 1, 0, 0] = ce * (-y / (r2 * rho) + x * x * y * A)
    H[:, 1, 0, 1] = H[:, 1, 1, 0] = ce * (-x * (r2 - 2.0 * y * y) / (r4 * rho))
    H[:, 1, 0, 2] = H[:, 1, 2, 0] = ce * (x * y * z * A)
    H[:, 1, 1, 1] = ce * (-2.0 * rho * y / r4)
    H[:, 1, 1, 2] = H[:, 1, 2, 1] = ce * (z * (y * y - rho2) / (rho * r4))
    H[:, 1, 2, 2] = ce * (-y / (r2 * rho) + z * z * y * A)
    return H[0] if scalar else H


def project_covariance(cov3d, pose: ViewPose, jac, reg=COV2D_REG):
    """J W Sigma W^T J^T plus the regularization floor; 2x2 SPD."""
    cov3d = np.asarray(cov3d, dtype=np.float64)
    J = np.asarray(jac, dtype=np.float64)
    W = pose.rotation
    m = J @ W @ cov3d @ W.T @ J.T
    m = 0.5 * (m + m.T) + reg * np.eye(2)
    return m


def _footprint_radii(cov2d, sigma_factor=FOOTPRINT_SIGMA):
    """Conservative half-widths of the truncated footprint along x and y."""
    return sigma_factor * np.sqrt(np.maximum(np.diagonal(cov2d, axis1=-2, axis2=-1), 0.0))


def cull(cloud, pose: ViewPose, w, h, near=NEAR_PLANE, far=FAR_PLANE,
         elev_floor_deg=90.0):
    """Indices of Gaussians whose truncated footprint can touch the image.

    Keeps index i when the view-frame elevation is >= -elev_floor_deg, the
    radial depth lies in [near, far], and the footprint bbox intersects the
    image after azimuth wrapping (azimuth always wraps, so the binding test
    is the elevation extent). Ascending source order.
    """
    mu_v = view_transform(cloud.positions, pose)
    depth = np.linalg.norm(mu_v, axis=1)
    ok = (depth >= near) & (depth <= far)
    with np.errstate(invalid="ignore", divide="ignore"):
        el = np.degrees(np.arcsin(np.clip(mu_v[:, 1] / np.maximum(depth, 1e-30), -1, 1)))
    ok &= el >= -elev_floor_deg
    idx = np.nonzero(ok)[0]
    if idx.size == 0:
        return idx
    proj = equirect_project(mu_v[idx], w, h)
    cov3d = cloud.covariances()[idx]
    J = equirect_jacobian(mu_v[idx], w, h, clamp_pole=True)
    covs = np.einsum("nij,jk,nkl,ml,nom->nio", J, pose.rotation, cov3d,
                     pose.rotation, J)
    covs = covs + COV2D_REG * np.eye(2)
    ry = _footprint_radii(covs)[:, 1]
    keep = (proj[:, 1] + ry >= 0.0) & (proj[:, 1] - ry <= float(h))
    return idx[keep]
