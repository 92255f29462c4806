"""Tile-binned, depth-sorted, alpha-composited rendering of the directional
signal field, its analytic backward pass, and a brute-force reference
renderer used as the correctness oracle.

Compositing model, per pixel and in ascending radial-depth order:

    S = sum_i T_i * alpha_i * s_i / d_i,   T_i = prod_{j<i} (1 - alpha_j)

with alpha_i = sigma_i * exp(-0.5 * Delta^T conic Delta) clamped to <= 0.99,
Delta the (azimuth-wrapped) offset from the pixel center to the projected
mean, s_i the per-Gaussian complex coefficient and d_i the transmitter
distance (clamped at the near plane). Contributions with alpha < 1/255 are
skipped outright in both the fast and the reference path; the fast path
additionally stops a pixel once T < 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import geometry
from .geometry import (FOOTPRINT_SIGMA, NEAR_PLANE, ViewPose, cull,
                       equirect_jacobian, equirect_jacobian_deriv,
                       equirect_project, view_transform)
from .image import SpectrumImage
from .mlp import (batch_mlp_backward, batch_mlp_forward, direction_angles,
                  direction_angles_backward)
from .scene import GaussianCloud, quaternions_to_matrices, rotation_backward

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_EPS = 1e-4
TILE = 16


@dataclass
class ParamGradients:
    """Gradients matching the learnable arrays of a GaussianCloud."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    raw_opacities: np.ndarray
    mlp_weights: np.ndarray

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud):
        return cls(**{k: np.zeros_like(v, dtype=np.float64)
                      for k, v in cloud.param_arrays().items()})

    def arrays(self):
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "raw_opacities": self.raw_opacities,
            "mlp_weights": self.mlp_weights,
        }

    def check_finite(self):
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite gradient in {name}")


class _Prepared:
    """Per-render intermediates for the culled, depth-sorted Gaussians."""

    __slots__ = ("idx", "mu_v", "depth", "mean2d", "cov2d", "conic", "opac",
                 "s", "d_tx", "d_clamped", "inputs", "radii", "w", "h", "J")

    def __init__(self, cloud: GaussianCloud, pose: ViewPose, tx, w, h):
        tx = np.asarray(tx, dtype=np.float64).reshape(3)
        idx = cull(cloud, pose, w, h)
        self.w, self.h = int(w), int(h)
        if idx.size == 0:
            self.idx = idx
            return
        mu_v = view_transform(cloud.positions[idx], pose)
        depth = np.linalg.norm(mu_v, axis=1)
        order = np.lexsort((idx, depth))
        self.idx = idx[order]
        self.mu_v = mu_v[order]
        self.depth = depth[order]
        self.mean2d = equirect_project(self.mu_v, w, h)
        J = equirect_jacobian(self.mu_v, w, h, clamp_pole=True)
        W = pose.rotation
        cov3d = cloud.covariances()[self.idx]
        cov2d = np.einsum("nij,jk,nkl,ml,nom->nio", J, W, cov3d, W, J)
        cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
        cov2d[:, 0, 0] += geometry.COV2D_REG
        cov2d[:, 1, 1] += geometry.COV2D_REG
        self.cov2d = cov2d
        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        det = a * c - b * b
        self.conic = np.stack([c / det, -b / det, a / det], axis=1)
        self.radii = FOOTPRINT_SIGMA * np.sqrt(
            np.stack([a, c], axis=1))
        self.opac = cloud.opacities()[self.idx]
        d_raw = np.linalg.norm(cloud.positions[self.idx] - tx, axis=1)
        self.d_clamped = d_raw < NEAR_PLANE
        self.d_tx = np.maximum(d_raw, NEAR_PLANE)
        theta, phi = direction_angles(self.mu_v)
        self.inputs = np.concatenate(
            [np.broadcast_to(tx, (self.idx.size, 3)),
             theta[:, None], phi[:, None]], axis=1)
        self.s = batch_mlp_forward(cloud.mlp_weights[self.idx], self.inputs,
                                   cloud.mlp_dims)
        self.J = J  # reused by the backward pass


def _tile_lists(prep: _Prepared):
    """Map tile (ty, tx) -> array of contributor rows (depth order kept)."""
    w, h = prep.w, prep.h
    ntx = (w + TILE - 1) // TILE
    nty = (h + TILE - 1) // TILE
    tiles = {}
    mx, my = prep.mean2d[:, 0], prep.mean2d[:, 1]
    rx, ry = prep.radii[:, 0], prep.radii[:, 1]
    y0 = np.clip(np.floor((my - ry - 0.5) / TILE).astype(int), 0, nty - 1)
    y1 = np.clip(np.floor((my + ry + 0.5) / TILE).astype(int), 0, nty - 1)
    visible = (my + ry >= 0.0) & (my - ry <= h)
    # Azimuth wraps with period w (not ntx*TILE), so bin the wrapped pixel
    # interval [lo, lo+span] and map its (at most two) segments to tiles.
    lo = np.mod(mx - rx - 0.5, w)
    span = 2.0 * rx + 1.0
    for m in range(prep.idx.size):
        if not visible[m]:
            continue
        if span[m] >= w:
            cols = range(ntx)
        else:
            hi = lo[m] + span[m]
            if hi < w:
                cols = range(int(lo[m] // TILE), int(hi // TILE) + 1)
            else:
                cols = list(range(int(lo[m] // TILE), ntx)) + \
                    list(range(0, int((hi - w) // TILE) + 1))
        for ty in range(y0[m], y1[m] + 1):
            for tx_ in cols:
                tiles.setdefault((ty, tx_), []).append(m)
    return {k: np.asarray(v, dtype=np.intp) for k, v in tiles.items()}


@dataclass
class RenderAux:
    """State saved by the forward pass for the backward pass."""

    prep: _Prepared
    tiles: dict
    transmittance: np.ndarray   # (h, w)
    contrib_count: np.ndarray   # (h, w) int32
    pose: ViewPose
    tx: np.ndarray
    cloud_n: int
    dtype: type
    t_eps: float


def _tile_pixels(ty, tx_, w, h):
    ys = np.arange(ty * TILE, min((ty + 1) * TILE, h))
    xs = np.arange(tx_ * TILE, min((tx_ + 1) * TILE, w))
    return ys, xs


def _tile_alphas(prep, rows, pcx, pcy, dtype):
    """alpha (K, P) for the given contributors over flat pixel centers."""
    w = prep.w
    mx = prep.mean2d[rows, 0].astype(dtype)
    my = prep.mean2d[rows, 1].astype(dtype)
    ca = prep.conic[rows, 0].astype(dtype)
    cb = prep.conic[rows, 1].astype(dtype)
    cc = prep.conic[rows, 2].astype(dtype)
    dx = (pcx[None, :] - mx[:, None] + w / 2.0) % w - w / 2.0
    dy = pcy[None, :] - my[:, None]
    q = ca[:, None] * dx * dx + 2.0 * cb[:, None] * dx * dy + cc[:, None] * dy * dy
    g = np.exp(-0.5 * q)
    alpha_raw = prep.opac[rows].astype(dtype)[:, None] * g
    alpha = np.minimum(alpha_raw, dtype(ALPHA_MAX))
    alpha[alpha < ALPHA_MIN] = 0.0
    return alpha, alpha_raw, g, dx, dy


def rasterize_forward(cloud: GaussianCloud, pose: ViewPose, tx, w, h,
                      dtype=np.float32, t_eps=T_EPS, threads=1):
    """Render the 2-channel (re, im) spectrum; returns (image, aux)."""
    tx = np.asarray(tx, dtype=np.float64).reshape(3)
    prep = _Prepared(cloud, pose, tx, w, h)
    img = np.zeros((h, w, 2), dtype=dtype)
    transmittance = np.ones((h, w), dtype=dtype)
    counts = np.zeros((h, w), dtype=np.int32)
    if prep.idx.size == 0:
        aux = RenderAux(prep, {}, transmittance, counts, pose, tx,
                        cloud.n, dtype, t_eps)
        return SpectrumImage(img), aux
    tiles = _tile_lists(prep)
    coef = (prep.s / prep.d_tx[:, None]).astype(dtype)

    def do_tile(key):
        ty, tx_ = key
        rows = tiles[key]
        ys, xs = _tile_pixels(ty, tx_, w, h)
        pcx = (xs + 0.5).astype(dtype)
        pcy = (ys + 0.5).astype(dtype)
        gx, gy = np.meshgrid(pcx, pcy)
        alpha, _, _, _, _ = _tile_alphas(prep, rows, gx.ravel(), gy.ravel(), dtype)
        one_m = 1.0 - alpha
        t_before = np.ones_like(alpha)
        if alpha.shape[0] > 1:
            t_before[1:] = np.cumprod(one_m[:-1], axis=0)
        active = (t_before >= t_eps) & (alpha > 0.0)
        wgt = np.where(active, t_before * alpha, dtype(0.0))
        tile_img = (wgt.T @ coef[rows]).reshape(len(ys), len(xs), 2)
        t_final = np.prod(np.where(t_before >= t_eps, one_m, dtype(1.0)),
                          axis=0).reshape(len(ys), len(xs))
        cnt = active.sum(axis=0, dtype=np.int32).reshape(len(ys), len(xs))
        return ys, xs, tile_img, t_final, cnt

    keys = sorted(tiles.keys())
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(do_tile, keys))
    else:
        results = [do_tile(k) for k in keys]
    for ys, xs, tile_img, t_final, cnt in results:
        img[np.ix_(ys, xs)] += tile_img
        transmittance[np.ix_(ys, xs)] = t_final
        counts[np.ix_(ys, xs)] = cnt
    aux = RenderAux(prep, tiles, transmittance, counts, pose, tx,
                    cloud.n, dtype, t_eps)
    return SpectrumImage(img), aux


def rasterize_reference(cloud: GaussianCloud, pose: ViewPose, tx, w, h,
                        row_chunk=8):
    """Brute-force oracle: per-pixel loop over every surviving Gaussian,
    globally depth-sorted, no tiling, no early exit, f64 accumulation."""
    tx = np.asarray(tx, dtype=np.float64).reshape(3)
    prep = _Prepared(cloud, pose, tx, w, h)
    img = np.zeros((h, w, 2), dtype=np.float64)
    if prep.idx.size == 0:
        return SpectrumImage(img)
    coef = prep.s / prep.d_tx[:, None]
    rows = np.arange(prep.idx.size)
    for y0 in range(0, h, row_chunk):
        ys = np.arange(y0, min(y0 + row_chunk, h))
        gx, gy = np.meshgrid(np.arange(w) + 0.5, ys + 0.5)
        alpha, _, _, _, _ = _tile_alphas(prep, rows, gx.ravel(), gy.ravel(),
                                         np.float64)
        one_m = 1.0 - alpha
        t_before = np.ones_like(alpha)
        if alpha.shape[0] > 1:
            t_before[1:] = np.cumprod(one_m[:-1], axis=0)
        wgt = t_before * alpha
        img[ys] = (wgt.T @ coef).reshape(len(ys), w, 2)
    return SpectrumImage(img)


def rasterize_backward(dL_dimage, cloud: GaussianCloud, pose: ViewPose, tx,
                       aux: RenderAux) -> ParamGradients:
    """Analytic gradients of the rendered image w.r.t. every parameter group.

    Per-contributor transmittances are re-derived per tile with the same
    ordering and skip rules as the forward pass.
    """
    tx = np.asarray(tx, dtype=np.float64).reshape(3)
    if aux.cloud_n != cloud.n or not np.array_equal(aux.tx, tx):
        raise ValueError("aux does not match this cloud/transmitter")
    grads = ParamGradients.zeros_like(cloud)
    prep = aux.prep
    m_count = prep.idx.size
    if m_count == 0:
        return grads
    dL = np.asarray(dL_dimage, dtype=np.float64).reshape(prep.h, prep.w, 2)
    coef = prep.s / prep.d_tx[:, None]

    g_s = np.zeros((m_count, 2))
    g_sigma = np.zeros(m_count)
    g_conic = np.zeros((m_count, 3))   # matrix entries (aa, ab, bb)
    g_mean2d = np.zeros((m_count, 2))
    g_dtx = np.zeros(m_count)

    for (ty, tx_), rows in sorted(aux.tiles.items()):
        ys, xs = _tile_pixels(ty, tx_, prep.w, prep.h)
        gx, gy = np.meshgrid(xs + 0.5, ys + 0.5)
        alpha, alpha_raw, g, dx, dy = _tile_alphas(
            prep, rows, gx.ravel().astype(np.float64),
            gy.ravel().astype(np.float64), np.float64)
        one_m = 1.0 - alpha
        t_before = np.ones_like(alpha)
        if alpha.shape[0] > 1:
            t_before[1:] = np.cumprod(one_m[:-1], axis=0)
        active = (t_before >= aux.t_eps) & (alpha > 0.0)
        wgt = np.where(active, t_before * alpha, 0.0)

        u = dL[np.ix_(ys, xs)].reshape(-1, 2)          # (P, 2)
        uc = coef[rows] @ u.T                          # (K, P): u . c_k
        # ds_k and dd_k
        gw_u = wgt @ u                                 # (K, 2): sum_p wgt * u
        g_s[rows] += gw_u / prep.d_tx[rows, None]
        us = prep.s[rows] @ u.T                        # (K, P): u . s_k
        g_dtx[rows] += -(wgt * us).sum(axis=1) / prep.d_tx[rows] ** 2
        # d alpha: direct term minus suffix correction
        t_k = wgt * uc
        suffix = np.flip(np.cumsum(np.flip(t_k, 0), axis=0), 0) - t_k
        d_alpha = np.where(active,
                           t_before * uc - suffix / np.maximum(one_m, 1e-12),
                           0.0)
        unclamped = alpha_raw < ALPHA_MAX
        d_sg = np.where(unclamped, d_alpha, 0.0)       # d(sigma*g)
        g_sigma[rows] += (d_sg * g).sum(axis=1)
        d_g = d_sg * prep.opac[rows][:, None]
        d_q = -0.5 * d_g * g
        g_conic[rows, 0] += (d_q * dx * dx).sum(axis=1)
        g_conic[rows, 1] += (d_q * dx * dy).sum(axis=1)
        g_conic[rows, 2] += (d_q * dy * dy).sum(axis=1)
        ca = prep.conic[rows, 0][:, None]
        cb = prep.conic[rows, 1][:, None]
        cc = prep.conic[rows, 2][:, None]
        d_dx = d_q * 2.0 * (ca * dx + cb * dy)
        d_dy = d_q * 2.0 * (cb * dx + cc * dy)
        g_mean2d[rows, 0] += -d_dx.sum(axis=1)
        g_mean2d[rows, 1] += -d_dy.sum(axis=1)

    # conic -> 2D covariance: d(inv) = -A dSigma A
    A = np.empty((m_count, 2, 2))
    A[:, 0, 0] = prep.conic[:, 0]
    A[:, 0, 1] = A[:, 1, 0] = prep.conic[:, 1]
    A[:, 1, 1] = prep.conic[:, 2]
    G_A = np.empty_like(A)
    G_A[:, 0, 0] = g_conic[:, 0]
    G_A[:, 0, 1] = G_A[:, 1, 0] = g_conic[:, 1]
    G_A[:, 1, 1] = g_conic[:, 2]
    G_cov2d = -np.einsum("mij,mjk,mkl->mil", A, G_A, A)

    W = pose.rotation
    J = prep.J
    cov3d = cloud.covariances()[prep.idx]
    M3 = np.einsum("ij,mjk,lk->mil", W, cov3d, W)
    G_M3 = np.einsum("mai,mab,mbl->mil", J, G_cov2d, J)
    G_J = 2.0 * np.einsum("mab,mbj,mjk->mak", G_cov2d, J, M3)
    H = equirect_jacobian_deriv(prep.mu_v, prep.w, prep.h)
    g_mu_v = np.einsum("mkj,mkji->mi", G_J, H)

    G_Sigma3 = np.einsum("ji,mjk,kl->mil", W, G_M3, W)
    quats = cloud.rotations[prep.idx]
    R = quaternions_to_matrices(cloud.unit_quaternions()[prep.idx])
    scales = cloud.scales()[prep.idx]
    Mmat = R * scales[:, None, :]
    G_Mmat = 2.0 * np.einsum("mij,mjk->mik", G_Sigma3, Mmat)
    g_ls = np.einsum("mik,mik->mk", R, G_Mmat) * scales
    G_R = G_Mmat * scales[:, None, :]
    g_quat = rotation_backward(quats, G_R)

    # MLP backward (weights + angle inputs)
    g_w, g_in = batch_mlp_backward(cloud.mlp_weights[prep.idx], prep.inputs,
                                   g_s, cloud.mlp_dims)
    g_mu_v += direction_angles_backward(prep.mu_v, g_in[:, 3], g_in[:, 4])
    # projected-mean path
    g_mu_v += np.einsum("mki,mk->mi", J, g_mean2d)

    g_pos = g_mu_v @ W
    live = ~prep.d_clamped
    diff = cloud.positions[prep.idx] - tx
    g_pos += np.where(live, g_dtx, 0.0)[:, None] * diff / prep.d_tx[:, None]

    sig = prep.opac
    g_raw_op = g_sigma * sig * (1.0 - sig)

    np.add.at(grads.positions, prep.idx, g_pos)
    np.add.at(grads.log_scales, prep.idx, g_ls)
    np.add.at(grads.rotations, prep.idx, g_quat)
    np.add.at(grads.raw_opacities, (prep.idx, 0), g_raw_op)
    np.add.at(grads.mlp_weights, prep.idx, g_w)
    return grads
