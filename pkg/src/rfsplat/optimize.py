"""Loss functions (L1 + SSIM with analytic gradients), image metrics, Adam
with per-group learning rates and the annealed position schedule, and the
training loop.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .image import SpectrumImage, magnitude, magnitude_backward
from .rasterizer import ParamGradients, rasterize_backward, rasterize_forward
from .scene import GaussianCloud, normalize_quaternions, save_checkpoint

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 1.0


@dataclass
class TrainConfig:
    lambda_dssim: float = 0.2
    position_lr_init: float = 0.0016
    position_lr_final: float = 1.6e-6
    position_lr_delay_mult: float = 0.01
    position_lr_max_steps: int = 30000
    opacity_lr: float = 0.0055
    scaling_lr: float = 0.005
    rotation_lr: float = 0.001
    mlp_lr: float = 0.002
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    iterations: int = 5000
    seed: int = 0
    width: int = 180
    height: int = 45
    supervision: str = "magnitude"  # or "complex"
    deterministic: bool = False     # epoch-shuffle sampling instead of iid draws
    log_every: int = 50
    checkpoint_every: int = 0       # 0 = only at the end
    threads: int = 1
    dtype: str = "float32"

    def render_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def _as_array(img):
    if isinstance(img, SpectrumImage):
        return np.asarray(img.data, dtype=np.float64)
    return np.asarray(img, dtype=np.float64)


def _check_dims(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"image shape mismatch: {pred.shape} vs {gt.shape}")


def l1_loss(pred, gt):
    """Mean absolute difference over all pixels and channels."""
    p, g = _as_array(pred), _as_array(gt)
    _check_dims(p, g)
    return float(np.mean(np.abs(p - g)))


def l1_loss_grad(pred, gt):
    p, g = _as_array(pred), _as_array(gt)
    _check_dims(p, g)
    diff = p - g
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _gaussian_window(n=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(n) - (n - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


_W1D = _gaussian_window()
_K = (SSIM_WINDOW - 1) // 2


def _filt(x):
    """Separable Gaussian window with symmetric padding."""
    y = correlate1d(x, _W1D, axis=0, mode="reflect")
    return correlate1d(y, _W1D, axis=1, mode="reflect")


def _fold_axis(g, axis):
    """Adjoint of symmetric padding by _K along one axis."""
    n = g.shape[axis] - 2 * _K
    g = np.moveaxis(g, axis, 0)
    out = g[_K:_K + n].copy()
    out[:_K] += g[:_K][::-1]
    out[n - _K:] += g[_K + n:][::-1]
    return np.moveaxis(out, 0, axis)


def _filt_adjoint(g):
    """Adjoint of _filt (needed for the exact SSIM gradient)."""
    for axis in (0, 1):
        pad = [(0, 0)] * g.ndim
        pad[axis] = (_K, _K)
        gz = np.pad(g, pad, mode="constant")
        gz = correlate1d(gz, _W1D, axis=axis, mode="constant", cval=0.0)
        g = _fold_axis(gz, axis)
    return g


def _ssim_maps(x, y):
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mx, my = _filt(x), _filt(y)
    sxx, syy, sxy = _filt(x * x), _filt(y * y), _filt(x * y)
    vx = sxx - mx * mx
    vy = syy - my * my
    vxy = sxy - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * vxy + c2
    b1 = mx * mx + my * my + c1
    b2 = vx + vy + c2
    s = (a1 * a2) / (b1 * b2)
    return s, (mx, my, a1, a2, b1, b2)


def ssim(pred, gt):
    """Mean local SSIM, 11x11 Gaussian window, sigma 1.5, dynamic range 1."""
    p, g = _as_array(pred), _as_array(gt)
    _check_dims(p, g)
    if p.ndim == 3:
        return float(np.mean([ssim(p[:, :, c], g[:, :, c])
                              for c in range(p.shape[2])]))
    s, _ = _ssim_maps(p, g)
    return float(s.mean())


def ssim_grad(pred, gt):
    """(ssim value, d ssim / d pred) for a single-channel pair."""
    x, y = _as_array(pred), _as_array(gt)
    _check_dims(x, y)
    if x.ndim == 3 and x.shape[2] == 1:
        x, y = x[:, :, 0], y[:, :, 0]
    s, (mx, my, a1, a2, b1, b2) = _ssim_maps(x, y)
    n = s.size
    d_a1 = a2 / (b1 * b2)
    d_a2 = a1 / (b1 * b2)
    d_b1 = -s / b1
    d_b2 = -s / b2
    g_mx = 2 * my * d_a1 - 2 * my * d_a2 + 2 * mx * d_b1 - 2 * mx * d_b2
    g_sxx = d_b2
    g_sxy = 2 * d_a2
    grad = (_filt_adjoint(g_mx) + 2 * x * _filt_adjoint(g_sxx)
            + y * _filt_adjoint(g_sxy)) / n
    return float(s.mean()), grad


def combined_loss(pred, gt, lam):
    """(1-lam)*L1 + lam*(1 - SSIM), with the analytic gradient w.r.t. pred.

    Multichannel inputs use L1 over all channels and SSIM averaged per
    channel. Returns (loss, dL/dpred) with dL/dpred shaped like pred.
    """
    p, g = _as_array(pred), _as_array(gt)
    _check_dims(p, g)
    squeeze = p.ndim == 2
    if squeeze:
        p, g = p[:, :, None], g[:, :, None]
    l1, g_l1 = l1_loss_grad(p, g)
    c = p.shape[2]
    ssim_vals, g_ssim = [], np.zeros_like(p)
    for ch in range(c):
        v, gr = ssim_grad(p[:, :, ch], g[:, :, ch])
        ssim_vals.append(v)
        g_ssim[:, :, ch] = gr / c
    s = float(np.mean(ssim_vals))
    loss = (1.0 - lam) * l1 + lam * (1.0 - s)
    grad = (1.0 - lam) * g_l1 - lam * g_ssim
    if squeeze:
        grad = grad[:, :, 0]
    return loss, grad


def mse(pred, gt):
    p, g = _as_array(pred), _as_array(gt)
    _check_dims(p, g)
    return float(np.mean((p - g) ** 2))


def psnr(pred, gt):
    """10*log10(1/mse), peak 1.0; +inf for identical images."""
    m = mse(pred, gt)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / m)


def position_lr(step, cfg: TrainConfig):
    """Log-linear anneal from init to final with a sine delay ramp."""
    t = np.clip(step / cfg.position_lr_max_steps, 0.0, 1.0)
    lr = math.exp((1.0 - t) * math.log(cfg.position_lr_init)
                  + t * math.log(cfg.position_lr_final))
    ramp = np.clip(step / (0.01 * cfg.position_lr_max_steps), 0.0, 1.0)
    delay = cfg.position_lr_delay_mult + \
        (1.0 - cfg.position_lr_delay_mult) * math.sin(0.5 * math.pi * ramp)
    return delay * lr


GROUP_LR = {
    "positions": None,  # scheduled
    "log_scales": "scaling_lr",
    "rotations": "rotation_lr",
    "raw_opacities": "opacity_lr",
    "mlp_weights": "mlp_lr",
}


class AdamState:
    """First/second moment buffers per parameter group."""

    def __init__(self, cloud: GaussianCloud):
        self.m = {k: np.zeros_like(v) for k, v in cloud.param_arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in cloud.param_arrays().items()}
        self.step = 0


def adam_step(cloud: GaussianCloud, grads: ParamGradients, state: AdamState,
              step, cfg: TrainConfig):
    """In-place Adam update with per-group learning rates.

    `step` is the zero-based iteration index (bias correction uses step+1).
    Quaternions are re-normalized after the update.
    """
    grads.check_finite()
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    t = step + 1
    garrs = grads.arrays()
    for name, param in cloud.param_arrays().items():
        lr = position_lr(step, cfg) if name == "positions" \
            else getattr(cfg, GROUP_LR[name])
        g = garrs[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        param -= lr * mhat / (np.sqrt(vhat) + eps)
    cloud.rotations[:] = normalize_quaternions(cloud.rotations)
    state.step = t


def render_prediction(cloud, pose, tx, cfg: TrainConfig):
    """Forward render plus the supervised prediction image."""
    img, aux = rasterize_forward(cloud, pose, tx, cfg.width, cfg.height,
                                 dtype=cfg.render_dtype(), threads=cfg.threads)
    if cfg.supervision == "magnitude":
        pred = magnitude(img)
    else:
        pred = img
    return img, pred, aux


def train_step(cloud, pose, sample, state, step, cfg: TrainConfig):
    """One iteration of render / loss / backward / Adam. Returns metrics."""
    t0 = time.perf_counter()
    gt = sample.spectrum.data if cfg.supervision != "magnitude" \
        else sample.spectrum.data[:, :, :1]
    img, pred, aux = render_prediction(cloud, pose, sample.tx_position, cfg)
    loss, g_pred = combined_loss(pred.data, gt, cfg.lambda_dssim)
    l1 = l1_loss(pred.data, gt)
    s = ssim(pred.data[:, :, 0], gt[:, :, 0])
    if cfg.supervision == "magnitude":
        dimg = magnitude_backward(img, g_pred[:, :, 0])
    else:
        dimg = g_pred
    grads = rasterize_backward(dimg, cloud, pose, sample.tx_position, aux)
    adam_step(cloud, grads, state, step, cfg)
    wall_ms = (time.perf_counter() - t0) * 1e3
    return {
        "iteration": step,
        "loss": loss,
        "l1": l1,
        "ssim_term": 1.0 - s,
        "psnr": psnr(pred.data[:, :, 0], gt[:, :, 0]),
        "wall_ms": wall_ms,
    }


def train(dataset, cfg: TrainConfig, cloud: GaussianCloud, pose,
          metrics_path=None, checkpoint_path=None, start_step=0,
          progress=None):
    """Run the training loop; mutates `cloud` in place.

    Sampling is uniform per iteration from a seeded stream; deterministic
    mode shuffles epochs instead so every sample appears equally often.
    Returns the metrics log (list of dicts).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    dims = {(s.spectrum.height, s.spectrum.width) for s in dataset}
    if dims != {(cfg.height, cfg.width)}:
        raise ValueError(f"dataset image dims {dims} do not match config "
                         f"({cfg.height}, {cfg.width})")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    state = AdamState(cloud)
    log = []
    epoch_order = None
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(
            fh, fieldnames=["iteration", "loss", "l1", "ssim_term", "psnr",
                            "wall_ms"])
        writer.writeheader()
    try:
        for step in range(start_step, start_step + cfg.iterations):
            if cfg.deterministic:
                pos = step % len(dataset)
                if pos == 0 or epoch_order is None:
                    epoch_order = rng.permutation(len(dataset))
                sample = dataset[epoch_order[pos]]
            else:
                sample = dataset[rng.integers(len(dataset))]
            row = train_step(cloud, pose, sample, state, step, cfg)
            if step % cfg.log_every == 0 or step == start_step + cfg.iterations - 1:
                log.append(row)
                if writer:
                    writer.writerow({k: f"{v:.6g}" if isinstance(v, float)
                                     else v for k, v in row.items()})
                if progress:
                    progress(row)
            if checkpoint_path and cfg.checkpoint_every and \
                    (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, cloud)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, cloud)
    finally:
        if fh:
            fh.close()
    return log
