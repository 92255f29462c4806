"""Figure rendering for the CLI report paths. Every plot lands next to the
CSV it illustrates; the CSV stays the machine-readable contract."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def loss_curve(log_rows, path):
    it = [r["iteration"] for r in log_rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(it, [r["loss"] for r in log_rows], label="loss")
    ax.plot(it, [r["l1"] for r in log_rows], label="L1", alpha=0.7)
    ax.plot(it, [r["ssim_term"] for r in log_rows], label="1 - SSIM", alpha=0.7)
    ax.set_xlabel("iteration")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def metric_cdfs(per_sample, path):
    """per_sample: list of dicts with ssim / psnr / mse keys."""
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, key in zip(axes, ("ssim", "psnr", "mse")):
        vals = np.sort([r[key] for r in per_sample])
        cdf = np.arange(1, len(vals) + 1) / len(vals)
        ax.plot(vals, cdf)
        ax.set_xlabel(key.upper())
        ax.set_ylabel("CDF")
        ax.grid(alpha=0.3)
    _save(fig, path)


def latency_cdf(latencies_ms, path):
    vals = np.sort(np.asarray(latencies_ms))
    cdf = np.arange(1, len(vals) + 1) / len(vals)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(vals, cdf)
    ax.set_xlabel("render time (ms)")
    ax.set_ylabel("CDF")
    ax.grid(alpha=0.3)
    _save(fig, path)


def latency_sweep(rows, path):
    """rows: list of dicts with n_gaussians / p50_ms / p95_ms / p99_ms."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    n = [r["n_gaussians"] for r in rows]
    for key in ("p50_ms", "p95_ms", "p99_ms"):
        ax.plot(n, [r[key] for r in rows], marker="o", label=key)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("number of Gaussians")
    ax.set_ylabel("render time (ms)")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def rssi_errors(abs_errors_db, path):
    vals = np.sort(np.asarray(abs_errors_db))
    cdf = np.arange(1, len(vals) + 1) / len(vals)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(vals, cdf)
    ax.set_xlabel("|RSSI error| (dB)")
    ax.set_ylabel("CDF")
    ax.grid(alpha=0.3)
    _save(fig, path)
