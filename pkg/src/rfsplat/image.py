"""Spectrum images and their binary formats.

RFSI: magic `RFSI`, u32 version=1, u32 width, u32 height, u32 channels,
then h*w*c little-endian f32, row-major (row 0 = horizon). PGM (P5, 8-bit)
export is provided for quick visual checks; rows are flipped there so the
zenith ends up at the top of the picture.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

RFSI_MAGIC = b"RFSI"
RFSI_VERSION = 1


@dataclass
class SpectrumImage:
    """Directional intensity grid over (azimuth, elevation)."""

    data: np.ndarray  # (h, w, c)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError("spectrum data must be (h, w, c) with all dims >= 1")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


def magnitude(image: SpectrumImage) -> SpectrumImage:
    """Per-pixel sqrt(re^2 + im^2) of a 2-channel image."""
    if image.channels != 2:
        raise ValueError(f"magnitude needs 2 channels, got {image.channels}")
    d = image.data.astype(np.float64)
    return SpectrumImage(np.hypot(d[:, :, 0], d[:, :, 1])[:, :, None])


def magnitude_backward(image: SpectrumImage, grad_mag):
    """Chain dL/d|z| back to the (re, im) channels; zero at |z| = 0."""
    d = image.data.astype(np.float64)
    m = np.hypot(d[:, :, 0], d[:, :, 1])
    safe = np.where(m > 0.0, m, 1.0)
    g = np.asarray(grad_mag, dtype=np.float64).reshape(m.shape)
    scale = np.where(m > 0.0, g / safe, 0.0)
    return np.stack([d[:, :, 0] * scale, d[:, :, 1] * scale], axis=-1)


def save_rfsi(path, image: SpectrumImage):
    with open(path, "wb") as f:
        f.write(RFSI_MAGIC)
        f.write(struct.pack("<4I", RFSI_VERSION, image.width, image.height,
                            image.channels))
        f.write(np.ascontiguousarray(image.data, dtype="<f4").tobytes())


def load_rfsi(path) -> SpectrumImage:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != RFSI_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected RFSI")
        version, w, h, c = struct.unpack("<4I", f.read(16))
        if version != RFSI_VERSION:
            raise ValueError(f"{path}: unsupported RFSI version {version}")
        count = w * h * c
        buf = f.read(4 * count)
        if len(buf) != 4 * count:
            raise ValueError(f"{path}: truncated RFSI payload "
                             f"({len(buf)} of {4 * count} bytes)")
    data = np.frombuffer(buf, dtype="<f4").reshape(h, w, c)
    return SpectrumImage(data.copy())


def save_pgm(path, image: SpectrumImage):
    """8-bit P5 export of the first channel, values clipped from [0, 1]."""
    d = image.data[:, :, 0]
    pix = np.clip(d, 0.0, 1.0)
    pix = (pix * 255.0 + 0.5).astype(np.uint8)[::-1]  # zenith at top
    with open(path, "wb") as f:
        f.write(f"P5\n{image.width} {image.height}\n255\n".encode())
        f.write(pix.tobytes())
