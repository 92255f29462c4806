"""Synthetic multipath ground truth, dataset I/O, and RSSI estimation.

The oracle models each virtual emitter as a point source: a transmitter
signal reaches the receiver along tx -> emitter -> rx with free-space
attenuation and phase over the total path length, weighted by a Gaussian
kernel in the great-circle angle between the pixel direction and the
emitter direction (a stand-in for the antenna-array beam response). It is
closed form and shares no code with the splatting renderer.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import pixel_to_direction
from .image import SpectrumImage, load_rfsi, save_rfsi

# 915 MHz carrier
DEFAULT_WAVELENGTH = 0.3275

RSSI_FLOOR_DB = -100.0


@dataclass
class Emitter:
    position: np.ndarray
    gain: complex
    angular_spread: float  # radians

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.angular_spread <= 0:
            raise ValueError("angular_spread must be > 0")


@dataclass
class MultipathScene:
    emitters: list
    rx_position: np.ndarray
    wavelength: float = DEFAULT_WAVELENGTH

    def __post_init__(self):
        self.rx_position = np.asarray(self.rx_position, dtype=np.float64).reshape(3)
        if self.wavelength <= 0:
            raise ValueError("wavelength must be > 0")
        if not self.emitters:
            raise ValueError("scene needs at least one emitter")


@dataclass
class TxSample:
    id: str
    tx_position: np.ndarray
    spectrum_path: str
    spectrum: SpectrumImage

    def __post_init__(self):
        self.tx_position = np.asarray(self.tx_position, dtype=np.float64).reshape(3)


def free_space_amplitude(d, wavelength):
    """(lambda / 4 pi d) * exp(-j 2 pi d / lambda)."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("distance must be > 0")
    out = (wavelength / (4.0 * np.pi * d)) * np.exp(-2j * np.pi * d / wavelength)
    return complex(out) if out.ndim == 0 else out


def ground_truth_spectrum(scene: MultipathScene, tx, w, h, scale=None):
    """Magnitude spectrum image at the receiver for transmitter position tx.

    scale, when given, divides the raw magnitudes (the dataset-level
    normalization constant).
    """
    tx = np.asarray(tx, dtype=np.float64).reshape(3)
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    dirs = pixel_to_direction(uu.ravel(), vv.ravel(), w, h)  # (w*h, 3)
    field = np.zeros(w * h, dtype=np.complex128)
    for em in scene.emitters:
        to_em = em.position - scene.rx_position
        r_em = np.linalg.norm(to_em)
        if r_em < 1e-9:
            warnings.warn("emitter coincides with the receiver; skipped")
            continue
        path = np.linalg.norm(em.position - tx) + r_em
        amp = em.gain * free_space_amplitude(path, scene.wavelength)
        cosang = np.clip(dirs @ (to_em / r_em), -1.0, 1.0)
        ang = np.arccos(cosang)
        field += amp * np.exp(-ang * ang / (2.0 * em.angular_spread ** 2))
    mag = np.abs(field).reshape(h, w)
    if scale is not None:
        mag = mag / scale
    return SpectrumImage(mag[:, :, None])


def random_scene(seed, n_emitters, rx_position=(0.0, 0.0, 0.0),
                 box_min=(-5.0, 0.0, -5.0), box_max=(5.0, 3.0, 5.0),
                 spread_range=(0.08, 0.25), wavelength=DEFAULT_WAVELENGTH):
    """Seeded random emitter layout above the horizon around the receiver."""
    rng = np.random.Generator(np.random.PCG64(seed))
    rx = np.asarray(rx_position, dtype=np.float64)
    emitters = []
    for _ in range(n_emitters):
        while True:
            p = rng.uniform(box_min, box_max)
            if np.linalg.norm(p - rx) > 0.5 and p[1] >= rx[1]:
                break
        gain = rng.normal(scale=1.0) + 1j * rng.normal(scale=1.0)
        spread = rng.uniform(*spread_range)
        emitters.append(Emitter(p, complex(gain), float(spread)))
    return MultipathScene(emitters, rx, wavelength)


def _sample_tx_positions(rng, n, box_min, box_max, rx, keepout):
    out = np.empty((n, 3))
    i = 0
    while i < n:
        p = rng.uniform(box_min, box_max)
        if np.linalg.norm(p - rx) >= keepout:
            out[i] = p
            i += 1
    return out


def gen_dataset(seed, n_samples, scene: MultipathScene, w, h, out_dir,
                tx_box_min=(-4.0, 0.0, -4.0), tx_box_max=(4.0, 2.0, 4.0),
                keepout=1.0):
    """Write n_samples RFSI spectra, index.csv, and manifest.txt.

    Spectra are normalized by the global pre-normalization maximum; the
    constant is recorded in the manifest. Bit-reproducible per seed.
    Returns the index path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    tx_positions = _sample_tx_positions(rng, n_samples, tx_box_min, tx_box_max,
                                        scene.rx_position, keepout)
    raw = [ground_truth_spectrum(scene, tx, w, h) for tx in tx_positions]
    norm = max(float(im.data.max()) for im in raw)
    if norm <= 0:
        raise ValueError("all-zero dataset; check the scene")
    index_path = out_dir / "index.csv"
    with open(index_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "tx_x", "tx_y", "tx_z", "spectrum_path"])
        for i, (tx, im) in enumerate(zip(tx_positions, raw)):
            name = f"sample_{i:05d}.rfsi"
            save_rfsi(out_dir / name, SpectrumImage(
                (im.data / norm).astype(np.float32)))
            writer.writerow([f"{i:05d}", f"{tx[0]:.9g}", f"{tx[1]:.9g}",
                             f"{tx[2]:.9g}", name])
    with open(out_dir / "manifest.txt", "w") as f:
        f.write(f"seed={seed}\n")
        f.write(f"n_samples={n_samples}\n")
        f.write(f"wavelength={scene.wavelength:.9g}\n")
        f.write(f"width={w}\nheight={h}\n")
        f.write(f"normalization={norm:.17g}\n")
        f.write(f"rx_position={scene.rx_position[0]:.9g},"
                f"{scene.rx_position[1]:.9g},{scene.rx_position[2]:.9g}\n")
        f.write(f"n_emitters={len(scene.emitters)}\n")
        for i, em in enumerate(scene.emitters):
            f.write(f"emitter_{i}={em.position[0]:.9g},{em.position[1]:.9g},"
                    f"{em.position[2]:.9g},{em.gain.real:.9g},"
                    f"{em.gain.imag:.9g},{em.angular_spread:.9g}\n")
    return index_path


def read_manifest(path):
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                out[k] = v
    return out


def scene_from_manifest(manifest):
    """Rebuild the oracle scene recorded by gen_dataset."""
    rx = np.array([float(x) for x in manifest["rx_position"].split(",")])
    emitters = []
    for i in range(int(manifest["n_emitters"])):
        vals = [float(x) for x in manifest[f"emitter_{i}"].split(",")]
        emitters.append(Emitter(vals[:3], complex(vals[3], vals[4]), vals[5]))
    return MultipathScene(emitters, rx, float(manifest["wavelength"]))


def load_dataset(index_path):
    """Eagerly load and validate every sample named by the index CSV."""
    index_path = Path(index_path)
    if not index_path.exists():
        raise FileNotFoundError(f"dataset index not found: {index_path}")
    samples = []
    with open(index_path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            spath = index_path.parent / row["spectrum_path"]
            if not spath.exists():
                raise FileNotFoundError(f"spectrum file missing: {spath}")
            spectrum = load_rfsi(spath)
            samples.append(TxSample(
                row["id"],
                np.array([float(row["tx_x"]), float(row["tx_y"]),
                          float(row["tx_z"])]),
                str(spath), spectrum))
    if not samples:
        raise ValueError(f"{index_path}: empty dataset")
    dims = {(s.spectrum.height, s.spectrum.width, s.spectrum.channels)
            for s in samples}
    if len(dims) > 1:
        raise ValueError(f"{index_path}: inconsistent image dims {dims}")
    return samples


def _select_pixels(rng, w, h, fraction):
    n_total = w * h
    n_sel = int(np.ceil(fraction * n_total))
    return rng.choice(n_total, size=n_sel, replace=False)


def energy_db(energy, calibration_offset=0.0):
    if energy <= 0.0:
        return RSSI_FLOOR_DB
    return 10.0 * np.log10(energy) + calibration_offset


def rssi_from_spectrum(image: SpectrumImage, fraction, seed,
                       calibration_offset=0.0):
    """Estimator applied to an existing spectrum (1-channel magnitude or
    2-channel complex)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    d = np.asarray(image.data, dtype=np.float64)
    if image.channels == 2:
        e = d[:, :, 0] ** 2 + d[:, :, 1] ** 2
    else:
        e = d[:, :, 0] ** 2
    sel = _select_pixels(rng, image.width, image.height, fraction)
    energy = float(e.reshape(-1)[sel].sum()) / fraction
    return energy_db(energy, calibration_offset)


def rssi_estimate(cloud, pose, tx, fraction, seed, w=360, h=90,
                  calibration_offset=0.0, threads=1):
    """Hemisphere ray-sampled RSSI (dB) of the rendered signal field."""
    from .rasterizer import rasterize_forward

    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    img, _ = rasterize_forward(cloud, pose, tx, w, h, threads=threads)
    return rssi_from_spectrum(img, fraction, seed,
                              calibration_offset=calibration_offset)
