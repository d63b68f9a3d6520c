"""Synthetic demo sections: layered random wavefields with a salt body.

These are NOT physical simulations.  They exist so the full pipeline
(patchify, train, generate, sweep) runs end to end without external
data: horizontal-ish reflectors built from a Ricker wavelet, a salt
band with wavy boundaries, and a toy velocity model (linear background
gradient, constant inside salt) from which the mask is derived by the
same threshold-and-clip rule used for real velocity models.
"""

from __future__ import annotations

import numpy as np

from flowseg.data import SeismicSection, save_section, velocity_to_mask

BACKGROUND_V0 = 1500.0
BACKGROUND_GRADIENT = 25.0
SALT_VELOCITY = 4500.0
MASK_THRESHOLD = 4000.0
CLIP_RANGE = (1000.0, 4600.0)


def ricker_wavelet(freq: float = 0.18, half_width: int = 6) -> np.ndarray:
    """Discrete Ricker (Mexican-hat) wavelet, unit peak amplitude."""
    t = np.arange(-half_width, half_width + 1, dtype=float)
    a = (np.pi * freq * t) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def _smooth_boundary(width: int, base: float, rng) -> np.ndarray:
    """A wavy horizontal boundary: sinusoids plus smoothed noise."""
    c = np.arange(width, dtype=float)
    amp = rng.uniform(1.5, 3.5)
    period = rng.uniform(0.5, 1.5) * width
    phase = rng.uniform(0.0, 2 * np.pi)
    curve = base + amp * np.sin(2 * np.pi * c / period + phase)
    noise = rng.normal(0.0, 1.0, size=width)
    kernel = np.ones(9) / 9.0
    curve += np.convolve(noise, kernel, mode="same")
    return curve


def make_demo_section(height: int = 64, width: int = 256, seed: int = 0) -> SeismicSection:
    """Build one synthetic section with train/val/test column splits.

    The salt band spans the full width so every split contains salt, and
    its wavy top/bottom give patches a spread of salt fractions.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDE30]))

    # salt band boundaries (rows, per column)
    top = _smooth_boundary(width, height * 0.45, rng)
    bottom = _smooth_boundary(width, height * 0.80, rng)
    rows = np.arange(height, dtype=float)[:, None]
    salt = (rows >= top[None, :]) & (rows < bottom[None, :])

    # toy velocity: linear background gradient, constant inside salt
    vel = BACKGROUND_V0 + BACKGROUND_GRADIENT * np.broadcast_to(rows, (height, width)).copy()
    vel[salt] = SALT_VELOCITY
    mask = velocity_to_mask(vel, MASK_THRESHOLD, *CLIP_RANGE)

    # layered reflectivity: wavy boundaries with random impedance jumps
    reflect = np.zeros((height, width))
    depth = rng.uniform(2.0, 6.0)
    while depth < height - 2:
        boundary = _smooth_boundary(width, depth, rng)
        amp = rng.uniform(0.4, 1.0) * rng.choice([-1.0, 1.0])
        idx = np.clip(np.round(boundary).astype(int), 0, height - 1)
        reflect[idx, np.arange(width)] += amp
        depth += rng.uniform(4.0, 9.0)

    # strong reflection at the salt top, muted layering inside the body
    top_idx = np.clip(np.round(top).astype(int), 0, height - 1)
    inside = salt
    reflect[inside] *= 0.12
    reflect[top_idx, np.arange(width)] += 1.6

    wavelet = ricker_wavelet()
    image = np.apply_along_axis(lambda col: np.convolve(col, wavelet, mode="same"), 0, reflect)
    image += rng.normal(0.0, 0.08, size=image.shape)
    image[inside] += rng.normal(0.0, 0.04, size=int(inside.sum()))

    w_train = int(width * 0.5)
    w_val = int(width * 0.75)
    splits = [("train", 0, w_train), ("val", w_train, w_val), ("test", w_val, width)]
    return SeismicSection(image=image, mask=mask, splits=splits, section_id=seed)


def write_demo_bundle(out_dir: str, height: int = 64, width: int = 256, seed: int = 0) -> str:
    """Generate a demo section and persist it; returns the descriptor path."""
    sec = make_demo_section(height, width, seed)
    return save_section(sec, out_dir, name=f"demo{seed:03d}")
