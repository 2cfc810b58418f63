"""Procedurally generated grayscale images for desk-scale experiments.

Each image mixes a smooth random field (white noise low-pass filtered in the
Fourier domain) with a few piecewise-constant shapes (rectangles and disks),
then is rescaled into [0.05, 0.95]. Image ``i`` of a set with seed ``s`` is
drawn from ``SeedSequence([s, i])``, so any subset can be regenerated on its
own.
"""

import os

import numpy as np


def sample_rng(seed, *stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def smooth_field(shape, rng, correlation=3.0):
    h, w = shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    envelope = np.exp(-0.5 * (2 * np.pi * correlation) ** 2 * (fx ** 2 + fy ** 2))
    noise = rng.standard_normal(shape)
    field = np.real(np.fft.ifft2(np.fft.fft2(noise) * envelope))
    return field / (field.std() + 1e-12)


def shapes_layer(shape, rng, count=3):
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w]
    out = np.zeros(shape)
    for _ in range(count):
        level = rng.uniform(-1.5, 1.5)
        if rng.random() < 0.5:
            r0, c0 = rng.integers(0, h), rng.integers(0, w)
            rh, cw = rng.integers(h // 4, h // 2 + 1), rng.integers(w // 4, w // 2 + 1)
            region = (rows >= r0) & (rows < r0 + rh) & (cols >= c0) & (cols < c0 + cw)
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(min(h, w) / 6, min(h, w) / 3)
            region = (rows - cy) ** 2 + (cols - cx) ** 2 <= rad ** 2
        out[region] = level
    return out


def synthetic_image(shape, seed, index=0):
    rng = sample_rng(seed, index)
    img = 0.6 * smooth_field(shape, rng, correlation=rng.uniform(1.5, 4.0)) + shapes_layer(shape, rng)
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros(shape)
    return 0.05 + 0.9 * img


def synthetic_dataset(count, shape=(16, 16), seed=0, start=0):
    """Array of shape (count, H, W)."""
    if count == 0:
        return np.zeros((0,) + tuple(shape))
    return np.stack([synthetic_image(shape, seed, start + i) for i in range(count)])


def load_image_folder(path, shape=None):
    """Load every PGM in ``path`` (sorted by name) into a (N, H, W) array in [0, 1].

    Images larger than ``shape`` are center-cropped; smaller ones are skipped.
    """
    from .imageio import read_pnm

    images = []
    for name in sorted(os.listdir(path)):
        if not name.lower().endswith((".pgm", ".pnm")):
            continue
        img = read_pnm(os.path.join(path, name))
        if shape is not None:
            h, w = shape
            if img.shape[0] < h or img.shape[1] < w:
                continue
            r0 = (img.shape[0] - h) // 2
            c0 = (img.shape[1] - w) // 2
            img = img[r0:r0 + h, c0:c0 + w]
        images.append(img)
    if not images:
        return np.zeros((0,) + (tuple(shape) if shape else (0, 0)))
    return np.stack(images)
