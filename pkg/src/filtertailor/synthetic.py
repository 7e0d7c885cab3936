"""Procedural pattern images for desk-scale transfer experiments.

Each image is an oriented sinusoidal grating (orientation in {0, 45, 90,
135} degrees, one of two spatial frequencies, random phase) with one of
eight bright shapes composited on top. The same image pool therefore
carries three label views:

  shape        8 classes, driven by local edge geometry
  orientation  4 classes, driven by the global grating direction
  frequency    2 classes, driven by the grating period

Pre-training on the shape task and transferring to orientation or
frequency gives a genuine feature mismatch: filters useful for shapes
are largely dead weight for the grating tasks, which is the situation
target-aware pruning is meant to exploit.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .data import Dataset
from .tensor import Tensor

TASKS = ("shape", "orientation", "frequency")
SHAPES = ("disk", "ring", "square", "diamond", "plus", "cross", "hbar", "vbar")
_ORIENTATIONS = (0.0, 45.0, 90.0, 135.0)
_FREQUENCIES = (1.5, 3.2)  # cycles across the image
_NOISE_SIGMA = 0.04


def _balanced_labels(rng: np.random.Generator, n: int, classes: int) -> np.ndarray:
    reps = -(-n // classes)
    labels = np.tile(np.arange(classes), reps)[:n]
    return rng.permutation(labels)


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    # Stroke widths scale with the canvas so small sizes stay legible.
    t = size / 16.0
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - cy
    dx = xx - cx
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (r - 1.6 * t) ** 2)
    if shape == "square":
        return (np.abs(dy) <= r * 0.82) & (np.abs(dx) <= r * 0.82)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.15
    if shape == "plus":
        return ((np.abs(dy) <= 1.0 * t) & (np.abs(dx) <= r)) | \
               ((np.abs(dx) <= 1.0 * t) & (np.abs(dy) <= r))
    if shape == "cross":
        return ((np.abs(dy - dx) <= 1.4 * t) | (np.abs(dy + dx) <= 1.4 * t)) & \
               (np.maximum(np.abs(dy), np.abs(dx)) <= r)
    if shape == "hbar":
        return (np.abs(dy) <= 1.2 * t) & (np.abs(dx) <= r * 1.2)
    if shape == "vbar":
        return (np.abs(dx) <= 1.2 * t) & (np.abs(dy) <= r * 1.2)
    raise ConfigError(f"unknown shape {shape!r}")


def generate_patterns(n: int, seed, size: int = 16):
    """Build n pattern images plus one label vector per task view.

    Returns (images [n,1,size,size] float32 in [0,1], labels dict keyed
    by task name). Label vectors are class-balanced and drawn
    independently of each other, so the task views are unrelated.
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if size < 8:
        raise ConfigError(f"size must be >= 8, got {size}")
    rng = np.random.default_rng(seed)
    shape_labels = _balanced_labels(rng, n, len(SHAPES))
    orient_labels = _balanced_labels(rng, n, len(_ORIENTATIONS))
    freq_labels = _balanced_labels(rng, n, len(_FREQUENCIES))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    images = np.empty((n, 1, size, size), dtype=np.float32)
    margin = size * (4.5 / 16.0)
    for i in range(n):
        theta = np.deg2rad(_ORIENTATIONS[orient_labels[i]])
        freq = _FREQUENCIES[freq_labels[i]]
        phase = rng.uniform(0.0, 2.0 * np.pi)
        axis = xx * np.cos(theta) + yy * np.sin(theta)
        grating = 0.45 + 0.3 * np.sin(2.0 * np.pi * freq * axis / size + phase)
        cy = rng.uniform(margin, size - 1 - margin)
        cx = rng.uniform(margin, size - 1 - margin)
        r = rng.uniform(size * (3.4 / 16.0), size * (4.2 / 16.0))
        mask = _shape_mask(SHAPES[shape_labels[i]], size, cy, cx, r)
        img = np.where(mask, 0.98, grating)
        img = img + rng.normal(0.0, _NOISE_SIGMA, size=(size, size))
        images[i, 0] = np.clip(img, 0.0, 1.0)

    labels = {
        "shape": shape_labels.astype(np.int64),
        "orientation": orient_labels.astype(np.int64),
        "frequency": freq_labels.astype(np.int64),
    }
    return images, labels


def pattern_dataset(n: int, seed, task: str, size: int = 16,
                    name: str | None = None) -> Dataset:
    """Generate a pattern pool labeled by one task view."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; known: {TASKS}")
    images, labels = generate_patterns(n, seed, size=size)
    class_count = {"shape": len(SHAPES), "orientation": len(_ORIENTATIONS),
                   "frequency": len(_FREQUENCIES)}[task]
    return Dataset(Tensor(images), labels[task], class_count,
                   name or f"patterns-{task}")
