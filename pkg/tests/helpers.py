"""Shared test utilities: independent oracles and fixture generators.

Everything here is deliberately written from scratch against the external
definitions (IDX byte layout, direct convolution sums, central differences,
textbook quantile interpolation) so the tests exercise true dual routes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from leashed.data import Dataset
from leashed.nn import (
    Conv2D,
    Dense,
    MaxPool,
    Network,
    NetworkSpec,
    mean_loss,
    param_count,
)

# -- independent IDX encoder ---------------------------------------------------


def encode_idx_images(images_u8: np.ndarray) -> bytes:
    """Independent IDX image encoder: header fields packed one by one."""
    n, rows, cols = images_u8.shape
    out = bytearray()
    out += struct.pack(">I", 0x00000803)
    out += struct.pack(">I", n)
    out += struct.pack(">I", rows)
    out += struct.pack(">I", cols)
    for img in images_u8:
        for row in img:
            out += bytes(int(v) for v in row)
    return bytes(out)


def encode_idx_labels(labels: np.ndarray) -> bytes:
    out = bytearray()
    out += struct.pack(">I", 0x00000801)
    out += struct.pack(">I", len(labels))
    out += bytes(int(v) for v in labels)
    return bytes(out)


def write_idx_fixture(
    images_u8: np.ndarray, labels: np.ndarray, directory: Path
) -> tuple[Path, Path]:
    images_path = directory / "images.idx"
    labels_path = directory / "labels.idx"
    images_path.write_bytes(encode_idx_images(images_u8))
    labels_path.write_bytes(encode_idx_labels(labels))
    return images_path, labels_path


def make_digit_images(
    n_per_class: int, seed: int, classes: int = 10
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 28x28 uint8 images with digit-like pixel statistics.

    Each class is a dark canvas with a few bright class-specific blobs, so
    most pixels are near zero and the informative ones are localized, which
    is what makes the full-size dense network trainable at desk scale.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:28, 0:28].astype(np.float64)
    templates = []
    for _ in range(classes):
        img = np.zeros((28, 28))
        for _ in range(3):
            cy, cx = rng.uniform(5, 23, 2)
            s = rng.uniform(1.5, 3.0)
            img += np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s)))
        templates.append(np.clip(img, 0, 1))
    labels = np.tile(np.arange(classes), n_per_class)
    rng.shuffle(labels)
    images = np.empty((len(labels), 28, 28), dtype=np.uint8)
    for i, label in enumerate(labels):
        noisy = np.clip(templates[label] + rng.normal(0.0, 0.05, (28, 28)), 0, 1)
        images[i] = (noisy * 255.0).astype(np.uint8)
    return images, labels.astype(np.uint8)


# -- gradient oracle ------------------------------------------------------------


def fd_gradient(
    network: Network,
    theta: np.ndarray,
    x: np.ndarray,
    labels: np.ndarray,
    h_scale: float = 1e-6,
) -> np.ndarray:
    """Central finite differences of the mean loss, in float64."""
    theta = theta.astype(np.float64)
    x = x.astype(np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        h = h_scale * max(1.0, abs(theta[i]))
        plus = theta.copy()
        plus[i] += h
        minus = theta.copy()
        minus[i] -= h
        grad[i] = (
            mean_loss(network, plus, x, labels) - mean_loss(network, minus, x, labels)
        ) / (2.0 * h)
    return grad


def gradient_rel_error(reference: np.ndarray, candidate: np.ndarray) -> float:
    scale = max(np.abs(reference).max(), 1e-12)
    return float(np.abs(candidate.astype(np.float64) - reference).max() / scale)


def random_tiny_spec(rng: np.random.Generator) -> NetworkSpec:
    """Random dense/conv/pool mix with at most 200 parameters."""
    while True:
        kind = rng.integers(0, 3)
        classes = int(rng.integers(2, 5))
        if kind == 0:
            layers = []
            for _ in range(int(rng.integers(1, 3))):
                layers.append(Dense(int(rng.integers(2, 7)), "relu"))
            layers.append(Dense(classes, "softmax"))
            spec = NetworkSpec((int(rng.integers(2, 9)),), tuple(layers))
        else:
            c = int(rng.integers(1, 3))
            h = int(rng.integers(5, 8))
            w = int(rng.integers(5, 8))
            k = int(rng.integers(2, 4))
            filters = int(rng.integers(1, 4))
            layers = [Conv2D(filters, (k, k), "relu")]
            if kind == 2:
                layers.append(MaxPool((2, 2), "relu" if rng.integers(0, 2) else "identity"))
            layers.append(Dense(classes, "softmax"))
            spec = NetworkSpec((c, h, w), tuple(layers))
        try:
            if param_count(spec) <= 200:
                return spec
        except ValueError:
            continue


def random_batch(
    rng: np.random.Generator, network: Network, batch: int = 3
) -> tuple[np.ndarray, np.ndarray]:
    spec = network.spec
    if len(spec.input_shape) == 1:
        x = rng.normal(0.0, 1.0, (batch, spec.input_shape[0]))
    else:
        x = rng.normal(0.0, 1.0, (batch, *spec.input_shape))
    y = rng.integers(0, network.classes, batch)
    return x, y


# -- direct convolution oracle ------------------------------------------------------


def brute_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid-padding stride-1 convolution written as explicit sums."""
    bn, c, h, width = x.shape
    f, _, kh, kw = w.shape
    out = np.zeros((bn, f, h - kh + 1, width - kw + 1), dtype=np.float64)
    for n in range(bn):
        for fi in range(f):
            for i in range(h - kh + 1):
                for j in range(width - kw + 1):
                    acc = float(b[fi])
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += float(w[fi, ci, u, v]) * float(x[n, ci, i + u, j + v])
                    out[n, fi, i, j] = acc
    return out


# -- quantile oracle ---------------------------------------------------------------


def percentile_oracle(values, q: float) -> float:
    """Linear-interpolation percentile, written independently of numpy."""
    data = sorted(float(v) for v in values)
    if not data:
        raise ValueError("empty data")
    if len(data) == 1:
        return data[0]
    pos = q / 100.0 * (len(data) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(data) - 1)
    frac = pos - lo
    return data[lo] * (1.0 - frac) + data[hi] * frac


# -- shared datasets ----------------------------------------------------------------


def blobs_tiny() -> Dataset:
    from leashed.data import synthetic_blobs

    return synthetic_blobs(classes=3, dims=8, per_class=200, spread=0.3, seed=1)
