"""Dataset ingestion: synthetic generators and IDX-format files."""

import struct

import numpy as np

from .errors import ConfigError, DataFormatError
from .partition import Dataset

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def gen_synthetic_dataset(kind, classes, samples, image_size, seed,
                          sigma=0.25, channels=1, dtype="float64"):
    """Deterministic, balanced, learnable synthetic image classification sets.

    GaussianBlobs: each class has a fixed smooth mean image (a Gaussian bump
    at a class-specific location) and samples are mean + sigma * noise.
    StripePatterns: class determines stripe orientation and frequency.
    """
    if kind not in ("GaussianBlobs", "StripePatterns"):
        raise ConfigError(f"unknown synthetic dataset kind {kind!r}")
    if samples < classes:
        raise ConfigError(f"{samples} samples cannot cover {classes} classes")
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA]))
    h = w = image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    means = np.empty((classes, channels, h, w))
    for c in range(classes):
        if kind == "GaussianBlobs":
            # bump centers spread on a circle; radius scales with the image
            angle = 2 * np.pi * c / classes
            cy = h / 2 + 0.3 * h * np.sin(angle)
            cx = w / 2 + 0.3 * w * np.cos(angle)
            width = 0.15 * image_size
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            # class-dependent baseline intensity: gives each class a distinct
            # first-moment signature, so label-skewed shards also differ in
            # input statistics
            means[c] = bump + 1.5 * c / classes
        else:
            theta = np.pi * c / classes
            freq = 2.0 + (c % 3)
            phase = (xx * np.cos(theta) + yy * np.sin(theta)) / image_size
            means[c] = np.sin(2 * np.pi * freq * phase)

    labels = np.arange(samples) % classes
    labels = labels[rng.permutation(samples)]
    noise = rng.standard_normal((samples, channels, h, w))
    images = (means[labels] + sigma * noise).astype(dtype)
    return Dataset(images=images, labels=labels.astype(np.int64),
                   num_classes=classes)


def _read_exact(f, count, path, what):
    raw = f.read(count)
    if len(raw) != count:
        raise DataFormatError(f"{path}: truncated file while reading {what}")
    return raw


def load_idx_dataset(images_path, labels_path, dtype="float64"):
    """Read an IDX image/label file pair into a Dataset.

    Images: magic 0x00000803, big-endian dims [N,H,W], unsigned bytes
    scaled to [0,1], with a singleton channel axis inserted. Labels: magic
    0x00000801, length N.
    """
    with open(images_path, "rb") as f:
        magic, n, h, w = struct.unpack(">IIII", _read_exact(f, 16, images_path, "header"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        raw = _read_exact(f, n * h * w, images_path, "pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)
    with open(labels_path, "rb") as f:
        magic, ln = struct.unpack(">II", _read_exact(f, 8, labels_path, "header"))
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        if ln != n:
            raise DataFormatError(
                f"label count {ln} does not match image count {n}"
            )
        labels = np.frombuffer(_read_exact(f, ln, labels_path, "labels"),
                               dtype=np.uint8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if ln else 0
    return Dataset(images=(images / 255.0).astype(np.dtype(dtype)),
                   labels=labels, num_classes=num_classes)


def save_idx_dataset(ds, images_path, labels_path):
    """Write a Dataset as an IDX pair (bytes rounded from [0,1] floats)."""
    imgs = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8)
    n, c, h, w = imgs.shape
    if c != 1:
        raise ConfigError("IDX export supports single-channel images only")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(imgs.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())
