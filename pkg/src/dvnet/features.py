"""Classical image descriptors (HOG, GLCM, gradient-direction histogram)
and CNN penultimate-layer features.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .preprocess import ParameterError, as_gray

DESCRIPTORS = ("HGD", "HOG", "GLCM", "CNN1", "CNN2", "FUSED")

GLCM_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1))


@dataclass
class FeatureVector:
    values: np.ndarray
    descriptor_id: str

    def __post_init__(self):
        if self.descriptor_id not in DESCRIPTORS:
            raise ValueError(f"unknown descriptor id {self.descriptor_id!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.descriptor_id} feature vector has non-finite values")

    @property
    def length(self):
        return self.values.shape[0]


def resize_bilinear(img, height=64, width=64):
    """Resize with pixel-center-aligned bilinear interpolation."""
    img = as_gray(img)
    h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    f = img.astype(np.float64)
    top = f[y0][:, x0] * (1 - fx) + f[y0][:, x1] * fx
    bot = f[y1][:, x0] * (1 - fx) + f[y1][:, x1] * fx
    return np.clip(np.rint(top * (1 - fy) + bot * fy), 0, 255).astype(np.uint8)


def gradients(img):
    """Central differences with clamped borders: ``(gx, gy)``, y pointing down."""
    f = np.pad(np.asarray(img, dtype=np.float64), 1, mode="edge")
    gx = f[1:-1, 2:] - f[1:-1, :-2]
    gy = f[2:, 1:-1] - f[:-2, 1:-1]
    return gx, gy


def hog_descriptor(img, cell=8, bins=9, block=2, eps=1e-6):
    """Histogram of oriented gradients.

    Unsigned orientations (0-180 degrees) are split linearly between the two
    nearest bin centers. Blocks of ``block x block`` cells slide one cell at
    a time and are L2-normalized as ``v / sqrt(|v|^2 + eps^2)``.
    """
    img = as_gray(img)
    h, w = img.shape
    if h % cell or w % cell:
        raise ParameterError(f"image {h}x{w} is not divisible into {cell}x{cell} cells")
    gx, gy = gradients(img)
    mag = np.hypot(gx, gy)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    width = 180.0 / bins
    pos = ang / width - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(int) % bins
    hi = (lo + 1) % bins
    cy, cx = h // cell, w // cell
    cell_idx = (np.arange(h) // cell)[:, None] * cx + (np.arange(w) // cell)[None, :]
    hist = np.zeros(cy * cx * bins)
    np.add.at(hist, (cell_idx * bins + lo).ravel(), (mag * (1 - frac)).ravel())
    np.add.at(hist, (cell_idx * bins + hi).ravel(), (mag * frac).ravel())
    hist = hist.reshape(cy, cx, bins)
    blocks = []
    for by in range(cy - block + 1):
        for bx in range(cx - block + 1):
            v = hist[by:by + block, bx:bx + block].ravel()
            blocks.append(v / np.sqrt(v @ v + eps * eps))
    return FeatureVector(np.concatenate(blocks), "HOG")


def quantize(img, levels):
    return (as_gray(img).astype(np.int64) * levels) // 256


def glcm_matrix(img, offset, levels=16):
    """Symmetric, normalized co-occurrence matrix for one ``(dy, dx)`` offset."""
    q = quantize(img, levels)
    dy, dx = offset
    h, w = q.shape
    y0, y1 = max(0, -dy), min(h, h - dy)
    x0, x1 = max(0, -dx), min(w, w - dx)
    a = q[y0:y1, x0:x1].ravel()
    b = q[y0 + dy:y1 + dy, x0 + dx:x1 + dx].ravel()
    m = np.zeros((levels, levels))
    np.add.at(m, (a, b), 1.0)
    m = m + m.T
    total = m.sum()
    return m / total if total else m


def glcm_statistics(p):
    """``(contrast, correlation, energy, homogeneity)`` of a normalized GLCM.

    Energy is the angular second moment ``sum p^2``. Correlation is 1 when
    either marginal has zero variance.
    """
    n = p.shape[0]
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    contrast = float(np.sum(p * (i - j) ** 2))
    mu_i = np.sum(i * p)
    mu_j = np.sum(j * p)
    sd_i = np.sqrt(np.sum(p * (i - mu_i) ** 2))
    sd_j = np.sqrt(np.sum(p * (j - mu_j) ** 2))
    if sd_i < 1e-15 or sd_j < 1e-15:
        correlation = 1.0
    else:
        correlation = float(np.sum(p * (i - mu_i) * (j - mu_j)) / (sd_i * sd_j))
    energy = float(np.sum(p * p))
    homogeneity = float(np.sum(p / (1.0 + (i - j) ** 2)))
    return contrast, correlation, energy, homogeneity


def glcm_features(img, levels=16, offsets=GLCM_OFFSETS):
    values = []
    for off in offsets:
        values.extend(glcm_statistics(glcm_matrix(img, off, levels)))
    return FeatureVector(np.array(values), "GLCM")


def hgd_descriptor(img, bins=32):
    """Global histogram of signed gradient directions (0-360 degrees),
    magnitude-weighted and L1-normalized. All zeros for a flat image."""
    gx, gy = gradients(as_gray(img))
    mag = np.hypot(gx, gy).ravel()
    ang = (np.degrees(np.arctan2(gy, gx)) % 360.0).ravel()
    idx = np.minimum((ang * bins / 360.0).astype(int), bins - 1)
    hist = np.bincount(idx, weights=mag, minlength=bins)
    total = hist.sum()
    return FeatureVector(hist / total if total > 0 else hist, "HGD")


CLASSICAL = {"HGD": hgd_descriptor, "HOG": hog_descriptor, "GLCM": glcm_features}


def descriptor_matrix(images, descriptor_id, size=64, fn=None):
    """Stack one classical descriptor over images resized to ``size``.

    ``fn`` overrides the default extractor (e.g. with non-default parameters).
    """
    fn = fn or CLASSICAL[descriptor_id]
    rows = [fn(resize_bilinear(img, size, size)).values for img in images]
    lengths = {r.shape[0] for r in rows}
    if len(lengths) > 1:
        raise ValueError(f"{descriptor_id} produced mixed lengths {sorted(lengths)}")
    return np.vstack(rows)


def cnn_penultimate_features(net, img, descriptor_id="CNN1"):
    """Input of the final dense layer for one image (or list of views)."""
    from .fusion import images_to_input

    views = img if isinstance(img, (list, tuple)) else [img]
    x = [images_to_input(np.asarray(v)[None]) for v in views]
    out = net.forward(x, penultimate=True)[0]
    return FeatureVector(out.copy(), descriptor_id)


def features_to_csv(matrix, labels, descriptor_id):
    """RFC-4180 CSV: header ``<id>_0..<id>_{d-1},label``, one row per sample."""
    matrix = np.asarray(matrix, dtype=np.float64)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow([f"{descriptor_id}_{i}" for i in range(matrix.shape[1])] + ["label"])
    for row, label in zip(matrix, labels):
        writer.writerow([repr(float(v)) for v in row] + [int(label)])
    return buf.getvalue()
