"""Deterministic synthetic dual-view breast-lesion ROIs.

Each case is a 3-D ellipsoid seen in two orthogonal planes: the coronal view
shows the x-y cross-section, the transverse view the x-z (depth) section with
depth increasing downward. Benign lesions are smooth, wider-than-tall
ellipses with slight posterior enhancement. Malignant lesions are rounder,
randomly oriented, have an irregular angular margin with radial spicules and
cast a posterior acoustic shadow. Both views carry Rayleigh speckle.

All randomness comes from ``SplitMix64`` so datasets are portable.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .preprocess import ParameterError, encode_pgm, read_pgm
from .rng import SplitMix64, derive_seed

SIZE = 64
MARGIN = 4
LABEL_NAMES = ("benign", "malignant")
RAYLEIGH_MEAN = math.sqrt(math.pi / 2.0)


@dataclass
class LesionParams:
    label: int
    center: tuple
    # ellipsoid semi-axes: x (columns), y (coronal rows), z (transverse rows)
    radii: tuple
    angle: float = 0.0
    spicule_count: int = 0
    spicule_length: float = 0.0
    spicule_angles: tuple = ()
    irregularity: tuple = ()  # (harmonic, amplitude, phase) triples
    interior_intensity: float = 70.0
    background_intensity: float = 160.0
    posterior_gain: float = 0.0  # <0 shadow, >0 enhancement
    speckle_scale: float = 0.0
    seed: int = 0

    def validate(self):
        if self.label not in (0, 1):
            raise ParameterError(f"label must be 0 or 1, got {self.label}")
        if self.label == 0 and self.spicule_count != 0:
            raise ParameterError("benign lesions have no spicules")
        if self.label == 1 and self.spicule_count < 4:
            raise ParameterError("malignant lesions need at least 4 spicules")
        if len(self.spicule_angles) != self.spicule_count:
            raise ParameterError("spicule_angles must list one angle per spicule")
        if self.speckle_scale < 0:
            raise ParameterError("speckle_scale must be nonnegative")
        reach = max(self.radii) * (1.0 + sum(abs(a) for _, a, _ in self.irregularity)) + self.spicule_length
        cy, cx = self.center
        for c in (cy, cx):
            if c - reach < MARGIN or c + reach > SIZE - 1 - MARGIN:
                raise ParameterError(
                    f"lesion reach {reach:.1f} around center {self.center} leaves the {MARGIN}-pixel margin")

    def to_dict(self):
        d = asdict(self)
        d["center"] = list(self.center)
        d["radii"] = list(self.radii)
        d["spicule_angles"] = list(self.spicule_angles)
        d["irregularity"] = [list(t) for t in self.irregularity]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["center"] = tuple(d["center"])
        d["radii"] = tuple(d["radii"])
        d["spicule_angles"] = tuple(d["spicule_angles"])
        d["irregularity"] = tuple(tuple(t) for t in d["irregularity"])
        return cls(**d)


@dataclass
class DualViewSample:
    coronal: np.ndarray
    transverse: np.ndarray
    label: int
    params: LesionParams = None
    descriptors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.coronal.shape != self.transverse.shape:
            raise ParameterError("coronal and transverse views must have equal size")


@dataclass
class SynthDataset:
    samples: list
    difficulty: str
    seed: int
    benign_count: int
    malignant_count: int

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def views(self, which):
        return np.stack([getattr(s, which) for s in self.samples])


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def _radial_scale(phi, irregularity):
    r = np.ones_like(phi)
    for k, amp, phase in irregularity:
        r = r + amp * np.cos(k * phi + phase)
    return r


def _lesion_mask(cy, cx, ra, rb, angle, irregularity, spicule_angles, spicule_length):
    """Boolean lesion footprint for one plane; ``ra`` lies along ``angle``."""
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    rho = np.hypot(u / ra, v / rb)
    phi = np.arctan2(v / rb, u / ra)
    mask = rho <= _radial_scale(phi, irregularity)
    for phi_k in spicule_angles:
        scale = float(_radial_scale(np.array([phi_k]), irregularity)[0])
        # boundary point and outward direction in image coordinates
        bu, bv = ra * scale * math.cos(phi_k), rb * scale * math.sin(phi_k)
        norm = math.hypot(bu, bv)
        du, dv = bu / norm, bv / norm
        t = u * du + v * dv - 0.85 * norm
        perp = np.abs(-u * dv + v * du)
        length = spicule_length + 0.15 * norm
        half_width = 1.6 - 1.0 * np.clip(t / length, 0.0, 1.0)
        mask |= (t >= 0) & (t <= length) & (perp <= half_width)
    return mask


def _speckle(img, scale, rng):
    if scale == 0:
        return img
    r = rng.rayleigh(img.size).reshape(img.shape) / RAYLEIGH_MEAN
    return img * (1.0 + scale * (r - 1.0))


def _quantize(img):
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_lesion(params):
    """Render the coronal and transverse ROIs for one lesion."""
    params.validate()
    p = params
    cy, cx = p.center
    ax, ay, az = p.radii
    cor_mask = _lesion_mask(cy, cx, ax, ay, p.angle, p.irregularity, p.spicule_angles, p.spicule_length)
    # transverse section keeps the in-plane tilt only for irregular (malignant) margins
    tr_angle = p.angle if p.label == 1 else 0.0
    tr_mask = _lesion_mask(cy, cx, ax, az, tr_angle, p.irregularity, p.spicule_angles, p.spicule_length)

    cor = np.where(cor_mask, p.interior_intensity, p.background_intensity).astype(np.float64)
    tr = np.where(tr_mask, p.interior_intensity, p.background_intensity).astype(np.float64)

    # posterior band: columns under the lesion, rows below its deepest point
    cols = tr_mask.any(axis=0)
    if cols.any():
        rows = np.nonzero(tr_mask.any(axis=1))[0]
        below = np.arange(SIZE)[:, None] > rows.max()
        band = below & cols[None, :]
        tr = np.where(band, tr * (1.0 + p.posterior_gain), tr)

    rng = SplitMix64(p.seed)
    cor = _speckle(cor, p.speckle_scale, rng)
    tr = _speckle(tr, p.speckle_scale, rng)
    return DualViewSample(_quantize(cor), _quantize(tr), p.label, p)


DIFFICULTY = {
    # lo/hi ranges per class: (benign, malignant)
    "easy": {
        "radius": (9.0, 12.0),
        "aspect": ((1.5, 1.8), (0.85, 1.1)),
        "interior": ((80.0, 95.0), (30.0, 45.0)),
        "background": (150.0, 170.0),
        "speckle": (0.10, 0.20),
        "spicules": (8, 12),
        "spicule_length": (6.0, 8.0),
        "irregularity": (0.10, 0.16),
        "posterior": ((0.10, 0.25), (-0.55, -0.40)),
        "tilt": 0.15,
    },
    "standard": {
        "radius": (9.0, 13.0),
        "aspect": ((1.15, 1.6), (0.85, 1.35)),
        "interior": ((45.0, 95.0), (35.0, 85.0)),
        "background": (120.0, 170.0),
        "speckle": (0.45, 0.65),
        "spicules": (4, 6),
        "spicule_length": (2.5, 5.0),
        "irregularity": (0.04, 0.10),
        "posterior": ((-0.10, 0.15), (-0.35, -0.05)),
        "tilt": 0.35,
    },
}


def sample_params(label, difficulty, seed):
    """Draw ``LesionParams`` for one case from ``SplitMix64(seed)``."""
    if difficulty not in DIFFICULTY:
        raise ParameterError(f"unknown difficulty {difficulty!r}")
    cfg = DIFFICULTY[difficulty]
    rng = SplitMix64(seed)
    r = rng.scalar(*cfg["radius"])
    aspect = rng.scalar(*cfg["aspect"][label])
    ax = r * math.sqrt(aspect)
    ay = r / math.sqrt(aspect)
    az = r / math.sqrt(aspect) * rng.scalar(0.85, 1.15)
    if label == 0:
        angle = rng.scalar(-cfg["tilt"], cfg["tilt"])
        spicules, length, angles, irregular = 0, 0.0, (), ()
    else:
        angle = rng.scalar(-math.pi, math.pi)
        spicules = int(rng.integers(cfg["spicules"][0], cfg["spicules"][1] + 1)[0])
        length = rng.scalar(*cfg["spicule_length"])
        base = rng.scalar(0, 2 * math.pi)
        jitter = rng.uniform(spicules, -0.3, 0.3)
        angles = tuple(float((base + 2 * math.pi * k / spicules + jitter[k]) % (2 * math.pi) - math.pi)
                       for k in range(spicules))
        amp = rng.scalar(*cfg["irregularity"])
        harmonics = (3, 5, 7)
        phases = rng.uniform(3, 0, 2 * math.pi)
        irregular = tuple((k, amp / (i + 1), float(phases[i])) for i, k in enumerate(harmonics))
    reach = max(ax, ay, az) * (1.0 + sum(a for _, a, _ in irregular)) + length
    slack = max(0.0, (SIZE - 1) / 2.0 - MARGIN - reach - 0.5)
    cy = (SIZE - 1) / 2.0 + rng.scalar(-slack, slack)
    cx = (SIZE - 1) / 2.0 + rng.scalar(-slack, slack)
    return LesionParams(
        label=label, center=(cy, cx), radii=(ax, ay, az), angle=angle,
        spicule_count=spicules, spicule_length=length, spicule_angles=angles,
        irregularity=irregular,
        interior_intensity=rng.scalar(*cfg["interior"][label]),
        background_intensity=rng.scalar(*cfg["background"]),
        posterior_gain=rng.scalar(*cfg["posterior"][label]),
        speckle_scale=rng.scalar(*cfg["speckle"]),
        seed=derive_seed(seed, 0x5EC1E),
    )


def generate_dataset(n_benign=71, n_malignant=74, difficulty="standard", seed=0):
    """Render ``n_benign + n_malignant`` cases in a seed-determined order.

    Case ``i`` (benign first, before shuffling) uses seed ``seed XOR i``.
    """
    if n_benign < 0 or n_malignant < 0:
        raise ParameterError("sample counts must be nonnegative")
    n = n_benign + n_malignant
    samples = [render_lesion(sample_params(0 if i < n_benign else 1, difficulty, derive_seed(seed, i)))
               for i in range(n)]
    order = SplitMix64(seed).permutation(n)
    return SynthDataset([samples[k] for k in order], difficulty, int(seed), n_benign, n_malignant)


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

def parse_ratio(ratio):
    """``"1.3:1"`` -> 1.3 (positives per negative)."""
    if isinstance(ratio, str):
        pos, neg = ratio.split(":")
        value = float(pos) / float(neg)
    else:
        value = float(ratio)
    if not value > 0:
        raise ParameterError(f"ratio must be positive, got {ratio!r}")
    return value


def stratified_split(ds, test_fraction=0.3, seed=0):
    """Per-class random split; returns sorted ``(train_idx, test_idx)``."""
    labels = ds.labels
    rng = SplitMix64(seed)
    train, test = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(test_fraction * idx.size))
        test.extend(idx[:k].tolist())
        train.extend(idx[k:].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64)


def split_with_ratio(ds, test_fraction, train_pos_neg_ratio, seed=0):
    """Class-balanced fixed test split plus a training set at a given
    malignant:benign ratio.

    The test split depends only on ``ds``, ``test_fraction`` and ``seed``, so
    it is identical across ratios. The training negatives set the scale:
    ``n_neg = min(available_neg, floor(available_pos / r))`` and
    ``n_pos = floor(r * n_neg)``.
    """
    r = parse_ratio(train_pos_neg_ratio)
    labels = ds.labels
    n_test = int(round(test_fraction * labels.size))
    per_class = n_test // 2
    rng = SplitMix64(seed)
    pools, test = {}, []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if idx.size < per_class:
            raise ParameterError(f"class {cls} has {idx.size} samples, test split needs {per_class}")
        idx = idx[rng.permutation(idx.size)]
        test.extend(idx[:per_class].tolist())
        pools[cls] = idx[per_class:]
    avail_pos, avail_neg = pools[1].size, pools[0].size
    n_neg = min(avail_neg, int(math.floor(avail_pos / r + 1e-9)))
    n_pos = int(math.floor(r * n_neg + 1e-9))
    if n_neg < 1 or n_pos < 1:
        raise ParameterError(
            f"ratio {train_pos_neg_ratio} infeasible: {avail_pos} malignant and {avail_neg} benign "
            f"left after the test split, need at least {math.ceil(r)} malignant and 1 benign")
    # subsample with a generator independent of the test draw
    sub = SplitMix64(derive_seed(seed, 0xA770))
    pos = pools[1][np.sort(sub.permutation(avail_pos)[:n_pos])]
    neg = pools[0][np.sort(sub.permutation(avail_neg)[:n_neg])]
    train = np.sort(np.concatenate([pos, neg]))
    return train.astype(np.int64), np.array(sorted(test), dtype=np.int64)


# --------------------------------------------------------------------------
# shape statistics
# --------------------------------------------------------------------------

def boundary_radii(mask, n_angles=180):
    """Distance from the mask centroid to its outermost pixel along rays."""
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    theta = np.linspace(0, 2 * np.pi, n_angles, endpoint=False)
    steps = np.arange(0, SIZE * 1.5, 0.25)
    py = np.rint(cy + np.sin(theta)[:, None] * steps[None, :]).astype(int)
    px = np.rint(cx + np.cos(theta)[:, None] * steps[None, :]).astype(int)
    inside = (py >= 0) & (py < mask.shape[0]) & (px >= 0) & (px < mask.shape[1])
    hit = np.zeros_like(inside)
    hit[inside] = mask[py[inside], px[inside]] > 0
    last = np.where(hit.any(axis=1), hit.shape[1] - 1 - np.argmax(hit[:, ::-1], axis=1), 0)
    return theta, steps[last]


def boundary_curvature_variance(mask, n_angles=180):
    """Variance of the turning angle along the ray-cast boundary polygon."""
    theta, r = boundary_radii(mask, n_angles)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    d = np.roll(pts, -1, axis=0) - pts
    heading = np.arctan2(d[:, 1], d[:, 0])
    turn = np.angle(np.exp(1j * (np.roll(heading, -1) - heading)))
    return float(np.var(turn))


def perimeter_area_ratio(mask):
    """``perimeter^2 / area`` with perimeter = foreground pixels touching
    background (4-connectivity, outside counts as background)."""
    m = np.pad(np.asarray(mask) > 0, 1)
    core = m[1:-1, 1:-1]
    interior = core & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    area = int(core.sum())
    if area == 0:
        return 0.0
    perim = int((core & ~interior).sum())
    return perim * perim / area


# --------------------------------------------------------------------------
# export / import
# --------------------------------------------------------------------------

def export_dataset(ds, out_dir, splits, provenance=None):
    """Write ``{split}/{label}/{index}_{view}.pgm`` and ``manifest.json``.

    ``splits`` maps split names to sample-index arrays. ``provenance`` entries
    (seed, config_hash, version) are embedded in every PGM header comment
    and in the manifest.
    """
    provenance = dict(provenance or {})
    comments = [f"{k}={v}" for k, v in sorted(provenance.items())]
    membership = {}
    for split, idx in splits.items():
        for i in idx:
            s = ds.samples[int(i)]
            d = os.path.join(out_dir, split, LABEL_NAMES[s.label])
            os.makedirs(d, exist_ok=True)
            for view in ("coronal", "transverse"):
                _write_atomic(os.path.join(d, f"{int(i):04d}_{view}.pgm"),
                              encode_pgm(getattr(s, view), comments))
            membership[int(i)] = split
    manifest = dict(provenance)
    manifest.update({
        "seed": ds.seed,
        "difficulty": ds.difficulty,
        "counts": {"benign": ds.benign_count, "malignant": ds.malignant_count},
        "samples": [{"index": i, "label": s.label, "split": membership.get(i),
                     "params": s.params.to_dict() if s.params else None}
                    for i, s in enumerate(ds.samples)],
    })
    _write_atomic(os.path.join(out_dir, "manifest.json"),
                  (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode("utf-8"))


def load_dataset(in_dir):
    """Inverse of ``export_dataset``: ``(SynthDataset, {split: indices})``."""
    with open(os.path.join(in_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    samples, splits = [], {}
    for entry in manifest["samples"]:
        i, split, label = entry["index"], entry["split"], entry["label"]
        if split is None:
            raise ParameterError(f"sample {i} was not exported")
        d = os.path.join(in_dir, split, LABEL_NAMES[label])
        views = [read_pgm(os.path.join(d, f"{i:04d}_{v}.pgm")) for v in ("coronal", "transverse")]
        params = LesionParams.from_dict(entry["params"]) if entry["params"] else None
        samples.append(DualViewSample(views[0], views[1], label, params))
        splits.setdefault(split, []).append(i)
    ds = SynthDataset(samples, manifest["difficulty"], manifest["seed"],
                      manifest["counts"]["benign"], manifest["counts"]["malignant"])
    return ds, {k: np.array(v, dtype=np.int64) for k, v in splits.items()}


def _write_atomic(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
