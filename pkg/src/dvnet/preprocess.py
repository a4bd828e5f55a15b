"""ROI enhancement: median filter, histogram equalization, Fourier-domain
Butterworth low-pass, morphological open/close and Otsu binarization.

Images are 2-D ``uint8`` arrays indexed ``[row, col]``; masks are 2-D
``uint8`` arrays holding 0 (background) and 1 (lesion). Borders are handled
by clamp-to-edge replication throughout.
"""

import math
import time
from dataclasses import asdict, dataclass

import numpy as np


class ParameterError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def as_gray(img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ParameterError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255:
            raise ParameterError("pixel values must lie in [0, 255]")
        img = img.astype(np.uint8)
    return img


def _windows(img, radius):
    padded = np.pad(img, radius, mode="edge")
    k = 2 * radius + 1
    return np.lib.stride_tricks.sliding_window_view(padded, (k, k))


def median_filter(img, radius=1):
    if radius < 1:
        raise ParameterError(f"median radius must be >= 1, got {radius}")
    img = as_gray(img)
    win = _windows(img, radius).reshape(img.shape + (-1,))
    # odd window size, so the median is an actual pixel value
    return np.sort(win, axis=-1)[..., win.shape[-1] // 2]


def equalization_lut(img):
    """256-entry lookup table ``round(255 * cdf(v) / N)``.

    A constant image maps to 255 everywhere.
    """
    img = as_gray(img)
    hist = np.bincount(img.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    # integer round-half-up
    return ((255 * cdf * 2 + img.size) // (2 * img.size)).astype(np.uint8)


def histogram_equalize(img):
    img = as_gray(img)
    return equalization_lut(img)[img]


# --------------------------------------------------------------------------
# FFT
# --------------------------------------------------------------------------

def _is_pow2(n):
    return n > 0 and n & (n - 1) == 0


def _fft_radix2(x):
    """Iterative Cooley-Tukey along the last axis (length a power of two)."""
    n = x.shape[-1]
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((np.arange(n) >> b) & 1) << (bits - 1 - b)
    x = x[..., rev].astype(np.complex128)
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = x.reshape(x.shape[:-1] + (n // m, 2, half))
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * tw
        x = np.concatenate([even + odd, even - odd], axis=-1).reshape(x.shape)
        m *= 2
    return x


def _fft_bluestein(x):
    """Chirp-z transform for arbitrary lengths via power-of-two FFTs."""
    n = x.shape[-1]
    k = np.arange(n)
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    m = 1 << (2 * n - 1).bit_length()
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:])[::-1]
    conv = _ifft1(_fft_radix2(a) * _fft_radix2(b))
    return conv[..., :n] * chirp


def _fft1(x):
    n = x.shape[-1]
    if n == 1:
        return x.astype(np.complex128)
    return _fft_radix2(x) if _is_pow2(n) else _fft_bluestein(x)


def _ifft1(x):
    return np.conj(_fft1(np.conj(x))) / x.shape[-1]


def fft2(a):
    """Unnormalized 2-D DFT of a real or complex array (no centering)."""
    a = np.asarray(a, dtype=np.complex128)
    return _fft1(_fft1(a).swapaxes(-1, -2)).swapaxes(-1, -2)


def ifft2(a):
    a = np.asarray(a, dtype=np.complex128)
    return _ifft1(_ifft1(a).swapaxes(-1, -2)).swapaxes(-1, -2)


def dft2_reference(a):
    """Direct O(N^2) DFT, the oracle for ``fft2``."""
    a = np.asarray(a, dtype=np.complex128)
    h, w = a.shape
    fy = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fx = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return fy @ a @ fx


@dataclass
class FreqImage:
    """DC-centered spectrum: the DC bin sits at ``(height // 2, width // 2)``."""

    coeffs: np.ndarray

    @property
    def height(self):
        return self.coeffs.shape[0]

    @property
    def width(self):
        return self.coeffs.shape[1]

    @property
    def dc(self):
        return self.coeffs[self.height // 2, self.width // 2]


def fft2_forward(img):
    spec = fft2(np.asarray(img, dtype=np.float64))
    return FreqImage(np.roll(spec, (spec.shape[0] // 2, spec.shape[1] // 2), axis=(0, 1)))


def fft2_inverse_real(f):
    """Inverse transform before quantization (real part)."""
    c = f.coeffs
    spec = np.roll(c, (-(c.shape[0] // 2), -(c.shape[1] // 2)), axis=(0, 1))
    return ifft2(spec).real


def fft2_inverse(f):
    return np.clip(np.rint(fft2_inverse_real(f)), 0, 255).astype(np.uint8)


def butterworth_gain(distance, cutoff_d0, order_n):
    if cutoff_d0 <= 0:
        raise ParameterError(f"Butterworth cutoff must be positive, got {cutoff_d0}")
    if order_n < 1:
        raise ParameterError(f"Butterworth order must be >= 1, got {order_n}")
    d = np.asarray(distance, dtype=np.float64)
    return 1.0 / (1.0 + (d / cutoff_d0) ** (2 * order_n))


def butterworth_lowpass(f, cutoff_d0, order_n):
    h, w = f.height, f.width
    v, u = np.meshgrid(np.arange(w) - w // 2, np.arange(h) - h // 2)
    gain = butterworth_gain(np.hypot(u, v), cutoff_d0, order_n)
    return FreqImage(f.coeffs * gain)


# --------------------------------------------------------------------------
# morphology and binarization
# --------------------------------------------------------------------------

def disk(radius):
    """Offsets ``(dy, dx)`` with ``dy^2 + dx^2 <= radius^2``."""
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def _morph(img, radius, reduce):
    h, w = img.shape
    r = int(radius)
    padded = np.pad(img, r, mode="edge")
    out = None
    for dy, dx in disk(r):
        shifted = padded[r + dy:r + dy + h, r + dx:r + dx + w]
        out = shifted.copy() if out is None else reduce(out, shifted)
    return out


def erode(img, radius):
    return _morph(np.asarray(img), radius, np.minimum)


def dilate(img, radius):
    return _morph(np.asarray(img), radius, np.maximum)


def morph_open_close(img, radius=1):
    """Opening (erode, dilate) followed by closing (dilate, erode) with a
    discrete disk. Works on binary masks and grayscale images alike."""
    if radius < 1:
        raise ParameterError(f"structuring-element radius must be >= 1, got {radius}")
    opened = dilate(erode(img, radius), radius)
    return erode(dilate(opened, radius), radius)


def otsu_threshold(img):
    """Threshold maximizing between-class variance; the lowest wins ties.

    Class 0 holds intensities ``<= t``. Only thresholds that leave both
    classes nonempty compete; with none (constant image) 255 is returned.
    Scores are compared exactly in integer arithmetic:
    ``w0*w1*(mu0-mu1)^2 = (N*S0 - T*w0)^2 / (w0*w1)``.
    """
    img = as_gray(img)
    hist = np.bincount(img.ravel(), minlength=256).tolist()
    n = img.size
    total = sum(i * c for i, c in enumerate(hist))
    best_t, best_num, best_den = 255, -1, 1
    w0 = s0 = 0
    for t in range(255):
        w0 += hist[t]
        s0 += t * hist[t]
        w1 = n - w0
        if w0 == 0 or w1 == 0:
            continue
        num = (n * s0 - total * w0) ** 2
        den = w0 * w1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def binarize_otsu(img):
    img = as_gray(img)
    return (img > otsu_threshold(img)).astype(np.uint8)


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

@dataclass
class PipelineParams:
    median_radius: int = 1
    cutoff_fraction: float = 0.25
    butterworth_order: int = 2
    disk_radius: int = 1
    # lesions are hypoechoic: binarize the negative so the lesion is 1
    dark_lesion: bool = True

    def to_dict(self):
        return asdict(self)


def roi_pipeline(img, params=None, timings=None):
    """Run the full enhancement chain on one ROI.

    Returns ``(enhanced, mask)``: the image right before binarization and the
    lesion mask. When ``timings`` is a dict, per-stage wall times (seconds)
    are stored in it.
    """
    params = params or PipelineParams()
    state = {"img": img}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            state["img"] = fn(state["img"])
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        if timings is not None:
            timings[name] = time.perf_counter() - t0

    stage("median", lambda x: median_filter(as_gray(x), params.median_radius))
    stage("equalize", histogram_equalize)
    stage("fft", fft2_forward)
    d0 = params.cutoff_fraction * min(img.shape[0], img.shape[1]) if np.ndim(img) == 2 else math.nan
    stage("butterworth", lambda f: butterworth_lowpass(f, d0, params.butterworth_order))
    stage("inverse_fft", fft2_inverse)
    stage("open_close", lambda x: morph_open_close(x, params.disk_radius))
    enhanced = state["img"]
    stage("binarize", lambda x: binarize_otsu(255 - x if params.dark_lesion else x))
    return enhanced, state["img"]


# --------------------------------------------------------------------------
# PGM I/O
# --------------------------------------------------------------------------

class PGMError(ValueError):
    pass


def encode_pgm(img, comments=()):
    img = as_gray(img)
    h, w = img.shape
    head = "P5\n" + "".join(f"# {c}\n" for c in comments) + f"{w} {h}\n255\n"
    return head.encode("ascii") + img.tobytes()


def decode_pgm(data):
    data = bytes(data)
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PGMError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise PGMError("unterminated PGM comment")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise PGMError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMError("non-numeric PGM header field") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise PGMError(f"unsupported PGM geometry {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = data[pos:pos + w * h]
    if len(pixels) != w * h:
        raise PGMError(f"expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, img, comments=()):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img, comments))


def read_pgm(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())
