"""Dense float64 tensor primitives and numeric checking utilities.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The functions
here add the shape discipline the rest of the package relies on: no
broadcasting except against a scalar, explicit shape errors, and a fixed
summation order for the reference matrix product.
"""

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def as_tensor(x):
    return np.asarray(x, dtype=np.float64)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def tensor_elementwise(op_kind, a, b):
    """Elementwise ``add``, ``sub``, ``mul`` or ``scale``.

    ``b`` must match ``a``'s shape exactly, or be a scalar. ``scale`` only
    accepts a scalar.
    """
    a = as_tensor(a)
    if np.isscalar(b) or np.ndim(b) == 0:
        b = float(b)
    else:
        if op_kind == "scale":
            raise ShapeError("scale expects a scalar factor")
        b = as_tensor(b)
        _check_same_shape(a, b, op_kind)
    if op_kind == "add":
        return a + b
    if op_kind == "sub":
        return a - b
    if op_kind in ("mul", "scale"):
        return a * b
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def matmul(a, b):
    """Matrix product with a fixed k-ascending accumulation order.

    Each output entry is accumulated as ``((a0*b0 + a1*b1) + a2*b2) + ...``,
    exactly like a naive triple loop, so results are bit-reproducible and
    independent of the BLAS build. Layers use BLAS directly for throughput.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ {list(a.shape)} x {list(b.shape)}")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for p in range(k):
        out += a[:, p:p + 1] * b[p:p + 1, :]
    return out


def _patches(x, kh, kw):
    """View of every kh x kw window: [N, C, Ho, Wo, kh, kw]."""
    return np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))


def conv2d_batch(x, kernels, bias):
    """Valid cross-correlation over a batch ``[N, C, H, W]``.

    Returns ``(out, cols)`` where ``cols`` is the per-sample im2col stack
    ``[N, C*kh*kw, Ho*Wo]`` reused by the backward pass.
    """
    n, c, h, w = x.shape
    o, ck, kh, kw = kernels.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernels expect {ck}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    ho, wo = h - kh + 1, w - kw + 1
    cols = _patches(x, kh, kw).transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(kernels.reshape(o, -1), cols) + bias[:, None]
    return out.reshape(n, o, ho, wo), cols


def conv2d_valid(input, kernels, bias):
    """Single-image valid convolution (cross-correlation, no kernel flip).

    ``input`` is ``[C_in, H, W]``, ``kernels`` is ``[C_out, C_in, kh, kw]`` and
    ``bias`` is ``[C_out]``; the result is ``[C_out, H-kh+1, W-kw+1]``.
    """
    x = as_tensor(input)
    k = as_tensor(kernels)
    b = as_tensor(bias)
    if x.ndim != 3 or k.ndim != 4:
        raise ShapeError(f"conv2d_valid expects [C,H,W] and [O,C,kh,kw], got {list(x.shape)}, {list(k.shape)}")
    if b.shape != (k.shape[0],):
        raise ShapeError(f"conv2d_valid: bias shape {list(b.shape)} does not match {k.shape[0]} outputs")
    out, _ = conv2d_batch(x[None], k, b)
    return out[0]


def conv2d_reference(input, kernels, bias):
    """Naive quadruple-loop convolution oracle used by the tests."""
    x = as_tensor(input)
    k = as_tensor(kernels)
    c_out, c_in, kh, kw = k.shape
    _, h, w = x.shape
    out = np.empty((c_out, h - kh + 1, w - kw + 1))
    for o in range(c_out):
        for y in range(h - kh + 1):
            for xx in range(w - kw + 1):
                acc = float(bias[o])
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            acc += x[c, y + i, xx + j] * k[o, c, i, j]
                out[o, y, xx] = acc
    return out


@dataclass
class GradCheckReport:
    max_abs_diff: float
    max_rel_diff: float
    passed: bool
    probe_count: int


class GradCheckError(ArithmeticError):
    """The function under test produced a non-finite value."""


def finite_difference_check(f, x, analytic_grad, epsilon=1e-5, tolerance=1e-6,
                            probes=None, seed=0, exclude=None):
    """Compare ``analytic_grad`` against central differences of ``f`` at ``x``.

    Parameters
    ----------
    f : callable
        Scalar-valued function of an array shaped like ``x``.
    probes : int, optional
        Check only this many coordinates, drawn without replacement.
        All coordinates are checked when omitted.
    exclude : array of bool, optional
        Coordinates to skip (kinks, pooling ties).

    The relative difference uses ``max(1, |analytic|, |numeric|)`` as the
    denominator, so it degrades to an absolute test for small gradients.
    """
    from .rng import SplitMix64

    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = as_tensor(x).copy()
    g = as_tensor(analytic_grad)
    _check_same_shape(x, g, "finite_difference_check")
    flat = x.reshape(-1)
    candidates = np.arange(flat.size)
    if exclude is not None:
        candidates = candidates[~np.asarray(exclude, dtype=bool).reshape(-1)]
    if probes is not None and probes < candidates.size:
        order = SplitMix64(seed).permutation(candidates.size)
        candidates = np.sort(candidates[order[:probes]])

    def evaluate():
        v = float(f(x))
        if not np.isfinite(v):
            raise GradCheckError(f"f returned non-finite value {v}")
        return v

    evaluate()
    max_abs = 0.0
    max_rel = 0.0
    gflat = g.reshape(-1)
    for i in candidates:
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = evaluate()
        flat[i] = orig - epsilon
        fm = evaluate()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * epsilon)
        diff = abs(numeric - gflat[i])
        max_abs = max(max_abs, diff)
        max_rel = max(max_rel, diff / max(1.0, abs(gflat[i]), abs(numeric)))
    return GradCheckReport(max_abs, max_rel, max_rel <= tolerance, int(candidates.size))
