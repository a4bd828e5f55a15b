"""Finite-difference sweeps over every differentiable layer type."""

import numpy as np

from .nn import Activation, Conv2D, Dense, MaxPool2x2, softmax_cross_entropy
from .rng import SplitMix64
from .tensor import finite_difference_check

KINK = 1e-4


def _pool_ties(x):
    """Mask of inputs whose 2x2 window has its top two values within KINK."""
    n, c, h, w = x.shape
    win = (x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4))
    s = np.sort(win, axis=-1)
    tied = (s[..., 3] - s[..., 2]) < KINK
    return np.repeat(np.repeat(tied, 2, axis=2), 2, axis=3)


def _layer_report(layer, x, probes, eps, tol, seed, exclude=None):
    rng = SplitMix64(seed)
    out = layer.forward(x)
    upstream = rng.normal(out.size).reshape(out.shape)
    grad_x = layer.backward(upstream)

    def f(z):
        return float(np.sum(upstream * layer.forward(z)))

    reports = {"input": finite_difference_check(f, x, grad_x, eps, tol, probes, seed, exclude)}
    for name, p in layer.params.items():
        layer.forward(x)
        layer.backward(upstream)
        analytic = layer.grads[name].copy()
        original = p.copy()

        def fp(value, p=p):
            p[...] = value
            return float(np.sum(upstream * layer.forward(x)))

        reports[name] = finite_difference_check(fp, original, analytic, eps, tol, probes, seed + 1)
        p[...] = original
    return reports


def check_all_layers(probes=50, eps=1e-5, tol=1e-4, seed=0):
    """Run finite-difference checks for conv, dense, the three activations,
    max pooling and softmax cross-entropy.

    Returns ``{layer_name: {target: GradCheckReport}}``. Probes within 1e-4 of
    a ReLU kink or a pooling tie are excluded.
    """
    rng = SplitMix64(seed)
    results = {}

    conv = Conv2D(3, 4, 3, padding=1)
    conv.params["W"][...] = rng.normal(conv.params["W"].size).reshape(conv.params["W"].shape) * 0.3
    conv.params["b"][...] = rng.normal(4) * 0.1
    x = rng.normal(2 * 3 * 8 * 8).reshape(2, 3, 8, 8)
    results["conv"] = _layer_report(conv, x, probes, eps, tol, seed + 10)

    dense = Dense(12, 5)
    dense.params["W"][...] = rng.normal(60).reshape(5, 12) * 0.3
    dense.params["b"][...] = rng.normal(5) * 0.1
    results["dense"] = _layer_report(dense, rng.normal(36).reshape(3, 12), probes, eps, tol, seed + 20)

    for i, kind in enumerate(("sigmoid", "tanh", "relu")):
        x = rng.normal(4 * 30).reshape(4, 30) * 2.0
        exclude = np.abs(x) < KINK if kind == "relu" else None
        results[kind] = _layer_report(Activation(kind), x, probes, eps, tol, seed + 30 + i, exclude)

    x = rng.normal(2 * 3 * 8 * 8).reshape(2, 3, 8, 8)
    results["maxpool"] = _layer_report(MaxPool2x2(), x, probes, eps, tol, seed + 40, _pool_ties(x))

    worst = None
    for k in range(probes):
        logits = rng.normal(5) * 3.0
        target = int(rng.integers(0, 5)[0])
        _, grad = softmax_cross_entropy(logits, target)
        rep = finite_difference_check(lambda z: softmax_cross_entropy(z, target)[0], logits, grad, eps, tol)
        if worst is None or rep.max_rel_diff > worst.max_rel_diff:
            worst = rep
    worst.probe_count = probes * 5
    results["softmax_cross_entropy"] = {"logits": worst}
    return results
