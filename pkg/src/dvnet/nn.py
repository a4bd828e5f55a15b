"""Trainable building blocks: activations, pooling, dense layers, the
softmax cross-entropy loss, SGD, and the multi-branch ``Network``.

All layers operate on batches. A ``Network`` has one or more convolutional
branches (one per input view), each ending in ``flatten``; the branch outputs
are concatenated and fed through a dense trunk.
"""

import re
import struct
from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64, derive_seed
from .tensor import ShapeError, as_tensor, conv2d_batch

ACTIVATIONS = ("sigmoid", "tanh", "relu")


class ArchitectureError(ValueError):
    """Adjacent layers have incompatible shapes."""


class CheckpointError(ValueError):
    """Malformed checkpoint bytes."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint parameters disagree with its embedded architecture."""


# --------------------------------------------------------------------------
# functional forms
# --------------------------------------------------------------------------

def sigmoid(x):
    # split by sign so exp never overflows
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def apply_activation(kind, x):
    x = as_tensor(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind, x, upstream):
    """Gradient of ``apply_activation(kind, x)`` times ``upstream``.

    The ReLU derivative at exactly zero is taken as 0.
    """
    x = as_tensor(x)
    upstream = as_tensor(upstream)
    if x.shape != upstream.shape:
        raise ShapeError(f"activation_backward: shape mismatch {list(x.shape)} vs {list(upstream.shape)}")
    if kind == "sigmoid":
        s = sigmoid(x)
        return upstream * s * (1.0 - s)
    if kind == "tanh":
        t = np.tanh(x)
        return upstream * (1.0 - t * t)
    if kind == "relu":
        return upstream * (x > 0)
    raise ValueError(f"unknown activation {kind!r}")


def _pool_corners(x):
    return (x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2],
            x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])


def maxpool_batch(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even extents, got {h}x{w}")
    a, b, cc, d = _pool_corners(x)
    out = np.maximum(np.maximum(a, b), np.maximum(cc, d))
    # first winner in row-major window order
    idx = np.where(a == out, 0, np.where(b == out, 1, np.where(cc == out, 2, 3))).astype(np.int8)
    return out, idx


def maxpool_backward_batch(idx, upstream, in_shape):
    grad = np.zeros(in_shape)
    for k, corner in enumerate(_pool_corners(grad)):
        corner[...] = np.where(idx == k, upstream, 0.0)
    return grad


def maxpool2x2(x):
    """2x2 max pooling with stride 2 on ``[C, H, W]``.

    Returns the pooled tensor and the per-window argmax (0..3, row-major
    within the window) used to route gradients back.
    """
    x = as_tensor(x)
    out, idx = maxpool_batch(x[None])
    return out[0], idx[0]


def maxpool2x2_backward(mask, upstream, in_shape):
    c, h, w = in_shape
    return maxpool_backward_batch(mask[None], as_tensor(upstream)[None], (1, c, h, w))[0]


def dense_forward(x, W, b):
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape != (W.shape[1],) or b.shape != (W.shape[0],):
        raise ShapeError(f"dense_forward: x {list(x.shape)}, W {list(W.shape)}, b {list(b.shape)}")
    return W @ x + b


def softmax(logits):
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target_class):
    """Loss ``-log softmax(logits)[target]`` and its gradient ``q - onehot``."""
    logits = as_tensor(logits)
    if not 0 <= target_class < logits.shape[-1]:
        raise IndexError(f"target class {target_class} outside [0, {logits.shape[-1]})")
    z = logits - logits.max()
    log_q = z - np.log(np.exp(z).sum())
    q = np.exp(log_q)
    grad = q.copy()
    grad[target_class] -= 1.0
    return float(-log_q[target_class]), grad


def softmax_cross_entropy_batch(logits, targets):
    """Mean loss over the batch; gradient already divided by batch size."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_q = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -log_q[rows, targets].mean()
    grad = np.exp(log_q)
    grad[rows, targets] -= 1.0
    return float(loss), grad / n


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 16
    epochs: int = 8
    seed: int = 0
    l2_weight: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be nonnegative")


def sgd_step(params, grads, config):
    """In-place ``p <- p - lr * (g + l2 * p)`` in list order; returns ``params``."""
    if len(params) != len(grads):
        raise ShapeError(f"sgd_step: {len(params)} params but {len(grads)} grads")
    lr, l2 = config.learning_rate, config.l2_weight
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"sgd_step: shape mismatch {list(p.shape)} vs {list(g.shape)}")
        if l2:
            p -= lr * (g + l2 * p)
        else:
            p -= lr * g
    return params


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

class Layer:
    kind = ""
    needs_input_grad = True

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None
        self._in_shape = None

    def _require_cache(self, grad_shape):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called before forward")
        if grad_shape != self._out_shape:
            raise ShapeError(f"{self.kind}: upstream {list(grad_shape)} does not match forward output {list(self._out_shape)}")

    def _remember(self, x_shape, cache, out):
        self._in_shape = x_shape
        self._cache = cache
        self._out_shape = out.shape
        return out


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel, padding=0):
        super().__init__()
        self.kernel = kernel
        self.padding = padding
        self.params = {"W": np.zeros((out_channels, in_channels, kernel, kernel)),
                       "b": np.zeros(out_channels)}

    def output_shape(self, s):
        c, h, w = s
        o, ci, k, _ = self.params["W"].shape
        if c != ci:
            raise ShapeError(f"expects {ci} channels, got {c}")
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if k > hp or k > wp:
            raise ShapeError(f"kernel {k}x{k} larger than input {hp}x{wp}")
        return (o, hp - k + 1, wp - k + 1)

    def fans(self):
        o, c, k, _ = self.params["W"].shape
        return c * k * k, o * k * k

    def forward(self, x):
        p = self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        out, cols = conv2d_batch(x, self.params["W"], self.params["b"])
        return self._remember(x.shape, cols, out)

    def backward(self, grad):
        self._require_cache(grad.shape)
        W = self.params["W"]
        o, c, k, _ = W.shape
        n, _, ho, wo = grad.shape
        g = grad.reshape(n, o, ho * wo)
        dW = np.zeros((o, c * k * k))
        for i in range(n):
            dW += g[i] @ self._cache[i].T
        self.grads = {"W": dW.reshape(W.shape), "b": g.sum(axis=(0, 2))}
        if not self.needs_input_grad:
            return None
        dcols = np.matmul(W.reshape(o, -1).T, g).reshape(n, c, k, k, ho, wo)
        dx = np.zeros(self._in_shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, i, j]
        p = self.padding
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return dx


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn):
        super().__init__()
        if fn not in ACTIVATIONS:
            raise ValueError(f"unknown activation {fn!r}")
        self.fn = fn

    def output_shape(self, s):
        return s

    def forward(self, x):
        return self._remember(x.shape, x, apply_activation(self.fn, x))

    def backward(self, grad):
        self._require_cache(grad.shape)
        return activation_backward(self.fn, self._cache, grad)


class MaxPool2x2(Layer):
    kind = "maxpool"

    def output_shape(self, s):
        c, h, w = s
        if h % 2 or w % 2:
            raise ShapeError(f"2x2 pooling needs even extents, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x):
        out, idx = maxpool_batch(x)
        return self._remember(x.shape, idx, out)

    def backward(self, grad):
        self._require_cache(grad.shape)
        return maxpool_backward_batch(self._cache, grad, self._in_shape)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, s):
        return (int(np.prod(s)),)

    def forward(self, x):
        return self._remember(x.shape, True, x.reshape(x.shape[0], -1))

    def backward(self, grad):
        self._require_cache(grad.shape)
        return grad.reshape(self._in_shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out):
        super().__init__()
        self.params = {"W": np.zeros((n_out, n_in)), "b": np.zeros(n_out)}

    def output_shape(self, s):
        n_out, n_in = self.params["W"].shape
        if s != (n_in,):
            raise ShapeError(f"expects a flat input of width {n_in}, got {list(s)}")
        return (n_out,)

    def fans(self):
        n_out, n_in = self.params["W"].shape
        return n_in, n_out

    def forward(self, x):
        return self._remember(x.shape, x, x @ self.params["W"].T + self.params["b"])

    def backward(self, grad):
        self._require_cache(grad.shape)
        self.grads = {"W": grad.T @ self._cache, "b": grad.sum(axis=0)}
        return grad @ self.params["W"]


class Concat(Layer):
    """Join per-branch flat features along the feature axis."""

    kind = "concat-point"

    def __init__(self, widths):
        super().__init__()
        self.widths = list(widths)

    def forward(self, parts):
        if [p.shape[1] for p in parts] != self.widths:
            raise ShapeError(f"concat expects widths {self.widths}")
        return self._remember(None, True, np.concatenate(parts, axis=1))

    def backward(self, grad):
        self._require_cache(grad.shape)
        cuts = np.cumsum(self.widths)[:-1]
        return np.split(grad, cuts, axis=1)


# --------------------------------------------------------------------------
# architecture spec
# --------------------------------------------------------------------------

_TOKEN = re.compile(r"^(?:conv(\d+)k(\d+)p(\d+)|dense(\d+)|relu|sigmoid|tanh|pool|flatten)$")


@dataclass(frozen=True)
class ArchitectureSpec:
    """Layer tokens per input branch plus the dense trunk after concatenation.

    Tokens: ``conv<out>k<kernel>p<pad>``, ``relu``/``sigmoid``/``tanh``,
    ``pool`` (2x2 max), ``flatten``, ``dense<width>``.
    """

    name: str
    input_shape: tuple
    branches: tuple
    trunk: tuple

    def to_text(self):
        c, h, w = self.input_shape
        parts = [self.name, f"in={c}x{h}x{w}"]
        parts += ["b=" + ",".join(b) for b in self.branches]
        parts.append("t=" + ",".join(self.trunk))
        return " ".join(parts)

    @classmethod
    def from_text(cls, text):
        fields = text.split(" ")
        if len(fields) < 4 or not fields[1].startswith("in="):
            raise ValueError(f"malformed architecture text {text!r}")
        shape = tuple(int(v) for v in fields[1][3:].split("x"))
        branches, trunk = [], None
        for f in fields[2:]:
            if f.startswith("b="):
                branches.append(tuple(f[2:].split(",")))
            elif f.startswith("t="):
                trunk = tuple(f[2:].split(","))
            else:
                raise ValueError(f"unexpected field {f!r}")
        if len(shape) != 3 or trunk is None or not branches:
            raise ValueError(f"malformed architecture text {text!r}")
        for tok in [t for b in branches for t in b] + list(trunk):
            if not _TOKEN.match(tok):
                raise ValueError(f"unknown layer token {tok!r}")
        return cls(fields[0], shape, tuple(branches), trunk)


def _make_layer(token, in_shape):
    m = _TOKEN.match(token)
    if not m:
        raise ArchitectureError(f"unknown layer token {token!r}")
    if m.group(1):
        return Conv2D(in_shape[0], int(m.group(1)), int(m.group(2)), int(m.group(3)))
    if m.group(4):
        if len(in_shape) != 1:
            raise ShapeError(f"dense needs a flat input, got {list(in_shape)}")
        return Dense(in_shape[0], int(m.group(4)))
    if token == "pool":
        return MaxPool2x2()
    if token == "flatten":
        return Flatten()
    return Activation(token)


def _build_stack(tokens, in_shape, where):
    layers, shape = [], tuple(in_shape)
    for i, tok in enumerate(tokens):
        try:
            layer = _make_layer(tok, shape)
            new_shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ArchitectureError(
                f"{where} layer {i} ({tok}) cannot follow {list(shape)}: {exc}") from None
        layers.append(layer)
        shape = new_shape
    return layers, shape


class Network:
    """Multi-branch feed-forward network built from an ``ArchitectureSpec``."""

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.rng_seed = int(seed)
        self.branches = []
        widths = []
        for bi, tokens in enumerate(spec.branches):
            layers, shape = _build_stack(tokens, spec.input_shape, f"branch {bi}")
            if len(shape) != 1:
                raise ArchitectureError(f"branch {bi} must end flat, ends at {list(shape)}")
            # raw images never need a gradient
            layers[0].needs_input_grad = False
            self.branches.append(layers)
            widths.append(shape[0])
        self.concat = Concat(widths)
        self.trunk, out_shape = _build_stack(spec.trunk, (sum(widths),), "trunk")
        if not isinstance(self.trunk[-1], Dense):
            raise ArchitectureError("trunk must end with a dense classification layer")
        self.branch_widths = widths
        self.n_classes = out_shape[0]
        self._init_parameters()

    def _init_parameters(self):
        rng = SplitMix64(self.rng_seed)
        for layer in self.layers():
            if "W" in layer.params:
                fan_in, fan_out = layer.fans()
                lim = np.sqrt(6.0 / (fan_in + fan_out))
                W = layer.params["W"]
                W[...] = rng.uniform(W.size, -lim, lim).reshape(W.shape)
                layer.params["b"][...] = 0.0

    def layers(self):
        for branch in self.branches:
            yield from branch
        yield from self.trunk

    def parameters(self):
        return [p for layer in self.layers() for p in layer.params.values()]

    def named_parameters(self):
        out = []
        for li, layer in enumerate(self.layers()):
            for name, p in layer.params.items():
                out.append((f"{li}.{layer.kind}.{name}", p))
        return out

    def gradients(self):
        return [layer.grads[name] for layer in self.layers() for name in layer.params]

    @property
    def penultimate_width(self):
        last = self.trunk[-1]
        return last.params["W"].shape[1]

    def _check_views(self, views):
        if len(views) != len(self.branches):
            raise ShapeError(f"network has {len(self.branches)} branches, got {len(views)} inputs")
        for v in views:
            if v.ndim != 4 or v.shape[1:] != tuple(self.spec.input_shape):
                raise ShapeError(f"input {list(v.shape)} does not match [N, {', '.join(map(str, self.spec.input_shape))}]")

    def forward(self, views, penultimate=False):
        """Logits ``[N, n_classes]`` for a list of per-branch batches.

        With ``penultimate=True`` return the input of the final dense layer.
        """
        self._check_views(views)
        flats = []
        for branch, x in zip(self.branches, views):
            for layer in branch:
                x = layer.forward(x)
            flats.append(x)
        x = self.concat.forward(flats)
        stop = len(self.trunk) - 1 if penultimate else len(self.trunk)
        for layer in self.trunk[:stop]:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.trunk):
            grad = layer.backward(grad)
        parts = self.concat.backward(grad)
        out = []
        for branch, g in zip(self.branches, parts):
            for layer in reversed(branch):
                if g is None:
                    break
                g = layer.backward(g)
            out.append(g)
        return out


def init_parameters(network_spec, seed):
    """Build a network with Glorot-uniform weights and zero biases."""
    return Network(network_spec, seed)


# --------------------------------------------------------------------------
# training and inference
# --------------------------------------------------------------------------

def train_network(net, views, labels, config, on_epoch=None):
    """Mini-batch SGD on softmax cross-entropy; returns per-epoch mean loss.

    ``views`` is a list of ``[N, C, H, W]`` arrays (one per branch). The batch
    order for epoch ``e`` comes from ``SplitMix64(seed XOR e)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    history = []
    for epoch in range(config.epochs):
        order = SplitMix64(derive_seed(config.seed, epoch)).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            logits = net.forward([v[idx] for v in views])
            loss, grad = softmax_cross_entropy_batch(logits, labels[idx])
            net.backward(grad)
            sgd_step(net.parameters(), net.gradients(), config)
            total += loss * idx.size
        history.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return history


def predict_logits(net, views, batch=64, penultimate=False):
    n = views[0].shape[0]
    outs = [net.forward([v[s:s + batch] for v in views], penultimate=penultimate)
            for s in range(0, n, batch)]
    return np.concatenate(outs, axis=0)


def predict_proba(net, views, batch=64):
    """Probability of class 1 per sample."""
    return softmax(predict_logits(net, views, batch))[:, 1]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"DVNET1\n"


def serialize_network(net):
    """Checkpoint bytes: magic line, architecture line, float64 LE params,
    then a uint64 LE footer holding the number of preceding bytes."""
    head = MAGIC + f"{net.spec.to_text()}|seed={net.rng_seed}\n".encode("ascii")
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.parameters())
    payload = head + body
    return payload + struct.pack("<Q", len(payload))


def deserialize_network(data):
    data = bytes(data)
    if not data.startswith(MAGIC):
        raise CheckpointError("missing DVNET1 header", 0)
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError("truncated checkpoint", len(data))
    (declared,) = struct.unpack("<Q", data[-8:])
    if declared != len(data) - 8:
        raise CheckpointError(f"length footer says {declared} bytes, found {len(data) - 8}", len(data) - 8)
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError("unterminated architecture line", len(MAGIC))
    try:
        line = data[len(MAGIC):end].decode("ascii")
        arch, seed = line.rsplit("|seed=", 1)
        spec = ArchitectureSpec.from_text(arch)
        net = Network(spec, int(seed))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"bad architecture line: {exc}", len(MAGIC)) from None
    params = net.parameters()
    expected = sum(p.size for p in params) * 8
    body = data[end + 1:-8]
    if len(body) != expected:
        raise CheckpointIntegrityError(
            f"architecture needs {expected} parameter bytes, checkpoint has {len(body)}", end + 1)
    flat = np.frombuffer(body, dtype="<f8")
    pos = 0
    for p in params:
        p[...] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    return net
