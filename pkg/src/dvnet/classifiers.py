"""Binary classifiers over fixed-length feature vectors and their evaluation.

Labels are 0 (benign) and 1 (malignant). Every trained classifier exposes
``predict_score(X)`` returning a score in [0, 1] where larger means more
likely malignant.
"""

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .preprocess import ParameterError
from .rng import SplitMix64, derive_seed
from .tensor import ShapeError


class DataError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class UndefinedMetricError(ValueError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray
    seed: int = 0
    split_id: str = ""

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.features.shape[0] != self.labels.shape[0] or self.labels.shape[0] < 1:
            raise DataError(f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


def config_hash(obj):
    """Stable 64-bit hex digest of a JSON-serializable object."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class Standardizer:
    """Per-dimension z-scoring with statistics from the training split."""

    def __init__(self, X):
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.std = np.where(std > 1e-12, std, 1.0)

    def __call__(self, X):
        return (X - self.mean) / self.std


class _Classifier:
    kind = ""

    def _check(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.feature_dim:
            raise ShapeError(f"{self.kind} expects {self.feature_dim} features, got {X.shape[1]}")
        return X


# --------------------------------------------------------------------------
# SVM
# --------------------------------------------------------------------------

def rbf_kernel(A, B, gamma):
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


class SVMClassifier(_Classifier):
    kind = "svm"

    def __init__(self, kernel, gamma, C, scaler, sv_x, sv_coef, b, converged, iterations, feature_dim):
        self.kernel = kernel
        self.gamma = gamma
        self.C = C
        self.scaler = scaler
        self.sv_x = sv_x
        self.sv_coef = sv_coef
        self.b = b
        self.converged = converged
        self.iterations = iterations
        self.feature_dim = feature_dim

    def _k(self, X):
        if self.kernel == "linear":
            return X @ self.sv_x.T
        return rbf_kernel(X, self.sv_x, self.gamma)

    def decision_function(self, X):
        X = self._check(X)
        if self.scaler is not None:
            X = self.scaler(X)
        return self._k(X) @ self.sv_coef + self.b

    def predict_score(self, X):
        f = self.decision_function(X)
        return 0.5 * (1.0 + np.tanh(0.5 * f))  # logistic, overflow-free

    @property
    def warnings(self):
        if self.converged:
            return []
        return [f"SMO hit the iteration cap ({self.iterations}) before reaching KKT tolerance"]


def _smo(K, y, C, tol, max_iter):
    """Dual soft-margin SVM by SMO with second-order working-set selection.

    Minimizes ``0.5 a'Qa - sum(a)`` with ``Q = yy' * K``, ``0 <= a <= C`` and
    ``y'a = 0``. Stops when the maximal KKT violation ``m - M`` is below
    ``tol``. Returns ``(alpha, b, converged, iterations)``.
    """
    n = y.shape[0]
    Q = (y[:, None] * y[None, :]) * K
    diag = np.diag(Q).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)
    tau = 1e-12
    converged = False
    it = 0
    while it < max_iter:
        yG = -y * G
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        if not up.any() or not low.any():
            converged = True
            break
        i = int(np.flatnonzero(up)[np.argmax(yG[up])])
        m = yG[i]
        M = yG[low].min()
        if m - M < tol:
            converged = True
            break
        cand = low & (yG < m)
        bgap = m - yG[cand]
        a = diag[i] + diag[cand] - 2.0 * y[i] * y[cand] * Q[i, cand]
        a = np.where(a > 0, a, tau)
        j = int(np.flatnonzero(cand)[np.argmin(-(bgap * bgap) / a)])
        it += 1

        Qi, Qj = Q[i], Q[j]
        old_ai, old_aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = max(diag[i] + diag[j] + 2.0 * Qi[j], tau)
            delta = (-G[i] - G[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            elif alpha[j] > C:
                alpha[j] = C
                alpha[i] = C + diff
        else:
            quad = max(diag[i] + diag[j] - 2.0 * Qi[j], tau)
            delta = (G[i] - G[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = total - C
            elif alpha[j] < 0:
                alpha[j] = 0.0
                alpha[i] = total
            if total > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = total - C
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = total
        G += Qi * (alpha[i] - old_ai) + Qj * (alpha[j] - old_aj)

    # bias: average over free vectors, else midpoint of the feasible interval
    yG = -y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        b = float(yG[free].mean())
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        hi = yG[up].max() if up.any() else 0.0
        lo = yG[low].min() if low.any() else 0.0
        b = float((hi + lo) / 2.0)
    return alpha, b, converged, it


def train_svm(data, kernel="rbf", C=1.0, gamma=None, tol=1e-3, max_iter=100_000, standardize=True):
    """Soft-margin SVM. ``gamma`` defaults to ``1 / feature_dim`` for rbf.

    Scores are ``logistic(f(x))`` with ``f(x) = sum a_i y_i K(x_i, x) + b``.
    """
    if C <= 0:
        raise ValueError("C must be positive")
    X, labels = data.features, data.labels
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature values")
    if np.unique(labels).size < 2:
        raise TrainingError("SVM training needs both classes")
    if kernel not in ("linear", "rbf"):
        raise ValueError(f"unknown kernel {kernel!r}")
    scaler = Standardizer(X) if standardize else None
    Xs = scaler(X) if scaler else X
    if gamma is None:
        gamma = 1.0 / X.shape[1]
    K = Xs @ Xs.T if kernel == "linear" else rbf_kernel(Xs, Xs, gamma)
    y = np.where(labels == 1, 1.0, -1.0)
    alpha, b, converged, iterations = _smo(K, y, C, tol, max_iter)
    if not converged:
        warnings.warn(f"SMO stopped after {iterations} iterations without reaching tol={tol}",
                      ConvergenceWarning, stacklevel=2)
    sv = alpha > 0
    return SVMClassifier(kernel, gamma, C, scaler, Xs[sv].copy(), alpha[sv] * y[sv], b,
                         converged, iterations, X.shape[1])


# --------------------------------------------------------------------------
# random forest
# --------------------------------------------------------------------------

class _Tree:
    """Flat-array CART tree; leaves store the class-1 vote (0 or 1)."""

    def __init__(self):
        self.feature, self.threshold, self.left, self.right, self.vote = [], [], [], [], []

    def _node(self):
        for arr in (self.feature, self.threshold, self.left, self.right, self.vote):
            arr.append(-1 if arr is not self.threshold else 0.0)
        return len(self.feature) - 1

    def freeze(self):
        self.feature = np.array(self.feature, dtype=np.int64)
        self.threshold = np.array(self.threshold)
        self.left = np.array(self.left, dtype=np.int64)
        self.right = np.array(self.right, dtype=np.int64)
        self.vote = np.array(self.vote, dtype=np.float64)

    def predict(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            internal = self.feature[node] >= 0
            if not internal.any():
                return self.vote[node]
            f = self.feature[node[internal]]
            go_left = X[rows[internal], f] <= self.threshold[node[internal]]
            node[internal] = np.where(go_left, self.left[node[internal]], self.right[node[internal]])


def _best_split(X, y, features):
    """Lowest weighted Gini over candidate features; ``None`` if no split."""
    n = y.shape[0]
    best = None
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        n_left = np.arange(1, n)
        pos_left = np.cumsum(ys)[:-1]
        pos_total = ys.sum()
        n_right = n - n_left
        pos_right = pos_total - pos_left
        p_l = pos_left / n_left
        p_r = pos_right / n_right
        gini = (n_left * 2 * p_l * (1 - p_l) + n_right * 2 * p_r * (1 - p_r)) / n
        gini = np.where(valid, gini, np.inf)
        k = int(np.argmin(gini))
        if best is None or gini[k] < best[0]:
            best = (gini[k], f, 0.5 * (xs[k] + xs[k + 1]))
    return best


def _grow(tree, X, y, depth, max_depth, mtry, rng):
    node = tree._node()
    pos = y.mean()
    tree.vote[node] = 1.0 if pos > 0.5 else 0.0
    if depth >= max_depth or y.shape[0] < 2 or pos in (0.0, 1.0):
        return node
    features = rng.permutation(X.shape[1])[:mtry]
    split = _best_split(X, y, features)
    if split is None:
        return node
    _, f, thr = split
    mask = X[:, f] <= thr
    tree.feature[node] = int(f)
    tree.threshold[node] = float(thr)
    tree.left[node] = _grow(tree, X[mask], y[mask], depth + 1, max_depth, mtry, rng)
    tree.right[node] = _grow(tree, X[~mask], y[~mask], depth + 1, max_depth, mtry, rng)
    return node


class RandomForestClassifier(_Classifier):
    kind = "random_forest"

    def __init__(self, trees, feature_dim):
        self.trees = trees
        self.feature_dim = feature_dim

    def predict_score(self, X):
        X = self._check(X)
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    warnings = []


def train_random_forest(data, n_trees=100, max_depth=8, seed=0):
    """Bootstrap CART forest with Gini splits on ``floor(sqrt(d))`` features.

    Tree ``i`` draws from ``SplitMix64(base XOR i)`` where ``base`` is the
    first output of ``SplitMix64(seed)``; hashing the master first keeps
    neighbouring seeds from sharing trees. The score is the fraction of trees
    voting class 1.
    """
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    X, y = data.features, data.labels.astype(np.float64)
    n, d = X.shape
    if n == 0:
        raise DataError("empty training set")
    mtry = max(1, int(math.isqrt(d)))
    base = int(SplitMix64(seed).next_u64(1)[0])
    trees = []
    for i in range(n_trees):
        rng = SplitMix64(derive_seed(base, i))
        boot = rng.integers(0, n, n)
        tree = _Tree()
        _grow(tree, X[boot], y[boot], 0, max_depth, mtry, rng)
        tree.freeze()
        trees.append(tree)
    return RandomForestClassifier(trees, d)


# --------------------------------------------------------------------------
# kNN
# --------------------------------------------------------------------------

class KNNClassifier(_Classifier):
    kind = "knn"

    def __init__(self, X, y, k, scaler):
        self.X = X
        self.y = y
        self.k = k
        self.scaler = scaler
        self.feature_dim = X.shape[1]

    warnings = []

    def neighbors(self, X):
        X = self._check(X)
        if self.scaler is not None:
            X = self.scaler(X)
        d = ((X[:, None, :] - self.X[None, :, :]) ** 2).sum(axis=2)
        # stable sort keeps the lower training index first on distance ties
        return np.argsort(d, axis=1, kind="stable")[:, :self.k]

    def predict_score(self, X):
        return self.y[self.neighbors(X)].mean(axis=1)


def train_knn(data, k=5, standardize=True):
    n = len(data)
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"k must be a positive odd integer, got {k}")
    if k > n:
        raise ParameterError(f"k={k} exceeds the {n} training samples")
    scaler = Standardizer(data.features) if standardize else None
    X = scaler(data.features) if scaler else data.features.copy()
    return KNNClassifier(X, data.labels.astype(np.float64), k, scaler)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _midranks(scores):
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    ranks = np.empty(s.shape[0])
    start = 0
    n = s.shape[0]
    while start < n:
        end = start
        while end + 1 < n and s[end + 1] == s[start]:
            end += 1
        ranks[start:end + 1] = (start + end) / 2.0 + 1.0
        start = end + 1
    out = np.empty(n)
    out[order] = ranks
    return out


def compute_auc(scores, labels):
    """ROC AUC by the rank-sum (Mann-Whitney) formulation, ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    r = _midranks(scores)[pos].sum()
    return float((r - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalReport:
    auc: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    seed: int = 0
    config_hash: str = ""
    warnings: list = field(default_factory=list)

    def to_dict(self):
        out = {"auc": self.auc, "accuracy": self.accuracy, "tp": self.tp, "fp": self.fp,
               "tn": self.tn, "fn": self.fn, "seed": self.seed, "config_hash": self.config_hash}
        if self.warnings:
            out["warnings"] = list(self.warnings)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def report_from_scores(scores, labels, threshold=0.5, seed=0, config_hash="", warnings=()):
    """AUC from raw scores; confusion counts from ``score >= threshold``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    tn = int(np.sum(~pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    return EvalReport(compute_auc(scores, labels), (tp + tn) / labels.shape[0],
                      tp, fp, tn, fn, seed, config_hash, list(warnings))


def evaluate(clf, test, threshold=0.5, seed=None, config_hash=""):
    scores = clf.predict_score(test.features)
    return report_from_scores(scores, test.labels, threshold,
                              test.seed if seed is None else seed, config_hash,
                              getattr(clf, "warnings", []))


TRAINERS = {
    "svm": train_svm,
    "random_forest": train_random_forest,
    "knn": train_knn,
}


def train_classifier(kind, data, seed=0, **kwargs):
    if kind == "random_forest":
        return train_random_forest(data, seed=seed, **kwargs)
    return TRAINERS[kind](data, **kwargs)
