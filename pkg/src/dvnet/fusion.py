"""Dual-view and feature-level fusion.

* ``build_single_net``: three conv/relu/pool stages (16, 32, 64 maps) and a
  dense head; one view in.
* ``build_two_views_net``: two independent copies of the Single-Net
  convolution stack, concatenated, then dense 512 -> 256 -> 2.
* ``probability_fusion``: mean of the per-view malignancy probabilities.
* ``train_fusion_pipeline``: penultimate features of two differently shaped
  CNNs, concatenated and classified by an SVM.
"""

from dataclasses import dataclass, field

import numpy as np

from .classifiers import LabeledSet, TrainingError, report_from_scores, train_classifier
from .nn import ArchitectureSpec, Network, TrainConfig, predict_logits, predict_proba, train_network
from .preprocess import ParameterError
from .rng import derive_seed

INPUT_SHAPE = (1, 64, 64)

# conv layers use one pixel (two for 5x5) of zero padding so every pooling
# stage sees even extents: 64 -> 32 -> 16 -> 8
SINGLE_NET_CONV = ("conv16k3p1", "relu", "pool",
                   "conv32k3p1", "relu", "pool",
                   "conv64k3p1", "relu", "pool", "flatten")
CNN2_CONV = ("conv16k5p2",) + SINGLE_NET_CONV[1:]

SINGLE_NET = ArchitectureSpec("SingleNet", INPUT_SHAPE, (SINGLE_NET_CONV,), ("dense128", "relu", "dense2"))
CNN1 = ArchitectureSpec("CNN1", INPUT_SHAPE, (SINGLE_NET_CONV,), ("dense128", "relu", "dense2"))
CNN2 = ArchitectureSpec("CNN2", INPUT_SHAPE, (CNN2_CONV,), ("dense256", "relu", "dense2"))
TWO_VIEWS_NET = ArchitectureSpec("TwoViewsNet", INPUT_SHAPE, (SINGLE_NET_CONV, SINGLE_NET_CONV),
                                 ("dense512", "relu", "dense256", "relu", "dense2"))

VIEW_MODELS = ("Single-Net-Coronal", "Single-Net-Transverse", "Probability fusion", "2Views-Net")


def build_single_net(seed=0):
    return Network(SINGLE_NET, seed)


def build_two_views_net(seed=0):
    return Network(TWO_VIEWS_NET, seed)


def build_cnn(which, seed=0):
    return Network({"CNN1": CNN1, "CNN2": CNN2}[which], seed)


def images_to_input(images):
    """uint8 ``[N, H, W]`` -> float ``[N, 1, H, W]`` scaled to [-1, 1]."""
    x = np.asarray(images, dtype=np.float64)
    return (x / 127.5 - 1.0)[:, None, :, :]


def probability_fusion(p_coronal, p_transverse):
    """Arithmetic mean of the two per-view probabilities (arrays allowed)."""
    pc = np.asarray(p_coronal, dtype=np.float64)
    pt = np.asarray(p_transverse, dtype=np.float64)
    for name, p in (("p_coronal", pc), ("p_transverse", pt)):
        if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
            raise ParameterError(f"{name} must lie in [0, 1]")
    out = (pc + pt) / 2.0
    return float(out) if out.ndim == 0 else out


def _sub_config(config, salt):
    return TrainConfig(config.learning_rate, config.batch_size, config.epochs,
                       derive_seed(config.seed, salt), config.l2_weight)


def train_cnn(which, images, labels, config):
    """Train CNN1, CNN2, SingleNet or TwoViewsNet on per-branch image stacks."""
    salt = {"CNN1": 1, "CNN2": 2, "SingleNet": 3, "TwoViewsNet": 4}[which]
    cfg = _sub_config(config, salt)
    if which == "TwoViewsNet":
        net = build_two_views_net(cfg.seed)
    elif which == "SingleNet":
        net = build_single_net(cfg.seed)
    else:
        net = build_cnn(which, cfg.seed)
    views = [images_to_input(v) for v in images]
    train_network(net, views, labels, cfg)
    return net


def penultimate(net, images, batch=64):
    return predict_logits(net, [images_to_input(v) for v in images], batch, penultimate=True)


@dataclass
class FusionModel:
    """Two trained CNNs plus a classifier on their concatenated features."""

    cnn1: Network
    cnn2: Network
    classifier: object
    classifier_kind: str

    def cnn_features(self, images):
        return penultimate(self.cnn1, [images]), penultimate(self.cnn2, [images])

    def fused_features(self, images):
        return np.hstack(self.cnn_features(images))

    def predict_score(self, images):
        return self.classifier.predict_score(self.fused_features(images))


def _check_two_classes(labels):
    labels = np.asarray(labels)
    if labels.size == 0 or np.unique(labels).size < 2:
        raise TrainingError("training set needs both benign and malignant samples")


def train_fusion_pipeline(images, labels, config, classifier="svm", classifier_seed=0):
    """Train CNN1 and CNN2 on one view, then a classifier on fused features.

    ``images`` is a uint8 ``[N, 64, 64]`` stack. The SVM and kNN standardize
    features internally with training-split statistics.
    """
    _check_two_classes(labels)
    cnn1 = train_cnn("CNN1", [images], labels, config)
    cnn2 = train_cnn("CNN2", [images], labels, config)
    fused = np.hstack([penultimate(cnn1, [images]), penultimate(cnn2, [images])])
    clf = train_classifier(classifier, LabeledSet(fused, labels), seed=classifier_seed)
    return FusionModel(cnn1, cnn2, clf, classifier)


@dataclass
class ViewComparison:
    reports: dict
    scores: dict
    nets: dict
    test_indices: np.ndarray
    seed: int
    errors: dict = field(default_factory=dict)

    @property
    def complete(self):
        return not self.errors


def run_view_comparison(ds, train_idx, test_idx, config, config_hash=""):
    """Single-Net per view, their probability fusion, and 2Views-Net, all on
    one split. A failing model is recorded in ``errors``; the rest still run.
    """
    cor, tr, labels = ds.views("coronal"), ds.views("transverse"), ds.labels
    y_train, y_test = labels[train_idx], labels[test_idx]
    reports, scores, nets, errors = {}, {}, {}, {}

    def run(name, fn):
        try:
            scores[name] = fn()
            reports[name] = report_from_scores(scores[name], y_test, seed=config.seed, config_hash=config_hash)
        except Exception as exc:  # record and continue with the other models
            errors[name] = f"{type(exc).__name__}: {exc}"

    def single(view, salt):
        def fit():
            _check_two_classes(y_train)
            cfg = _sub_config(config, salt)
            net = build_single_net(cfg.seed)
            train_network(net, [images_to_input(view[train_idx])], y_train, cfg)
            nets[name_of[salt]] = net
            return predict_proba(net, [images_to_input(view[test_idx])])
        return fit

    name_of = {3: VIEW_MODELS[0], 5: VIEW_MODELS[1]}
    run(VIEW_MODELS[0], single(cor, 3))
    run(VIEW_MODELS[1], single(tr, 5))
    if VIEW_MODELS[0] in scores and VIEW_MODELS[1] in scores:
        run(VIEW_MODELS[2], lambda: probability_fusion(scores[VIEW_MODELS[0]], scores[VIEW_MODELS[1]]))
    else:
        errors[VIEW_MODELS[2]] = "needs both single-view models"

    def two_views():
        _check_two_classes(y_train)
        cfg = _sub_config(config, 4)
        net = build_two_views_net(cfg.seed)
        train_network(net, [images_to_input(cor[train_idx]), images_to_input(tr[train_idx])], y_train, cfg)
        nets[VIEW_MODELS[3]] = net
        return predict_proba(net, [images_to_input(cor[test_idx]), images_to_input(tr[test_idx])])

    run(VIEW_MODELS[3], two_views)
    return ViewComparison(reports, scores, nets, np.asarray(test_idx), config.seed, errors)
