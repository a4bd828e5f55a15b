"""Experiment configuration, result tables and the four table runners.

An experiment turns one ``ExperimentConfig`` into one ``ResultTable``:

* ``features``: HGD, HOG, GLCM, CNN1, CNN2 and fused CNN features, each
  through the default classifier (SVM)
* ``classifiers``: fused CNN features through random forest, kNN and SVM
* ``ratios``: the fused pipeline trained at several malignant:benign ratios
  against one fixed, balanced test split
* ``views``: Single-Net per view, probability fusion and 2Views-Net
"""

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .classifiers import LabeledSet, config_hash, report_from_scores, train_classifier
from .features import descriptor_matrix, glcm_features, hgd_descriptor, hog_descriptor
from .fusion import VIEW_MODELS, penultimate, run_view_comparison, train_cnn
from .nn import TrainConfig
from .preprocess import PipelineParams, roi_pipeline
from .synthdata import generate_dataset, load_dataset, split_with_ratio, stratified_split

EXPERIMENTS = ("features", "classifiers", "ratios", "views")

FEATURE_ROWS = ("HGD", "HOG", "GLCM", "CNN1", "CNN2", "Feature Fusion CNN")
CLASSIFIER_ROWS = {"Random forest": "random_forest", "K neighbors": "knn", "Support Vector Machines": "svm"}
RATIO_ROWS = ("2:1", "1.3:1", "1:1")

CSV_COLUMNS = ("experiment", "method", "status", "auc", "accuracy", "tp", "fp", "tn", "fn",
               "n_train", "n_test", "seed", "config_hash", "version", "error")


class ConfigError(ValueError):
    pass


def _section(cls, values, name):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name}: {exc}") from None


@dataclass
class DatasetConfig:
    n_benign: int = 71
    n_malignant: int = 74
    difficulty: str = "standard"
    # read an exported dataset instead of generating one
    data_dir: str = None


@dataclass
class SplitConfig:
    test_fraction: float = 0.3

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")


@dataclass
class DescriptorConfig:
    size: int = 64
    hog_cell: int = 8
    hog_bins: int = 9
    hog_block: int = 2
    glcm_levels: int = 16
    hgd_bins: int = 32
    # run the enhancement pipeline first and describe the enhanced ROI
    use_enhanced: bool = False


@dataclass
class ClassifierConfig:
    svm_C: float = 1.0
    svm_gamma: float = None
    forest_trees: int = 100
    forest_depth: int = 8
    knn_k: int = 5

    def kwargs(self, kind):
        if kind == "svm":
            return {"C": self.svm_C, "gamma": self.svm_gamma}
        if kind == "random_forest":
            return {"n_trees": self.forest_trees, "max_depth": self.forest_depth}
        return {"k": self.knn_k}


@dataclass
class ExperimentConfig:
    experiment: str = "features"
    seed: int = 42
    out: str = "results"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    pipeline: PipelineParams = field(default_factory=PipelineParams)
    descriptors: DescriptorConfig = field(default_factory=DescriptorConfig)
    train: dict = field(default_factory=lambda: {"learning_rate": 0.1, "batch_size": 16,
                                                  "epochs": 8, "l2_weight": 1e-4})
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    ratios: list = field(default_factory=lambda: list(RATIO_ROWS))

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        self.train_config()

    def train_config(self):
        cfg = dict(self.train)
        if "seed" in cfg:
            raise ConfigError("train.seed is derived from the top-level seed")
        try:
            return TrainConfig(seed=self.seed, **cfg)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train: {exc}") from None

    def to_dict(self):
        return asdict(self)

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self):
        """Hash of the settings, excluding the output location and the
        experiment id so tables run from one config share it."""
        d = self.to_dict()
        d.pop("out")
        d.pop("experiment")
        return config_hash(d)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        sections = {"dataset": DatasetConfig, "split": SplitConfig, "pipeline": PipelineParams,
                    "descriptors": DescriptorConfig, "classifier": ClassifierConfig}
        for name, sub in sections.items():
            if name in d:
                d[name] = _section(sub, d[name], name)
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)


@dataclass
class ResultRow:
    method: str
    report: object = None  # EvalReport
    n_train: int = 0
    n_test: int = 0
    error: str = ""

    @property
    def ok(self):
        return self.report is not None and not self.error


@dataclass
class ResultTable:
    experiment: str
    rows: list
    seed: int
    config_hash: str
    version: str = __version__
    split: dict = field(default_factory=dict)

    @property
    def complete(self):
        return all(r.ok for r in self.rows)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            rep = r.report
            if r.ok:
                stats = [repr(rep.auc), repr(rep.accuracy), rep.tp, rep.fp, rep.tn, rep.fn]
            else:
                stats = [""] * 6
            writer.writerow([self.experiment, r.method, "ok" if r.ok else "error", *stats,
                             r.n_train, r.n_test, self.seed, self.config_hash, self.version, r.error])
        return buf.getvalue()

    def to_json(self):
        doc = {
            "experiment": self.experiment,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "version": self.version,
            "split": self.split,
            "complete": self.complete,
            "rows": [{"method": r.method, "n_train": r.n_train, "n_test": r.n_test,
                      "status": "ok" if r.ok else "error", "error": r.error,
                      "report": r.report.to_dict() if r.ok else None} for r in self.rows],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def read_result_csv(path):
    """Parse a ResultTable CSV back into plain row dicts."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(CSV_COLUMNS) - set(rows[0]):
        raise ConfigError(f"{path} is not a result table")
    for r in rows:
        for key in ("auc", "accuracy"):
            r[key] = float(r[key]) if r[key] else None
    return rows


def worker_count():
    """Parallel row limit: ``DVNET_THREADS`` or the machine's core count."""
    value = os.environ.get("DVNET_THREADS")
    if value:
        try:
            n = int(value)
        except ValueError:
            raise ConfigError(f"DVNET_THREADS must be a positive integer, got {value!r}") from None
        if n < 1:
            raise ConfigError(f"DVNET_THREADS must be a positive integer, got {value!r}")
        return n
    return os.cpu_count() or 1


def _run_rows(jobs):
    """Run ``{method: fn}`` concurrently; each fn returns a ResultRow."""
    names = list(jobs)

    def guarded(name):
        try:
            return jobs[name]()
        except Exception as exc:  # one failing row must not void the table
            return ResultRow(name, error=f"{type(exc).__name__}: {exc}")

    n = min(worker_count(), len(names))
    if n <= 1:
        return [guarded(name) for name in names]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(guarded, names))


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def load_or_generate(config):
    ds_cfg = config.dataset
    if ds_cfg.data_dir:
        ds, _ = load_dataset(ds_cfg.data_dir)
        return ds
    return generate_dataset(ds_cfg.n_benign, ds_cfg.n_malignant, ds_cfg.difficulty, config.seed)


def model_images(config, ds, view="coronal"):
    """ROIs fed to descriptors and CNNs: raw, or enhanced when configured."""
    images = ds.views(view)
    if not config.descriptors.use_enhanced:
        return images
    return np.stack([roi_pipeline(img, config.pipeline)[0] for img in images])


def _descriptor(config, name, images):
    d = config.descriptors
    fns = {
        "HOG": lambda img: hog_descriptor(img, d.hog_cell, d.hog_bins, d.hog_block),
        "GLCM": lambda img: glcm_features(img, d.glcm_levels),
        "HGD": lambda img: hgd_descriptor(img, d.hgd_bins),
    }
    return descriptor_matrix(images, name, d.size, fn=fns[name])


def _score_row(name, config, clf_kind, Xtr, ytr, Xte, yte):
    clf = train_classifier(clf_kind, LabeledSet(Xtr, ytr, config.seed), seed=config.seed,
                           **config.classifier.kwargs(clf_kind))
    report = report_from_scores(clf.predict_score(Xte), yte, seed=config.seed,
                                config_hash=config.config_hash, warnings=clf.warnings)
    return ResultRow(name, report, len(ytr), len(yte))


class _CNNFeatures:
    """CNN1/CNN2 trained once per training split, shared by the rows that
    compare classifiers or descriptors on the same fused features."""

    def __init__(self, config, images, y, train, test):
        cfg = config.train_config()
        self.cnn1 = train_cnn("CNN1", [images[train]], y[train], cfg)
        self.cnn2 = train_cnn("CNN2", [images[train]], y[train], cfg)
        self.train = [penultimate(net, [images[train]]) for net in (self.cnn1, self.cnn2)]
        self.test = [penultimate(net, [images[test]]) for net in (self.cnn1, self.cnn2)]

    def matrices(self, which):
        if which == "CNN1":
            return self.train[0], self.test[0]
        if which == "CNN2":
            return self.train[1], self.test[1]
        return np.hstack(self.train), np.hstack(self.test)


def run_features(config, ds, train, test):
    images, y = model_images(config, ds), ds.labels

    def classical(name):
        def job():
            X = _descriptor(config, name, images)
            return _score_row(name, config, "svm", X[train], y[train], X[test], y[test])
        return job

    rows = _run_rows({name: classical(name) for name in FEATURE_ROWS[:3]})
    # the three CNN rows share one pair of trained networks
    try:
        feats = _CNNFeatures(config, images, y, train, test)
    except Exception as exc:
        msg = f"{type(exc).__name__}: {exc}"
        return rows + [ResultRow(name, error=msg) for name in FEATURE_ROWS[3:]]
    jobs = {}
    for name, which in zip(FEATURE_ROWS[3:], ("CNN1", "CNN2", "FUSED")):
        Xtr, Xte = feats.matrices(which)
        jobs[name] = (lambda name=name, Xtr=Xtr, Xte=Xte:
                      _score_row(name, config, "svm", Xtr, y[train], Xte, y[test]))
    return rows + _run_rows(jobs)


def run_classifiers(config, ds, train, test):
    images, y = model_images(config, ds), ds.labels
    try:
        feats = _CNNFeatures(config, images, y, train, test)
    except Exception as exc:
        msg = f"{type(exc).__name__}: {exc}"
        return [ResultRow(name, error=msg) for name in CLASSIFIER_ROWS]
    Xtr, Xte = feats.matrices("FUSED")
    jobs = {name: (lambda name=name, kind=kind: _score_row(name, config, kind, Xtr, y[train], Xte, y[test]))
            for name, kind in CLASSIFIER_ROWS.items()}
    return _run_rows(jobs)


def ratio_row(config, ds, images, ratio):
    y = ds.labels
    train, test = split_with_ratio(ds, config.split.test_fraction, ratio, config.seed)
    feats = _CNNFeatures(config, images, y, train, test)
    Xtr, Xte = feats.matrices("FUSED")
    return _score_row(ratio, config, "svm", Xtr, y[train], Xte, y[test]), test


def run_ratios(config, ds):
    images = model_images(config, ds)
    tests = {}

    def job(ratio):
        def fn():
            row, tests[ratio] = ratio_row(config, ds, images, ratio)
            return row
        return fn

    rows = _run_rows({r: job(r) for r in config.ratios})
    held = list(tests.values())
    if any(not np.array_equal(held[0], t) for t in held[1:]):
        raise RuntimeError("ratio settings produced different test splits")
    return rows


def run_views(config, ds, train, test):
    res = run_view_comparison(ds, train, test, config.train_config(), config.config_hash)
    rows = []
    for name in VIEW_MODELS:
        if name in res.reports:
            rows.append(ResultRow(name, res.reports[name], len(train), len(test)))
        else:
            rows.append(ResultRow(name, error=res.errors.get(name, "not run")))
    return rows


def run_experiment(config, ds=None):
    """Execute ``config.experiment`` and return its ResultTable."""
    ds = ds if ds is not None else load_or_generate(config)
    if config.experiment == "ratios":
        rows = run_ratios(config, ds)
        split = {"protocol": "balanced test, ratio-subsampled train",
                 "test_fraction": config.split.test_fraction}
    else:
        train, test = stratified_split(ds, config.split.test_fraction, config.seed)
        runner = {"features": run_features, "classifiers": run_classifiers, "views": run_views}
        rows = runner[config.experiment](config, ds, train, test)
        split = {"protocol": "stratified", "test_fraction": config.split.test_fraction,
                 "test_indices": test.tolist()}
    return ResultTable(config.experiment, rows, config.seed, config.config_hash, __version__, split)

