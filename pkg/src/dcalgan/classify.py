"""Fused discriminator features, a linear squared-hinge SVM and cross-validated metrics.

Class +1 is the positive class throughout. Decision values are ``w . x + b``
on standardized features; ``sign(0)`` is taken as +1.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .errors import ConfigError, DataError
from .models import FUSION_LAYERS, discriminator_features, fuse_features, fused_dim, parameter_fingerprint

logger = logging.getLogger(__name__)

REPORT_HEADER = ("fold", "tp", "fp", "fn", "tn", "accuracy", "sensitivity", "specificity", "precision", "auc")
ROC_HEADER = ("fpr", "tpr", "threshold")
FEATURE_MAGIC = b"DCFM"
FEATURE_VERSION = 1


# -- features ------------------------------------------------------------------


@dataclass
class FeatureMatrix:
    rows: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) in {+1, -1}
    fusion_mode: str
    source: str = ""  # discriminator parameter fingerprint
    ids: list[str] = field(default_factory=list)
    dims: dict = field(default_factory=dict, repr=False)  # fusion mode -> prefix width

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2 or len(self.labels) != len(self.rows):
            raise DataError(f"feature rows {self.rows.shape} do not match {len(self.labels)} labels")
        if not np.all(np.isfinite(self.rows)):
            raise DataError("feature matrix contains non-finite entries")
        if not set(np.unique(self.labels)) <= {-1, 1}:
            raise DataError("labels must be +1 or -1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.shape

    def prefix(self, mode: str) -> FeatureMatrix:
        """View of a wider fusion as a narrower one (F1 within F2 within F3)."""
        if FUSION_LAYERS[mode] != FUSION_LAYERS[self.fusion_mode][:len(FUSION_LAYERS[mode])]:
            raise ConfigError(f"{mode} is not a prefix of {self.fusion_mode}")
        d = self.dims[mode]
        return FeatureMatrix(self.rows[:, :d], self.labels, mode, self.source, self.ids, self.dims)


def extract_features(ckpt: Checkpoint, dataset: Dataset, fusion_mode: str, batch_size: int = 50) -> FeatureMatrix:
    """Eval-mode fused features for every image, in dataset order."""
    config = ckpt.config
    if fusion_mode not in FUSION_LAYERS:
        raise ConfigError(f"fusion mode must be one of F1, F2, F3, got {fusion_mode!r}")
    if dataset.size != config.image_size:
        raise ConfigError(f"dataset images are {dataset.size} px; checkpoint expects {config.image_size}")
    blocks = []
    for start in range(0, len(dataset), batch_size):
        feats = discriminator_features(dataset.images[start:start + batch_size], ckpt.params.discriminator,
                                       config, training=False)
        blocks.append(fuse_features(feats, fusion_mode).data)
    return FeatureMatrix(np.concatenate(blocks).astype(np.float64), dataset.labels, fusion_mode,
                         parameter_fingerprint(ckpt.params.discriminator), list(dataset.ids),
                         {m: fused_dim(config, m) for m in FUSION_LAYERS})


def save_features(fm: FeatureMatrix, path: str | Path) -> None:
    """``DCFM`` u16 version, u32 n, u32 d, float32 rows, int8 labels, u32 len + provenance JSON."""
    n, d = fm.shape
    meta = json.dumps({"fusion_mode": fm.fusion_mode, "source": fm.source, "ids": fm.ids,
                       "dims": fm.dims}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC)
    buf.write(struct.pack("<HII", FEATURE_VERSION, n, d))
    buf.write(fm.rows.astype("<f4").tobytes())
    buf.write(fm.labels.astype("i1").tobytes())
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def load_features(path: str | Path) -> FeatureMatrix:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    if blob[:4] != FEATURE_MAGIC or len(blob) < 14:
        raise DataError(f"{path}: not a feature file")
    version, n, d = struct.unpack_from("<HII", blob, 4)
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    pos = 14
    end = pos + 4 * n * d
    try:
        rows = np.frombuffer(blob[pos:end], dtype="<f4").reshape(n, d)
        labels = np.frombuffer(blob[end:end + n], dtype="i1")
        (mlen,) = struct.unpack_from("<I", blob, end + n)
        meta = json.loads(blob[end + n + 4:end + n + 4 + mlen])
    except (ValueError, struct.error) as exc:
        raise DataError(f"{path}: truncated feature file") from exc
    return FeatureMatrix(rows.astype(np.float64), labels, meta["fusion_mode"], meta["source"], meta["ids"],
                         meta.get("dims", {}))


# -- the SVM -------------------------------------------------------------------


@dataclass
class SvmModel:
    w: np.ndarray
    b: float
    C: float
    mean: np.ndarray
    scale: np.ndarray
    objective: float = math.nan
    iterations: int = 0

    def to_json(self) -> str:
        return json.dumps({"w": self.w.tolist(), "b": self.b, "C": self.C, "mean": self.mean.tolist(),
                           "scale": self.scale.tolist(), "objective": self.objective,
                           "iterations": self.iterations}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> SvmModel:
        d = json.loads(text)
        return cls(np.array(d["w"], dtype=np.float64), float(d["b"]), float(d["C"]),
                   np.array(d["mean"], dtype=np.float64), np.array(d["scale"], dtype=np.float64),
                   float(d["objective"]), int(d["iterations"]))


def svm_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, C: float) -> float:
    h = np.maximum(0.0, 1.0 - y * (X @ w + b))
    return 0.5 * float(w @ w) + C * float(h @ h)


def _check_training_set(X: np.ndarray, y: np.ndarray) -> None:
    if X.ndim != 2 or len(X) != len(y):
        raise DataError(f"features {X.shape} do not match {len(y)} labels")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite features")
    if len(np.unique(y)) < 2:
        raise DataError("SVM training needs both classes")


def svm_train(X, y, C: float = 1.0, max_iters: int = 20000, tol: float = 1e-12,
              standardize: bool = True, trace: list | None = None) -> SvmModel:
    """Minimize ``0.5 |w|^2 + C sum max(0, 1 - y (w.x + b))^2`` by gradient descent.

    Steps start from the Barzilai-Borwein estimate and backtrack until the
    Armijo condition holds, so every accepted step lowers the objective. The
    loop stops when the relative decrease falls below ``tol``. With
    ``standardize`` the per-dimension mean and scale of ``X`` are fitted here
    and stored on the model. ``trace`` collects the objective per iteration.

    Starting from zero, every gradient in ``w`` lies in the span of the rows,
    so the iterates are carried as ``w = Z.T @ alpha`` and all products go
    through the Gram matrix: the same steps at O(n^2) rather than O(n d).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_training_set(X, y)
    if not C > 0:
        raise ConfigError("C must be positive")
    n, d = X.shape
    if standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        mean, scale = np.zeros(d), np.ones(d)
    Z = (X - mean) / scale
    K = Z @ Z.T

    def evaluate(alpha: np.ndarray, b: float):
        Ka = K @ alpha
        h = np.maximum(0.0, 1.0 - y * (Ka + b))
        coef = -2.0 * C * h * y
        # gradient: w-part is Z.T @ (alpha + coef), b-part is sum(coef)
        return 0.5 * float(alpha @ Ka) + C * float(h @ h), alpha + coef, float(coef.sum())

    def inner(u: np.ndarray, ub: float, v: np.ndarray, vb: float) -> float:
        return float(u @ (K @ v)) + ub * vb

    alpha, b = np.zeros(n), 0.0
    f, ga, gb = evaluate(alpha, b)
    if trace is not None:
        trace.append(f)
    # a safe first step: the inverse of a Lipschitz bound for the gradient
    step = 1.0 / (1.0 + 2.0 * C * (np.linalg.eigvalsh(K)[-1] + n))
    it = 0
    for it in range(1, max_iters + 1):
        gg = inner(ga, gb, ga, gb)
        if gg <= 0.0:
            break
        t = step
        while True:
            ca, cb = alpha - t * ga, b - t * gb
            fc, gca, gcb = evaluate(ca, cb)
            if fc <= f - 1e-4 * t * gg:
                break
            t *= 0.5
            if t < 1e-300:
                fc, gca, gcb, ca, cb = f, ga, gb, alpha, b
                break
        # s = -t g and r = g_new - g in w-space
        ss = t * t * gg
        sr = -t * inner(ga, gb, gca - ga, gcb - gb)
        decrease = f - fc
        alpha, b, f, ga, gb = ca, cb, fc, gca, gcb
        if trace is not None:
            trace.append(f)
        if decrease <= tol * (1.0 + abs(f)):
            break
        step = ss / sr if sr > 0 else t
    w = Z.T @ alpha
    return SvmModel(w, float(b), C, mean, scale, svm_objective(w, float(b), Z, y, C), it)


def svm_decision(model: SvmModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.w.size:
        raise DataError(f"model expects {model.w.size} features, got {X.shape[1]}")
    return ((X - model.mean) / model.scale) @ model.w + model.b


def svm_predict(model: SvmModel, X) -> np.ndarray:
    return np.where(svm_decision(model, X) >= 0, 1, -1)


# -- folds and metrics ---------------------------------------------------------


def stratified_kfold(labels, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle each class, concatenate (+1 first) and deal indices round-robin into k folds.

    ``k`` equal to the number of samples is leave-one-out and skips the
    per-class size check.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ConfigError("k must be at least 2")
    loo = k == len(labels)
    rng = np.random.default_rng(seed)
    order = []
    for cls in (1, -1):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < k and not loo:
            raise DataError(f"class {cls:+d} has {len(idx)} samples, fewer than k={k}")
        order.append(rng.permutation(idx))
    order = np.concatenate(order)
    fold_of = np.empty(len(labels), dtype=np.int64)
    fold_of[order] = np.arange(len(order)) % k
    everything = np.arange(len(labels))
    return [(everything[fold_of != f], everything[fold_of == f]) for f in range(k)]


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    undefined: frozenset = frozenset()

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> Metrics:
        undefined = set()

        def ratio(name: str, num: int, den: int) -> float:
            if den == 0:
                undefined.add(name)
                return math.nan
            return num / den

        acc = ratio("accuracy", tp + tn, tp + fp + fn + tn)
        sens = ratio("sensitivity", tp, tp + fn)
        spec = ratio("specificity", tn, fp + tn)
        prec = ratio("precision", tp, tp + fp)
        return cls(tp, fp, fn, tn, acc, sens, spec, prec, frozenset(undefined))

    @property
    def size(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def compute_metrics(y_true, y_pred) -> Metrics:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    for arr in (y_true, y_pred):
        if not set(np.unique(arr)) <= {-1, 1}:
            raise ValueError("labels must be +1 or -1")
    pos_t, pos_p = y_true == 1, y_pred == 1
    return Metrics.from_counts(int(np.sum(pos_t & pos_p)), int(np.sum(~pos_t & pos_p)),
                               int(np.sum(pos_t & ~pos_p)), int(np.sum(~pos_t & ~pos_p)))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # first entry is +inf (nothing predicted positive)
    auc: float


def roc_auc(scores, y_true) -> RocCurve:
    """Threshold sweep over the distinct scores (predict +1 when score >= threshold)."""
    scores = np.asarray(scores, dtype=np.float64)
    y_true = np.asarray(y_true)
    n_pos = int(np.sum(y_true == 1))
    n_neg = int(np.sum(y_true == -1))
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both classes")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], y_true[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == -1)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # end of each tie group
    tps = np.r_[0, tp[last]]
    fps = np.r_[0, fp[last]]
    # trapezoids in integer units: exact half credit for tied groups
    area = np.sum((fps[1:] - fps[:-1]) * (tps[1:] + tps[:-1])) / 2.0
    return RocCurve(fps / n_neg, tps / n_pos, np.r_[np.inf, s[last]], float(area) / (n_pos * n_neg))


def mann_whitney_auc(scores, y_true) -> float:
    """Direct pair count: wins plus half of ties over all positive/negative pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    y_true = np.asarray(y_true)
    pos, neg = scores[y_true == 1], scores[y_true == -1]
    diff = pos[:, None] - neg[None, :]
    return (float(np.sum(diff > 0)) + 0.5 * float(np.sum(diff == 0))) / (len(pos) * len(neg))


# -- cross-validation ----------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    metrics: Metrics
    auc: float  # NaN when the test fold holds one class only
    test_index: np.ndarray
    decision: np.ndarray


@dataclass
class EvaluationReport:
    k: int
    seed: int
    C: float
    fusion_mode: str
    folds: list[FoldResult]
    pooled: Metrics
    roc: RocCurve

    def mean(self, name: str) -> float:
        vals = [getattr(f.metrics, name) if name != "auc" else f.auc for f in self.folds]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_accuracy(self) -> float:
        return self.mean("accuracy")

    def rows(self) -> list[list[str]]:
        out = []
        for f in self.folds:
            m = f.metrics
            out.append([str(f.fold), str(m.tp), str(m.fp), str(m.fn), str(m.tn)]
                       + [_fmt(v) for v in (m.accuracy, m.sensitivity, m.specificity, m.precision, f.auc)])
        counts = [_fmt(float(np.mean([getattr(f.metrics, c) for f in self.folds]))) for c in ("tp", "fp", "fn", "tn")]
        out.append(["mean", *counts] + [_fmt(self.mean(n)) for n in
                                        ("accuracy", "sensitivity", "specificity", "precision", "auc")])
        p = self.pooled
        out.append(["pooled", str(p.tp), str(p.fp), str(p.fn), str(p.tn)]
                   + [_fmt(v) for v in (p.accuracy, p.sensitivity, p.specificity, p.precision, self.roc.auc)])
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            w.writerows(self.rows())

    def write_roc(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ROC_HEADER)
            for x, yv, t in zip(self.roc.fpr, self.roc.tpr, self.roc.thresholds):
                w.writerow([_fmt(x), _fmt(yv), _fmt(t)])

    def summary(self) -> str:
        lines = [f"fusion {self.fusion_mode}, {self.k}-fold stratified CV, seed {self.seed}, C={self.C:g}"]
        for name in ("accuracy", "sensitivity", "specificity", "precision", "auc"):
            lines.append(f"  mean {name:<12} {self.mean(name):.4f}")
        p = self.pooled
        lines.append(f"  pooled confusion  TP={p.tp} FP={p.fp} FN={p.fn} TN={p.tn}")
        lines.append(f"  pooled accuracy   {p.accuracy:.4f}   pooled AUC {self.roc.auc:.4f}")
        flagged = sorted({n for f in self.folds for n in f.metrics.undefined})
        if flagged:
            lines.append(f"  undefined in some folds (zero denominator): {', '.join(flagged)}")
        return "\n".join(lines)


def _fmt(v: float) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return repr(float(v))


def cross_validate(fm: FeatureMatrix, k: int, seed: int, C: float = 1.0, max_iters: int = 20000,
                   tol: float = 1e-12) -> EvaluationReport:
    folds = []
    for i, (train_idx, test_idx) in enumerate(stratified_kfold(fm.labels, k, seed)):
        model = svm_train(fm.rows[train_idx], fm.labels[train_idx], C, max_iters, tol)
        dec = svm_decision(model, fm.rows[test_idx])
        pred = np.where(dec >= 0, 1, -1)
        y = fm.labels[test_idx]
        auc = roc_auc(dec, y).auc if len(np.unique(y)) == 2 else math.nan
        folds.append(FoldResult(i, compute_metrics(y, pred), auc, test_idx, dec))
    all_idx = np.concatenate([f.test_index for f in folds])
    all_dec = np.concatenate([f.decision for f in folds])
    y_all = fm.labels[all_idx]
    pooled = compute_metrics(y_all, np.where(all_dec >= 0, 1, -1))
    return EvaluationReport(k, seed, C, fm.fusion_mode, folds, pooled, roc_auc(all_dec, y_all))


def evaluate(ckpt: Checkpoint, dataset: Dataset, fusion_mode: str, k: int, seed: int,
             C: float = 1.0) -> EvaluationReport:
    return cross_validate(extract_features(ckpt, dataset, fusion_mode), k, seed, C)
