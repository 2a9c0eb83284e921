"""Patch scorer: a 3-class softmax regression trained by mini-batch SGD, plus
ingestion of scores produced elsewhere.

Any object with ``predict_proba(features) -> (n, 3)`` in
``(melanoma, nevus, other)`` column order can drive the downstream stages;
scores from an external CNN enter through :func:`ingest_external_scores`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import CLASS_ORDER, PatchClass, PatchRecord, ScoreTriplet
from .exceptions import ClassCoverageError, DivergenceError, JoinError, ValidationError

N_CLASSES = 3


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(W: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient for weights ``W`` (3, d+1), last column the bias."""
    Xb = np.hstack([X, np.ones((len(X), 1))])
    P = softmax(Xb @ W.T)
    n = len(X)
    loss = -np.log(np.clip(P[np.arange(n), y], 1e-300, None)).mean()
    P[np.arange(n), y] -= 1.0
    return float(loss), P.T @ Xb / n


def mean_cross_entropy(W: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    Xb = np.hstack([X, np.ones((len(X), 1))])
    logits = Xb @ W.T
    zmax = logits.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
    return float((lse - logits[np.arange(len(X)), y]).mean())


def encode_labels(y) -> np.ndarray:
    """PatchClass values/strings or integer indices -> int array in CLASS_ORDER."""
    out = []
    for v in y:
        if isinstance(v, (int, np.integer)):
            out.append(int(v))
        else:
            out.append(PatchClass(v).index)
    arr = np.asarray(out, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= N_CLASSES):
        raise ValidationError("class index out of range")
    return arr


class SoftmaxRegression(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression fit by seeded mini-batch SGD.

    Features are z-scored internally; the learned weights are folded back so
    ``coef_`` and ``intercept_`` act on raw features. ``loss_curve_[0]`` is the
    loss at initialization and each further entry the full training-set loss
    after an epoch. Training stops early once the loss has improved by less
    than ``tol`` for ``n_iter_no_change`` consecutive epochs.
    """

    def __init__(self, epochs=200, learning_rate=0.05, batch_size=64, seed=0,
                 tol=1e-5, n_iter_no_change=10, standardize=True):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.tol = tol
        self.n_iter_no_change = n_iter_no_change
        self.standardize = standardize

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = encode_labels(y)
        if len(y) != len(X):
            raise ValidationError("X and y lengths differ")
        present = set(np.unique(y).tolist())
        missing = [CLASS_ORDER[i].value for i in range(N_CLASSES) if i not in present]
        if missing:
            raise ClassCoverageError(f"training data lacks classes {missing}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("learning_rate and batch_size must be positive, epochs >= 0")

        if self.standardize:
            mu = X.mean(axis=0)
            sd = X.std(axis=0)
            sd[sd < 1e-12] = 1.0
        else:
            mu, sd = np.zeros(X.shape[1]), np.ones(X.shape[1])
        Z = (X - mu) / sd

        rng = np.random.default_rng(self.seed)
        W = np.zeros((N_CLASSES, X.shape[1] + 1))
        curve = [mean_cross_entropy(W, Z, y)]
        stall = 0
        n = len(Z)
        for _ in range(self.epochs):
            order = rng.permutation(n)
            # overflow is detected below and reported as DivergenceError
            with np.errstate(over="ignore", invalid="ignore"):
                for start in range(0, n, self.batch_size):
                    idx = order[start:start + self.batch_size]
                    _, g = loss_and_grad(W, Z[idx], y[idx])
                    W -= self.learning_rate * g
                loss = mean_cross_entropy(W, Z, y)
            if not math.isfinite(loss) or not np.isfinite(W).all():
                raise DivergenceError(
                    f"loss became non-finite after {len(curve)} epochs; lower learning_rate")
            stall = stall + 1 if curve[-1] - loss < self.tol else 0
            curve.append(loss)
            if self.n_iter_no_change and stall >= self.n_iter_no_change:
                break

        coef = W[:, :-1] / sd
        self.coef_ = coef
        self.intercept_ = W[:, -1] - coef @ mu
        self.classes_ = np.arange(N_CLASSES)
        self.loss_curve_ = curve
        self.n_iter_ = len(curve) - 1
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def to_model(self) -> "ClassifierModel":
        check_is_fitted(self, "coef_")
        return ClassifierModel(
            weights=np.hstack([self.coef_, self.intercept_[:, None]]),
            training_meta={
                "epochs": self.n_iter_,
                "max_epochs": self.epochs,
                "learning_rate": self.learning_rate,
                "batch_size": self.batch_size,
                "seed": self.seed,
                "loss_curve": list(self.loss_curve_),
            },
        )

    @classmethod
    def from_model(cls, model: "ClassifierModel") -> "SoftmaxRegression":
        meta = model.training_meta
        est = cls(epochs=meta.get("max_epochs", 200), learning_rate=meta.get("learning_rate", 0.05),
                  batch_size=meta.get("batch_size", 64), seed=meta.get("seed", 0))
        est.coef_ = model.weights[:, :-1].copy()
        est.intercept_ = model.weights[:, -1].copy()
        est.classes_ = np.arange(N_CLASSES)
        est.loss_curve_ = list(meta.get("loss_curve", []))
        est.n_iter_ = meta.get("epochs", 0)
        est.n_features_in_ = est.coef_.shape[1]
        return est


@dataclass(eq=False)
class ClassifierModel:
    weights: np.ndarray
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != N_CLASSES:
            raise ValidationError(f"weights must be 3 x (d+1), got {self.weights.shape}")
        if not np.isfinite(self.weights).all():
            raise ValidationError("weights must be finite")

    def to_json(self) -> str:
        return json.dumps({"weights": self.weights.tolist(), "training_meta": self.training_meta},
                          indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ClassifierModel":
        d = json.loads(text)
        return cls(np.asarray(d["weights"]), d.get("training_meta", {}))


def train(X, y, epochs=200, learning_rate=0.05, batch_size=64, seed=0, **kw) -> ClassifierModel:
    est = SoftmaxRegression(epochs=epochs, learning_rate=learning_rate,
                            batch_size=batch_size, seed=seed, **kw)
    return est.fit(X, y).to_model()


def score_matrix(model: ClassifierModel, features: np.ndarray) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return softmax(features @ model.weights[:, :-1].T + model.weights[:, -1])


def score(model: ClassifierModel, features: np.ndarray) -> list[ScoreTriplet]:
    return [to_triplet(row) for row in score_matrix(model, features)]


def to_triplet(row) -> ScoreTriplet:
    """Build a triplet from a probability row, absorbing float rounding in the sum."""
    p = np.clip(np.asarray(row, dtype=np.float64), 0.0, 1.0)
    total = p.sum()
    if abs(total - 1.0) > 1e-12:
        p = p / total
    return ScoreTriplet(float(p[0]), float(p[1]), float(p[2]))


SUM_TOLERANCE = 0.01


def ingest_external_scores(csv_text: str,
                           records: Optional[dict[str, Sequence[PatchRecord]]] = None,
                           ) -> dict[tuple[str, int, int], ScoreTriplet]:
    """Read externally produced scores from the patch CSV schema.

    Rows whose scores sum to within ``1 +/- 0.01`` are renormalized; anything
    else raises :class:`ValidationError`. When ``records`` (slide id -> patch
    records) is given, every row must name a known patch or :class:`JoinError`
    is raised.
    """
    reader = csv.DictReader(io.StringIO(csv_text))
    need = {"slide_id", "grid_x", "grid_y", "s_mel", "s_nev", "s_other"}
    missing = need - set(reader.fieldnames or ())
    if missing:
        raise ValidationError(f"score CSV lacks columns {sorted(missing)}")
    known = None
    if records is not None:
        known = {(sid, r.grid_x, r.grid_y) for sid, recs in records.items() for r in recs}
    out: dict[tuple[str, int, int], ScoreTriplet] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row["s_mel"]:
            continue
        key = (row["slide_id"], int(row["grid_x"]), int(row["grid_y"]))
        if known is not None and key not in known:
            raise JoinError(f"line {lineno}: unknown patch {key}")
        vals = np.array([float(row["s_mel"]), float(row["s_nev"]), float(row["s_other"])])
        total = vals.sum()
        if not np.isfinite(vals).all() or vals.min() < 0 or abs(total - 1.0) > SUM_TOLERANCE:
            raise ValidationError(f"line {lineno}: scores {vals.tolist()} do not form a distribution")
        out[key] = to_triplet(vals)
    return out
