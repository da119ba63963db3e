"""Class-probability estimation and linear minimization oracles over achievable confusions.

A plug-in oracle receives a loss in layout coordinates, turns it into a raw
``(m, n, n)`` cost tensor and predicts, for each instance of group ``a``,
``argmin_j sum_i eta_i(x) * cost[a, i, j]`` with ties going to the larger class.
The raw flat offset of ``(a, i, j)`` is ``(a*n + i)*n + j``, the 0-based form of
the usual 1-based ``mn(a-1) + n(i-1) + j``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import softmax

from .confusion import ConfusionLayout, ConfusionVector
from .data import Dataset
from .errors import DegenerateLoss, EmptySample, GroupOutOfRange, InvalidData, LayoutMismatch


class ClassProbabilityModel:
    """Multinomial logistic model; ``weights`` has shape ``(q + 1, n)`` with the bias in the last row."""

    def __init__(self, weights, n_groups: int = 1):
        W = np.array(weights, dtype=float)
        if W.ndim != 2 or W.shape[0] < 1:
            raise InvalidData("weights must be a (q + 1, n) matrix")
        W.setflags(write=False)
        self.weights = W
        self.n_groups = n_groups
        self.history: list[float] = []

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def n_features(self) -> int:
        return self.weights.shape[0] - 1

    def scores(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.n_features)
        return X @ self.weights[:-1] + self.weights[-1]

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.scores(X), axis=1)

    def to_dict(self) -> dict:
        return {"type": "logistic", "n": self.n_classes, "q": self.n_features, "m": self.n_groups,
                "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> ClassProbabilityModel:
        model = cls(d["weights"], n_groups=d.get("m", 1))
        if model.weights.shape != (d["q"] + 1, d["n"]):
            raise InvalidData("weight matrix does not match the (n, q) header")
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> ClassProbabilityModel:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class CpeConfig:
    iterations: int = 2000
    step: float = 0.1
    l2: float = 1e-4
    tol: float = 1e-7


def _log_softmax_rows(S):
    # column loops beat axis=1 reductions when there are only a few classes
    top = S[:, 0].copy()
    for j in range(1, S.shape[1]):
        np.maximum(top, S[:, j], out=top)
    shifted = S - top[:, None]
    return shifted - np.log(np.exp(shifted) @ np.ones(S.shape[1]))[:, None]


def _objective(W, Z, Y, w, l2):
    logp = _log_softmax_rows(Z @ W)
    return -w @ (Y * logp) @ np.ones(Y.shape[1]) + 0.5 * l2 * (W[:-1] ** 2).sum(), logp


def train_cpe(sample: Dataset, config: CpeConfig | None = None, class_weights=None) -> ClassProbabilityModel:
    """Fit a regularized multinomial logistic regression by full-batch gradient descent.

    Features are standardized internally and the fitted weights are mapped back
    to the original scale. A step that would increase the objective is halved
    and retried, so the recorded objective history never increases. Training
    stops early once the gradient norm falls below ``config.tol``.
    """
    cfg = config or CpeConfig()
    if len(sample) == 0:
        raise EmptySample("cannot train on an empty sample")
    X = sample.features
    if not np.all(np.isfinite(X)):
        raise InvalidData("features contain non-finite values")
    n, q = sample.n_classes, sample.n_features
    w = sample.row_weights()
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=float)
        if cw.shape != (n,) or np.any(cw < 0):
            raise InvalidData("class_weights must be n nonnegative numbers")
        w = w * cw[sample.labels]
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = np.hstack([(X - mean) / scale, np.ones((len(sample), 1))])
    Y = np.eye(n)[sample.labels]

    W = np.zeros((q + 1, n))
    obj, logp = _objective(W, Z, Y, w, cfg.l2)
    history = [obj]
    step = cfg.step
    for _ in range(cfg.iterations):
        grad = Z.T @ (w[:, None] * (np.exp(logp) - Y))
        grad[:-1] += cfg.l2 * W[:-1]
        if np.linalg.norm(grad) < cfg.tol:
            break
        while True:
            W_new = W - step * grad
            obj_new, logp_new = _objective(W_new, Z, Y, w, cfg.l2)
            if obj_new <= obj or step < 1e-12:
                break
            step /= 2
        if obj_new > obj:
            break
        W, obj, logp = W_new, obj_new, logp_new
        history.append(obj)

    # undo the standardization: z = (x - mean) / scale
    coef = W[:-1] / scale[:, None]
    bias = W[-1] - mean @ coef
    model = ClassProbabilityModel(np.vstack([coef, bias]), n_groups=sample.n_groups)
    model.history = history
    return model


def model_to_dict(model) -> dict:
    if hasattr(model, "to_dict"):
        return model.to_dict()
    raise InvalidData(f"cannot serialize model of type {type(model).__name__}")


def model_from_dict(d: dict):
    kind = d.get("type", "logistic")
    if kind == "logistic":
        return ClassProbabilityModel.from_dict(d)
    if kind == "exact_eta":
        from .data import ExactEtaModel, spec_from_dict

        return ExactEtaModel(spec_from_dict(d["spec"]))
    raise InvalidData(f"unknown model type {kind!r}")


# --------------------------------------------------------------------------- classifiers


def _groups_of(sample: Dataset, n_groups: int) -> np.ndarray:
    if sample.groups is None:
        if n_groups != 1:
            raise GroupOutOfRange("sample has no group column but the layout has several groups")
        return np.zeros(len(sample), dtype=np.int64)
    g = sample.groups
    if g.size and (g.min() < 0 or g.max() >= n_groups):
        raise GroupOutOfRange(f"group index outside [0, {n_groups})")
    return g


def raw_confusion_from_predictions(pred, sample: Dataset, n_groups: int) -> np.ndarray:
    """Weighted ``(m, n, n)`` confusion of hard predictions; soft labels are used when present."""
    n = sample.n_classes
    w = sample.row_weights()
    g = _groups_of(sample, n_groups)
    size = n_groups * n * n
    if sample.label_probs is None:
        idx = (g * n + sample.labels) * n + pred
        out = np.bincount(idx, weights=w, minlength=size)
    else:
        out = np.zeros(size)
        base = g * n * n + pred
        for i in range(n):
            out += np.bincount(base + i * n, weights=w * sample.label_probs[:, i], minlength=size)
    return out.reshape(n_groups, n, n)


def _argmin_last(costs) -> np.ndarray:
    # ties go to the larger class index
    n = costs.shape[-1]
    return n - 1 - np.argmin(costs[..., ::-1], axis=-1)


class DeterministicClassifier:
    """Plug-in rule ``x -> argmin_j sum_i eta_i(x) * loss[group(x), i, j]``."""

    def __init__(self, loss, model, n_groups: int = 1):
        n = model.n_classes
        L = np.array(loss, dtype=float).reshape(n_groups, n, n)
        L.setflags(write=False)
        self.loss = L
        self.model = model
        self.n_groups = n_groups

    @property
    def n_classes(self) -> int:
        return self.model.n_classes

    def predict_from_proba(self, eta, groups=None) -> np.ndarray:
        if self.n_groups == 1:
            return _argmin_last(eta @ self.loss[0])
        costs = np.einsum("ni,nij->nj", eta, self.loss[groups])
        return _argmin_last(costs)

    def predict(self, X, groups=None) -> np.ndarray:
        return self.predict_from_proba(self.model.predict_proba(X), groups)

    def raw_confusion(self, sample: Dataset, eta=None) -> np.ndarray:
        g = _groups_of(sample, self.n_groups)
        if eta is None:
            eta = self.model.predict_proba(sample.features)
        pred = self.predict_from_proba(eta, g)
        return raw_confusion_from_predictions(pred, sample, self.n_groups)

    def to_dict(self) -> dict:
        return {"type": "plugin", "n_groups": self.n_groups, "loss": self.loss.ravel().tolist(),
                "model": model_to_dict(self.model)}


class ConstantClassifier:
    """Randomized classifier that ignores ``x`` and predicts class ``j`` with probability ``probs[j]``."""

    def __init__(self, probs, n_groups: int = 1):
        p = np.asarray(probs, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise InvalidData("probs must lie in the simplex")
        self.probs = p / p.sum()
        self.n_groups = n_groups

    @property
    def n_classes(self) -> int:
        return self.probs.size

    def raw_confusion(self, sample: Dataset, eta=None) -> np.ndarray:
        masses = np.zeros((self.n_groups, sample.n_classes))
        w = sample.row_weights()
        g = _groups_of(sample, self.n_groups)
        if sample.label_probs is None:
            np.add.at(masses, (g, sample.labels), w)
        else:
            np.add.at(masses, g, w[:, None] * sample.label_probs)
        return masses[:, :, None] * self.probs

    def to_dict(self) -> dict:
        return {"type": "constant", "n_groups": self.n_groups, "probs": self.probs.tolist()}


def classifier_from_dict(d: dict):
    if d["type"] == "plugin":
        model = model_from_dict(d["model"])
        return DeterministicClassifier(d["loss"], model, d.get("n_groups", 1))
    if d["type"] == "constant":
        return ConstantClassifier(d["probs"], d.get("n_groups", 1))
    if d["type"] == "mixture":
        from .solvers.common import RandomizedClassifier

        return RandomizedClassifier.from_dict(d)
    raise InvalidData(f"unknown classifier type {d['type']!r}")


def empirical_confusion(classifier, sample: Dataset, layout: ConfusionLayout) -> ConfusionVector:
    """Confusion of ``classifier`` on ``sample`` expressed in ``layout``."""
    if len(sample) == 0:
        raise EmptySample("sample is empty")
    raw = classifier.raw_confusion(sample)
    return ConfusionVector(layout, layout.forward(raw))


# --------------------------------------------------------------------------- oracles


@dataclass(frozen=True)
class LmoResult:
    classifier: object
    confusion_estimate: ConfusionVector
    sample_size: int

    @property
    def confusion(self) -> np.ndarray:
        return self.confusion_estimate.entries


class PluginOracle:
    """Plug-in LMO over a fixed sample; class probabilities are computed once and reused."""

    def __init__(self, model, sample: Dataset, layout: ConfusionLayout):
        if len(sample) == 0:
            raise EmptySample("sample is empty")
        if model.n_classes != layout.n_classes or sample.n_classes != layout.n_classes:
            raise LayoutMismatch("model, sample and layout disagree on the number of classes")
        self.model = model
        self.sample = sample
        self.layout = layout
        self.groups = _groups_of(sample, layout.n_groups)
        self.eta = model.predict_proba(sample.features)
        self.calls = 0

    def __call__(self, loss) -> LmoResult:
        raw_loss = self.layout.to_raw_loss(loss)
        return self.call_raw(raw_loss)

    def call_raw(self, raw_loss) -> LmoResult:
        self.calls += 1
        clf = DeterministicClassifier(raw_loss, self.model, self.layout.n_groups)
        pred = clf.predict_from_proba(self.eta, self.groups)
        raw = raw_confusion_from_predictions(pred, self.sample, self.layout.n_groups)
        return LmoResult(clf, ConfusionVector(self.layout, self.layout.forward(raw)), len(self.sample))

    def confusion_of(self, classifier) -> ConfusionVector:
        if isinstance(classifier, DeterministicClassifier) and classifier.model is self.model:
            raw = classifier.raw_confusion(self.sample, self.eta)
        else:
            raw = classifier.raw_confusion(self.sample)
        return ConfusionVector(self.layout, self.layout.forward(raw))


def plugin_lmo(loss, model, sample: Dataset, layout: ConfusionLayout) -> LmoResult:
    """One-shot plug-in LMO: ``loss`` is in ``layout`` coordinates."""
    return PluginOracle(model, sample, layout)(loss)


def group_plugin_lmo(loss, model, sample: Dataset, group_map, layout: ConfusionLayout) -> LmoResult:
    """Plug-in LMO whose cost block depends on each instance's group.

    ``group_map`` is an array of group indices, a callable on the feature matrix,
    or None to use the sample's own group column.
    """
    if group_map is not None:
        groups = np.asarray(group_map(sample.features) if callable(group_map) else group_map).astype(np.int64)
        if groups.shape != sample.labels.shape:
            raise GroupOutOfRange("group_map must give one group per instance")
        if groups.size and (groups.min() < 0 or groups.max() >= layout.n_groups):
            raise GroupOutOfRange(f"group index outside [0, {layout.n_groups})")
        sample = replace(sample, groups=groups, n_groups=layout.n_groups)
    return PluginOracle(model, sample, layout)(loss)


def wlr_lmo(class_weights, sample: Dataset, config: CpeConfig | None = None,
            layout: ConfusionLayout | None = None) -> LmoResult:
    """Train a class-weighted logistic model and return its argmax classifier."""
    cw = np.asarray(class_weights, dtype=float)
    if np.any(cw < 0):
        raise DegenerateLoss("class weights must be nonnegative")
    if not np.any(cw > 0):
        raise DegenerateLoss("all class weights are zero")
    layout = layout or ConfusionLayout.full(sample.n_classes)
    model = train_cpe(sample, config, class_weights=cw)
    n = sample.n_classes
    return PluginOracle(model, sample, layout).call_raw(np.tile((1.0 - np.eye(n)).ravel(), layout.n_groups))


def diagonal_weights(raw_loss, n: int, tol: float = 1e-12) -> np.ndarray | None:
    """Per-class weights when every row of the cost matrix is constant off the diagonal."""
    L = np.asarray(raw_loss, dtype=float).reshape(n, n)
    off = L[~np.eye(n, dtype=bool)].reshape(n, n - 1)
    if np.ptp(off, axis=1).max(initial=0.0) > tol:
        return None
    return np.maximum(off[:, 0] - np.diag(L), 0.0) if n > 1 else np.zeros(1)


class WlrOracle:
    """LMO that retrains a weighted logistic model per call.

    Losses that are not per-class weighted 0-1 costs fall back to the plug-in
    rule on ``fallback_model``.
    """

    def __init__(self, sample: Dataset, layout: ConfusionLayout, config: CpeConfig | None = None,
                 fallback_model=None):
        self.sample = sample
        self.layout = layout
        self.config = config
        self.fallback = PluginOracle(fallback_model, sample, layout) if fallback_model is not None else None
        self.calls = 0

    def __call__(self, loss) -> LmoResult:
        self.calls += 1
        raw = self.layout.to_raw_loss(loss)
        n = self.layout.n_classes
        cw = diagonal_weights(raw, n) if self.layout.n_groups == 1 else None
        if cw is None:
            if self.fallback is None:
                raise DegenerateLoss("loss is not a per-class weighting and no fallback model was given")
            return self.fallback.call_raw(raw)
        return wlr_lmo(cw, self.sample, self.config, self.layout)

    def confusion_of(self, classifier) -> ConfusionVector:
        raw = classifier.raw_confusion(self.sample)
        return ConfusionVector(self.layout, self.layout.forward(raw))
