"""Randomized classifiers and solver traces shared by every solver."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..confusion import ConfusionLayout, ConfusionVector
from ..errors import InvalidData
from ..metrics import BoundConstraints, BoundMetric, Constraint, Metric
from ..oracle import (
    DeterministicClassifier,
    _groups_of,
    classifier_from_dict,
)

_CHUNK = 256


def _sweep_argmin(costs) -> np.ndarray:
    # argmin over a list of same-shape cost arrays, ties to the larger index like _argmin_last
    best = costs[-1]
    out = np.full(best.shape, len(costs) - 1, dtype=np.int64)
    for j in range(len(costs) - 2, -1, -1):
        better = costs[j] < best
        best = np.where(better, costs[j], best)
        out[better] = j
    return out


def _raw_confusion_from_mixed(mixed, sample, groups, n_groups: int) -> np.ndarray:
    n = sample.n_classes
    labels = sample.label_probs if sample.label_probs is not None else np.eye(n)[sample.labels]
    weighted = sample.row_weights()[:, None] * labels
    out = np.zeros((n_groups, n, n))
    for a in range(n_groups):
        rows = groups == a
        out[a] = weighted[rows].T @ mixed[rows]
    return out


class RandomizedClassifier:
    """Convex mixture of classifiers: each prediction uses member ``t`` with probability ``weights[t]``."""

    def __init__(self, members, weights):
        w = np.asarray(weights, dtype=float)
        if len(members) != w.size or w.size == 0:
            raise InvalidData("need one weight per member")
        if np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidData("mixture weights must lie in the simplex")
        w = np.maximum(w, 0.0)
        self.members = list(members)
        self.weights = w / w.sum()

    @property
    def n_classes(self) -> int:
        return self.members[0].n_classes

    @property
    def n_groups(self) -> int:
        return self.members[0].n_groups

    def support(self) -> RandomizedClassifier:
        """The same mixture without zero-weight members."""
        keep = np.flatnonzero(self.weights > 0)
        return RandomizedClassifier([self.members[k] for k in keep], self.weights[keep])

    def predict(self, X, groups=None, rng=None) -> np.ndarray:
        rng = rng if rng is not None else np.random.default_rng(0)
        X = np.asarray(X, dtype=float)
        pick = rng.choice(len(self.members), size=X.shape[0], p=self.weights)
        out = np.empty(X.shape[0], dtype=np.int64)
        for k in np.unique(pick):
            rows = pick == k
            g = None if groups is None else np.asarray(groups)[rows]
            out[rows] = self.members[k].predict(X[rows], g)
        return out

    def raw_confusion(self, sample, eta_cache=None) -> np.ndarray:
        """Expected ``(m, n, n)`` confusion; plug-in members sharing a model are evaluated in batches."""
        eta_cache = {} if eta_cache is None else eta_cache
        total = 0.0
        plugin: dict[int, list[int]] = {}
        for k, (h, w) in enumerate(zip(self.members, self.weights)):
            if w == 0:
                continue
            if isinstance(h, DeterministicClassifier):
                plugin.setdefault(id(h.model), []).append(k)
            else:
                total = total + w * h.raw_confusion(sample)
        for idx in plugin.values():
            model = self.members[idx[0]].model
            if id(model) not in eta_cache:
                eta_cache[id(model)] = model.predict_proba(sample.features)
            eta = eta_cache[id(model)]
            m = self.members[idx[0]].n_groups
            g = _groups_of(sample, m)
            # probability that the mixed plug-in members predict each class at each point
            mixed = np.zeros_like(eta)
            for start in range(0, len(idx), _CHUNK):
                chunk = idx[start:start + _CHUNK]
                n_pts, n = eta.shape
                if m == 1:
                    L = np.stack([self.members[k].loss[0] for k in chunk])
                    preds = _sweep_argmin([eta @ L[:, :, j].T for j in range(n)])
                else:
                    preds = np.stack([self.members[k].predict_from_proba(eta, g) for k in chunk], axis=1)
                flat = (np.arange(n_pts)[:, None] * n + preds).ravel()
                mixed += np.bincount(flat, weights=np.tile(self.weights[chunk], n_pts),
                                     minlength=n_pts * n).reshape(n_pts, n)
            total = total + _raw_confusion_from_mixed(mixed, sample, g, m)
        return total

    def to_dict(self) -> dict:
        return {"type": "mixture", "weights": self.weights.tolist(),
                "members": [h.to_dict() for h in self.members]}

    @classmethod
    def from_dict(cls, d: dict) -> RandomizedClassifier:
        return cls([classifier_from_dict(m) for m in d["members"]], d["weights"])


@dataclass
class TraceRecord:
    iteration: int
    lmo_calls: int
    objective: float
    max_violation: float = 0.0
    dual_norm: float | None = None
    log_volume: float | None = None
    extras: dict = field(default_factory=dict)


TRACE_COLUMNS = ("iter", "lmo_calls", "objective", "max_violation", "dual_norm", "log_volume")


@dataclass
class SolverTrace:
    records: list = field(default_factory=list)
    final_confusion: ConfusionVector | None = None
    info: dict = field(default_factory=dict)

    def append(self, record: TraceRecord) -> None:
        if self.records and record.lmo_calls < self.records[-1].lmo_calls:
            raise ValueError("lmo_calls must be nondecreasing")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) if hasattr(r, name) else r.extras[name] for r in self.records])

    def rows(self):
        for r in self.records:
            yield [r.iteration, r.lmo_calls, _fmt(r.objective), _fmt(r.max_violation), _fmt(r.dual_norm),
                   _fmt(r.log_volume)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            w.writerows(self.rows())


def _fmt(v):
    return "" if v is None else repr(float(v))


def bind_metric(psi, layout: ConfusionLayout) -> BoundMetric:
    if isinstance(psi, BoundMetric):
        return psi
    if isinstance(psi, Metric):
        return psi.bind(layout)
    raise TypeError("psi must be a Metric or a BoundMetric")


def bind_constraints(constraints, layout: ConfusionLayout) -> BoundConstraints:
    if isinstance(constraints, BoundConstraints):
        return constraints
    if constraints is None:
        return BoundConstraints([], layout)
    if isinstance(constraints, Constraint):
        constraints = [constraints]
    return BoundConstraints(constraints, layout)


def normalized(v, norm=np.inf, fallback=None):
    """``v / ||v||``, or ``fallback`` when ``v`` vanishes."""
    s = np.linalg.norm(v, norm)
    if s == 0 or not np.isfinite(s):
        return fallback
    return v / s
