"""Synthetic distributions, datasets, CSV ingestion and stratified splitting.

All randomness comes from ``numpy.random.default_rng(seed)`` (PCG64), one
generator per call, so a given seed reproduces a dataset bit for bit.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import EmptySample, InvalidData, SchemaError


@dataclass(frozen=True, eq=False)
class Dataset:
    """A labelled sample.

    ``weights`` (per-row probability mass, default uniform) and ``label_probs``
    (soft labels, e.g. the exact class probabilities of a synthetic
    distribution) let a dataset stand for a population when computing confusions.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    groups: np.ndarray | None = None
    n_groups: int = 1
    weights: np.ndarray | None = None
    label_probs: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.labels)
        if y.size and not np.issubdtype(y.dtype, np.integer):
            raise InvalidData("labels must be integers")
        y = y.astype(np.int64)
        if X.shape[0] != y.shape[0]:
            raise InvalidData("features and labels have different lengths")
        if not np.all(np.isfinite(X)):
            raise InvalidData("features contain non-finite values")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise InvalidData(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if self.groups is not None:
            g = np.asarray(self.groups).astype(np.int64)
            if g.shape != y.shape:
                raise InvalidData("groups and labels have different lengths")
            object.__setattr__(self, "groups", g)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != y.shape or np.any(w < 0):
                raise InvalidData("weights must be nonnegative, one per row")
            object.__setattr__(self, "weights", w)
        if self.label_probs is not None:
            p = np.asarray(self.label_probs, dtype=float)
            if p.shape != (y.size, self.n_classes):
                raise InvalidData("label_probs must have shape (N, n_classes)")
            object.__setattr__(self, "label_probs", p)

    def __len__(self):
        return self.labels.size

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def row_weights(self) -> np.ndarray:
        if len(self) == 0:
            raise EmptySample("dataset is empty")
        if self.weights is None:
            return np.full(len(self), 1.0 / len(self))
        return self.weights / self.weights.sum()

    def group_class_masses(self) -> np.ndarray:
        """``(m, n)`` array of P(A=a, Y=i), using soft labels when present."""
        w = self.row_weights()
        g = self.groups if self.groups is not None else np.zeros(len(self), dtype=np.int64)
        out = np.zeros((self.n_groups, self.n_classes))
        if self.label_probs is not None:
            np.add.at(out, g, w[:, None] * self.label_probs)
        else:
            np.add.at(out, (g, self.labels), w)
        return out

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            groups=pick(self.groups),
            weights=pick(self.weights),
            label_probs=pick(self.label_probs),
        )


# --------------------------------------------------------------------------- synthetic


class SyntheticKind(str, enum.Enum):
    UNIF = "Unif"
    NORM_BAL = "NormBal"
    NORM_IMBAL = "NormImbal"
    THREE_CLASS_2D = "ThreeClass2D"
    THREE_CLASS_1D = "ThreeClass1D"
    CUSTOM = "Custom"


@dataclass(frozen=True)
class Component:
    """Class-conditional density: a Gaussian (``mean``, ``cov``) or a box uniform (``low``, ``high``)."""

    kind: str
    mean: tuple = ()
    cov: tuple = ()
    low: tuple = ()
    high: tuple = ()

    @property
    def dim(self) -> int:
        return len(self.mean) if self.kind == "normal" else len(self.low)


def _normal(mean, cov):
    mean = tuple(float(v) for v in np.atleast_1d(mean))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    return Component("normal", mean=mean, cov=tuple(map(tuple, cov)))


def _uniform(low, high):
    return Component("uniform", low=tuple(np.atleast_1d(low).astype(float)), high=tuple(np.atleast_1d(high).astype(float)))


_BUILTIN = {
    SyntheticKind.UNIF: ((2 / 3, 1 / 3), (_uniform(-1, 1), _uniform(0, 2))),
    SyntheticKind.NORM_BAL: ((0.5, 0.5), (_normal(-0.5, 1), _normal(0.5, 1))),
    SyntheticKind.NORM_IMBAL: ((0.8, 0.2), (_normal(-0.5, 1), _normal(0.5, 1))),
    SyntheticKind.THREE_CLASS_2D: (
        (0.85, 0.1, 0.05),
        tuple(_normal(m, [[5, 1], [1, 5]]) for m in ((1, 1), (0, 0), (-1, -1))),
    ),
    SyntheticKind.THREE_CLASS_1D: ((1 / 3, 1 / 3, 1 / 3), tuple(_normal(m, 1) for m in (-1, 0, 1))),
}


@dataclass(frozen=True)
class SyntheticSpec:
    kind: SyntheticKind
    seed: int = 0
    priors: tuple = ()
    components: tuple = field(default=(), repr=False)

    def __post_init__(self):
        kind = SyntheticKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is not SyntheticKind.CUSTOM:
            priors, comps = _BUILTIN[kind]
            object.__setattr__(self, "priors", priors)
            object.__setattr__(self, "components", comps)
        priors = np.asarray(self.priors, dtype=float)
        if priors.size == 0 or len(self.components) != priors.size:
            raise InvalidData("need one component per class prior")
        if np.any(priors < 0) or abs(priors.sum() - 1) > 1e-9:
            raise InvalidData("priors must be nonnegative and sum to 1")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise InvalidData("all components must share a dimension")
        for c in self.components:
            if c.kind == "normal":
                cov = np.asarray(c.cov)
                if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() <= 0:
                    raise InvalidData("covariance matrices must be symmetric positive definite")
            elif c.kind == "uniform":
                if np.any(np.asarray(c.high) <= np.asarray(c.low)):
                    raise InvalidData("uniform components need low < high")
            else:
                raise InvalidData(f"unknown component kind {c.kind!r}")

    @classmethod
    def custom(cls, priors, components, seed: int = 0) -> SyntheticSpec:
        """``components``: dicts with ``type`` "normal" (mean, cov) or "uniform" (low, high)."""
        comps = []
        for c in components:
            if isinstance(c, Component):
                comps.append(c)
            elif c["type"] == "normal":
                comps.append(_normal(c["mean"], c["cov"]))
            elif c["type"] == "uniform":
                comps.append(_uniform(c["low"], c["high"]))
            else:
                raise InvalidData(f"unknown component type {c['type']!r}")
        return cls(SyntheticKind.CUSTOM, seed, tuple(float(p) for p in priors), tuple(comps))

    @property
    def n_classes(self) -> int:
        return len(self.priors)

    @property
    def dim(self) -> int:
        return self.components[0].dim


def sample_synthetic(spec: SyntheticSpec, N: int, seed: int | None = None, soft_labels: bool = False) -> Dataset:
    """Draw ``N`` i.i.d. examples; labels first, then features class by class.

    With ``soft_labels`` the dataset also carries the exact class probabilities
    of each drawn point, which lowers the variance of population estimates.
    """
    if N < 1:
        raise EmptySample("N must be at least 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    y = rng.choice(spec.n_classes, size=N, p=np.asarray(spec.priors))
    X = np.empty((N, spec.dim))
    for i, comp in enumerate(spec.components):
        idx = np.flatnonzero(y == i)
        if comp.kind == "normal":
            L = np.linalg.cholesky(np.asarray(comp.cov))
            X[idx] = np.asarray(comp.mean) + rng.standard_normal((idx.size, spec.dim)) @ L.T
        else:
            X[idx] = rng.uniform(comp.low, comp.high, size=(idx.size, spec.dim))
    probs = exact_eta(spec, X)[0] if soft_labels else None
    return Dataset(X, y, spec.n_classes, label_probs=probs)


def log_densities(spec: SyntheticSpec, X) -> np.ndarray:
    """``(N, n)`` log class-conditional densities (``-inf`` outside a uniform's box)."""
    X = np.asarray(X, dtype=float).reshape(-1, spec.dim)
    out = np.empty((X.shape[0], spec.n_classes))
    for i, comp in enumerate(spec.components):
        if comp.kind == "normal":
            cov = np.asarray(comp.cov)
            L = np.linalg.cholesky(cov)
            z = np.linalg.solve(L, (X - np.asarray(comp.mean)).T)
            logdet = 2 * np.log(np.diag(L)).sum()
            out[:, i] = -0.5 * (z**2).sum(axis=0) - 0.5 * (logdet + spec.dim * math.log(2 * math.pi))
        else:
            lo, hi = np.asarray(comp.low), np.asarray(comp.high)
            inside = np.all((X >= lo) & (X <= hi), axis=1)
            out[:, i] = np.where(inside, -np.log(hi - lo).sum(), -np.inf)
    return out


def exact_eta(spec: SyntheticSpec, X) -> tuple[np.ndarray, np.ndarray]:
    """Posterior class probabilities at each row of ``X`` and a flag for points outside every support.

    Flagged points get the uniform distribution.
    """
    with np.errstate(divide="ignore"):
        logp = log_densities(spec, X) + np.log(np.asarray(spec.priors))
    outside = np.all(np.isneginf(logp), axis=1)
    logp[outside] = 0.0
    eta = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    return eta, outside


class ExactEtaModel:
    """Class-probability model that returns the true posterior of a synthetic distribution."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.n_classes = spec.n_classes

    def predict_proba(self, X) -> np.ndarray:
        return exact_eta(self.spec, X)[0]

    def to_dict(self) -> dict:
        return {"type": "exact_eta", "spec": spec_to_dict(self.spec)}


def spec_to_dict(spec: SyntheticSpec) -> dict:
    d = {"kind": spec.kind.value, "seed": spec.seed}
    if spec.kind is SyntheticKind.CUSTOM:
        d["priors"] = list(spec.priors)
        d["components"] = [
            {"type": "normal", "mean": list(c.mean), "cov": [list(r) for r in c.cov]}
            if c.kind == "normal"
            else {"type": "uniform", "low": list(c.low), "high": list(c.high)}
            for c in spec.components
        ]
    return d


def spec_from_dict(d: dict) -> SyntheticSpec:
    if d["kind"] == SyntheticKind.CUSTOM.value:
        return SyntheticSpec.custom(d["priors"], d["components"], seed=d.get("seed", 0))
    return SyntheticSpec(SyntheticKind(d["kind"]), seed=d.get("seed", 0))


# --------------------------------------------------------------------------- CSV


def load_csv(path, n_classes: int | None = None, n_groups: int | None = None) -> Dataset:
    """Read ``f0..f{q-1},label[,group]``; class and group counts default to max + 1."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if "label" not in header:
        raise SchemaError(f"{path}: missing 'label' column")
    feat_cols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
    if not feat_cols:
        raise SchemaError(f"{path}: no feature columns f0..f{{q-1}}")
    expected = [f"f{k}" for k in range(len(feat_cols))]
    if [header[i] for i in feat_cols] != expected:
        raise SchemaError(f"{path}: feature columns must be named {','.join(expected)}")
    li = header.index("label")
    gi = header.index("group") if "group" in header else None

    def ints(col, what):
        out = []
        for ln, r in enumerate(rows, start=2):
            try:
                out.append(int(r[col].strip()))
            except (ValueError, IndexError):
                raise SchemaError(f"{path}:{ln}: {what} must be a base-10 integer") from None
        return np.array(out, dtype=np.int64)

    try:
        X = np.array([[float(r[i]) for i in feat_cols] for r in rows], dtype=float).reshape(len(rows), len(feat_cols))
    except (ValueError, IndexError) as exc:
        raise SchemaError(f"{path}: bad feature value ({exc})") from None
    y = ints(li, "label")
    g = ints(gi, "group") if gi is not None else None
    n = n_classes if n_classes is not None else int(y.max()) + 1 if y.size else 1
    m = n_groups if n_groups is not None else (int(g.max()) + 1 if g is not None and g.size else 1)
    if y.size and (y.min() < 0 or y.max() >= n):
        raise SchemaError(f"{path}: label outside [0, {n})")
    if g is not None and g.size and (g.min() < 0 or g.max() >= m):
        raise SchemaError(f"{path}: group outside [0, {m})")
    if not np.all(np.isfinite(X)):
        raise SchemaError(f"{path}: non-finite feature value")
    return Dataset(X, y, n, groups=g, n_groups=m)


def write_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    header = [f"f{k}" for k in range(dataset.n_features)] + ["label"]
    if dataset.groups is not None:
        header.append("group")
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.features[k]] + [int(dataset.labels[k])]
            if dataset.groups is not None:
                row.append(int(dataset.groups[k]))
            w.writerow(row)


def split(dataset: Dataset, fraction: float = 2 / 3, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified train/test split; the train size is ``round(fraction * N)``.

    Per-class train counts use largest-remainder rounding, so each class is
    within one element of its target share.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    N = len(dataset)
    classes = [np.flatnonzero(dataset.labels == i) for i in range(dataset.n_classes)]
    target = np.array([fraction * c.size for c in classes])
    counts = np.floor(target).astype(int)
    extra = int(round(fraction * N)) - counts.sum()
    order = np.argsort(-(target - counts), kind="stable")
    counts[order[:extra]] += 1
    train = []
    for idx, k in zip(classes, counts):
        perm = rng.permutation(idx)
        train.append(perm[:k])
    train = np.sort(np.concatenate(train)) if train else np.array([], dtype=int)
    mask = np.zeros(N, dtype=bool)
    mask[train] = True
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(np.flatnonzero(~mask))
