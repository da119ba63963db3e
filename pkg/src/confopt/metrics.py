"""Performance metrics and constraint functions of confusion matrices.

Every metric is written in terms of the raw ``(m, n, n)`` confusion tensor (all
functions accept leading batch axes) and reaches other layouts through the
layout's affine lift. Per-class recalls divide by the class priors when the
layout carries masses and by the row sums otherwise. Lower values are better.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .confusion import (
    ConfusionLayout,
    ConfusionVector,
    column_sum_rows,
    diagonal_rows,
    row_sum_rows,
)
from .errors import DegenerateDenominator, LayoutMismatch

EPS = 1e-9


class MetricKind(str, enum.Enum):
    ZERO_ONE = "ZeroOne"
    BALANCED = "Balanced"
    HMEAN = "HMean"
    GMEAN = "GMean"
    QMEAN = "QMean"
    MICRO_F1 = "MicroF1"
    MACRO_F1 = "MacroF1"
    MIN_MAX = "MinMax"
    LINEAR = "LinearCustom"
    RATIO = "RatioOfLinear"


class Smoothness(str, enum.Enum):
    SMOOTH_CONVEX = "SmoothConvex"
    NONSMOOTH_CONVEX = "NonsmoothConvex"
    RATIO = "RatioOfLinear"
    LINEAR = "Linear"


_SMOOTHNESS = {
    MetricKind.ZERO_ONE: Smoothness.LINEAR,
    MetricKind.BALANCED: Smoothness.LINEAR,
    MetricKind.HMEAN: Smoothness.SMOOTH_CONVEX,
    MetricKind.GMEAN: Smoothness.SMOOTH_CONVEX,
    MetricKind.QMEAN: Smoothness.SMOOTH_CONVEX,
    MetricKind.MICRO_F1: Smoothness.RATIO,
    MetricKind.MACRO_F1: None,  # evaluation only
    MetricKind.MIN_MAX: Smoothness.NONSMOOTH_CONVEX,
    MetricKind.LINEAR: Smoothness.LINEAR,
    MetricKind.RATIO: Smoothness.RATIO,
}

_RECALL_KINDS = {
    MetricKind.BALANCED,
    MetricKind.HMEAN,
    MetricKind.GMEAN,
    MetricKind.QMEAN,
    MetricKind.MIN_MAX,
}


def _priors(C, masses):
    if masses is not None:
        return np.broadcast_to(masses.sum(axis=0), C.shape[:-1])
    return C.sum(axis=-1)


def _recall_function(kind, r):
    """Value and derivative of a recall-based metric as a function of the recall vector."""
    n = r.shape[-1]
    if kind is MetricKind.BALANCED:
        return 1.0 - r.mean(axis=-1), np.full(r.shape, -1.0 / n)
    if kind is MetricKind.HMEAN:
        rc = np.maximum(r, EPS)
        s = (1.0 / rc).sum(axis=-1)
        d = -n / (s[..., None] ** 2 * rc**2) * (r > EPS)
        return 1.0 - n / s, d
    if kind is MetricKind.GMEAN:
        rc = np.maximum(r, EPS)
        gm = np.exp(np.log(rc).mean(axis=-1))
        return 1.0 - gm, -gm[..., None] / (n * rc) * (r > EPS)
    err = 1.0 - r
    if kind is MetricKind.QMEAN:
        f = np.sqrt((err**2).mean(axis=-1))
        safe = np.where(f > 0, f, 1.0)[..., None]
        return f, np.where(f[..., None] > 0, -err / (n * safe), 0.0)
    if kind is MetricKind.MIN_MAX:
        f = err.max(axis=-1)
        active = np.isclose(err, f[..., None], rtol=0.0, atol=1e-12)
        return f, -active.astype(float) / active.sum(axis=-1, keepdims=True)
    raise ValueError(kind)


def _micro_f1_coefficients(n, m, k):
    # Table form 1 - 2 sum_{i != k} C_ii / (2 - row_k - col_k) with the constant 2
    # written as 2 * sum(C), so the metric is a ratio of two linear functions.
    B = 2.0 * np.ones((n, n))
    B[k, :] -= 1.0
    B[:, k] -= 1.0
    A = B.copy()
    for i in range(n):
        if i != k:
            A[i, i] -= 2.0
    return np.tile(A.ravel(), m), np.tile(B.ravel(), m)


def _ratio(num, den):
    if np.any(den <= 0):
        raise DegenerateDenominator("ratio metric denominator is not positive")
    return num / den


@dataclass(frozen=True, eq=False)
class Metric:
    """A performance metric psi of the confusion matrix.

    ``coeffs`` (LinearCustom) and ``numerator``/``denominator`` (RatioOfLinear)
    are expressed in the coordinates of the layout the metric is evaluated on.
    """

    kind: MetricKind
    default_class: int = 0
    coeffs: np.ndarray | None = None
    numerator: np.ndarray | None = None
    denominator: np.ndarray | None = None
    lipschitz_hint: float | None = None
    _lipschitz_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", MetricKind(self.kind))
        for name in ("coeffs", "numerator", "denominator"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float).ravel())
        if self.kind is MetricKind.LINEAR and self.coeffs is None:
            raise ValueError("LinearCustom needs coeffs")
        if self.kind is MetricKind.RATIO and (self.numerator is None or self.denominator is None):
            raise ValueError("RatioOfLinear needs numerator and denominator")

    @classmethod
    def zero_one(cls):
        return cls(MetricKind.ZERO_ONE)

    @classmethod
    def balanced(cls):
        return cls(MetricKind.BALANCED)

    @classmethod
    def hmean(cls):
        return cls(MetricKind.HMEAN)

    @classmethod
    def gmean(cls):
        return cls(MetricKind.GMEAN)

    @classmethod
    def qmean(cls):
        return cls(MetricKind.QMEAN)

    @classmethod
    def micro_f1(cls, default_class: int = 0):
        return cls(MetricKind.MICRO_F1, default_class=default_class)

    @classmethod
    def macro_f1(cls):
        return cls(MetricKind.MACRO_F1)

    @classmethod
    def min_max(cls):
        return cls(MetricKind.MIN_MAX)

    @classmethod
    def linear(cls, coeffs, lipschitz_hint=None):
        return cls(MetricKind.LINEAR, coeffs=coeffs, lipschitz_hint=lipschitz_hint)

    @classmethod
    def ratio(cls, numerator, denominator):
        return cls(MetricKind.RATIO, numerator=numerator, denominator=denominator)

    @property
    def smoothness(self) -> Smoothness | None:
        return _SMOOTHNESS[self.kind]

    @property
    def in_layout_space(self) -> bool:
        return self.kind in (MetricKind.LINEAR, MetricKind.RATIO)

    def functionals(self, n: int, m: int, masses=None) -> np.ndarray:
        """Linear functionals of the raw entries this metric depends on."""
        priors = None if masses is None else np.asarray(masses).sum(axis=0)
        if self.kind in _RECALL_KINDS:
            rows = diagonal_rows(n, m, priors)
            return rows if masses is not None else np.vstack([rows, row_sum_rows(n, m)])
        if self.kind is MetricKind.ZERO_ONE:
            return diagonal_rows(n, m).sum(axis=0, keepdims=True)
        if self.kind is MetricKind.MICRO_F1:
            return np.vstack(_micro_f1_coefficients(n, m, self.default_class))
        if self.kind is MetricKind.MACRO_F1:
            return np.vstack([diagonal_rows(n, m), row_sum_rows(n, m), column_sum_rows(n, m)])
        raise ValueError(f"{self.kind.value} is defined on layout entries, not raw entries")

    def raw_values(self, raw, masses=None) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        m, n = raw.shape[-3], raw.shape[-1]
        C = raw.sum(axis=-3)
        if self.kind in _RECALL_KINDS:
            r = np.diagonal(C, axis1=-2, axis2=-1) / np.maximum(_priors(C, masses), EPS)
            return _recall_function(self.kind, r)[0]
        if self.kind is MetricKind.ZERO_ONE:
            return 1.0 - np.trace(C, axis1=-2, axis2=-1)
        if self.kind is MetricKind.MICRO_F1:
            A, B = _micro_f1_coefficients(n, m, self.default_class)
            flat = raw.reshape(raw.shape[:-3] + (-1,))
            return _ratio(flat @ A, flat @ B)
        if self.kind is MetricKind.MACRO_F1:
            diag = np.diagonal(C, axis1=-2, axis2=-1)
            den = np.maximum(C.sum(axis=-1) + C.sum(axis=-2), EPS)
            return 1.0 - (2.0 * diag / den).mean(axis=-1)
        raise ValueError(f"{self.kind.value} is defined on layout entries, not raw entries")

    def raw_gradients(self, raw, masses=None) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        m, n = raw.shape[-3], raw.shape[-1]
        C = raw.sum(axis=-3)
        idx = np.arange(n)
        if self.kind in _RECALL_KINDS:
            diag = np.diagonal(C, axis1=-2, axis2=-1)
            pri = _priors(C, masses)
            live = pri > EPS
            pri = np.maximum(pri, EPS)
            _, d = _recall_function(self.kind, diag / pri)
            dC = np.zeros(C.shape)
            dC[..., idx, idx] = d / pri
            if masses is None:
                dC -= ((d * diag / pri**2) * live)[..., None]
            return np.broadcast_to(dC[..., None, :, :], raw.shape).copy()
        if self.kind is MetricKind.ZERO_ONE:
            dC = np.zeros(C.shape)
            dC[..., idx, idx] = -1.0
            return np.broadcast_to(dC[..., None, :, :], raw.shape).copy()
        if self.kind is MetricKind.MICRO_F1:
            A, B = _micro_f1_coefficients(n, m, self.default_class)
            flat = raw.reshape(raw.shape[:-3] + (-1,))
            num, den = flat @ A, flat @ B
            _ratio(num, den)
            g = (A * den[..., None] - num[..., None] * B) / den[..., None] ** 2
            return g.reshape(raw.shape)
        if self.kind is MetricKind.MACRO_F1:
            raise NotImplementedError("MacroF1 is supported for evaluation only")
        raise ValueError(f"{self.kind.value} is defined on layout entries, not raw entries")

    def bind(self, layout: ConfusionLayout) -> BoundMetric:
        return BoundMetric(self, layout)


class BoundMetric:
    """A metric tied to a layout: values and gradients in layout coordinates."""

    def __init__(self, metric: Metric, layout: ConfusionLayout):
        self.metric = metric
        self.layout = layout
        n, m, d = layout.n_classes, layout.n_groups, layout.dim
        if metric.in_layout_space:
            for v in (metric.coeffs, metric.numerator, metric.denominator):
                if v is not None and v.size != d:
                    raise LayoutMismatch(f"metric coefficients have length {v.size}, layout needs {d}")
            self._lift = None
        else:
            if not layout.represents(metric.functionals(n, m, layout.masses)):
                raise LayoutMismatch(
                    f"{metric.kind.value} needs confusion entries the {layout.representation.value} layout lacks"
                )
            self._lift = layout.lift_affine

    def _raw(self, x):
        x = np.asarray(x, dtype=float)
        if self._lift is not None:
            x = x @ self._lift[0].T + self._lift[1]
        n, m = self.layout.n_classes, self.layout.n_groups
        return x.reshape(x.shape[:-1] + (m, n, n))

    def values(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        mt = self.metric
        if mt.kind is MetricKind.LINEAR:
            return X @ mt.coeffs
        if mt.kind is MetricKind.RATIO:
            return _ratio(X @ mt.numerator, X @ mt.denominator)
        return mt.raw_values(self._raw(X), self.layout.masses)

    def gradients(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        mt = self.metric
        if mt.kind is MetricKind.LINEAR:
            return np.broadcast_to(mt.coeffs, X.shape).copy()
        if mt.kind is MetricKind.RATIO:
            num, den = X @ mt.numerator, X @ mt.denominator
            _ratio(num, den)
            return (mt.numerator * den[..., None] - num[..., None] * mt.denominator) / den[..., None] ** 2
        g = mt.raw_gradients(self._raw(X), self.layout.masses)
        g = g.reshape(g.shape[:-3] + (-1,))
        return g if self._lift is None else g @ self._lift[0]

    def value(self, x) -> float:
        return float(self.values(x))

    def gradient(self, x) -> np.ndarray:
        return self.gradients(x)

    def ratio_coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        """``(A, B)`` in layout coordinates with psi = <A, c>/<B, c> up to constant offsets."""
        mt = self.metric
        if mt.kind is MetricKind.RATIO:
            return mt.numerator, mt.denominator
        if mt.kind is not MetricKind.MICRO_F1:
            raise LayoutMismatch(f"{mt.kind.value} is not a ratio of linear functions")
        A, B = _micro_f1_coefficients(self.layout.n_classes, self.layout.n_groups, mt.default_class)
        if self._lift is None:
            return A, B
        P = self._lift[0]
        return A @ P, B @ P

    @property
    def lipschitz(self) -> float:
        mt = self.metric
        if mt.lipschitz_hint is not None:
            return float(mt.lipschitz_hint)
        if mt.kind is MetricKind.LINEAR:
            return float(np.linalg.norm(mt.coeffs))
        cache = mt._lipschitz_cache
        if self.layout not in cache:
            cache[self.layout] = _estimate_lipschitz(self.gradients, self.layout)
        return cache[self.layout]


def interior_sample(layout: ConfusionLayout, size: int, rng) -> np.ndarray:
    """Random points of the auxiliary domain, shrunk 10% toward its center."""
    d = layout.dim
    if layout.xi_domain == "simplex":
        U, center = rng.dirichlet(np.ones(d), size), 1.0 / d
    else:
        U, center = rng.uniform(size=(size, d)), 0.5
    return center + 0.9 * (U - center)


def _estimate_lipschitz(gradients, layout, size=10_000, seed=0) -> float:
    X = interior_sample(layout, size, np.random.default_rng(seed))
    G = gradients(X)
    G = G.reshape(size, -1, layout.dim)
    return float(max(np.linalg.norm(G, axis=-1).max(), 1e-12))


# --------------------------------------------------------------------------- constraints


class ConstraintKind(str, enum.Enum):
    CLASS_PRECISION = "ClassPrecision"
    COVERAGE = "CoverageBand"
    KLD = "QuantificationKLD"
    DEMOGRAPHIC_PARITY = "DemographicParity"
    EQUAL_OPPORTUNITY = "EqualOpportunity"
    EQUALIZED_ODDS = "EqualizedOdds"
    LINEAR = "LinearCustom"


_NEEDS_MASSES = {
    ConstraintKind.KLD,
    ConstraintKind.DEMOGRAPHIC_PARITY,
    ConstraintKind.EQUAL_OPPORTUNITY,
    ConstraintKind.EQUALIZED_ODDS,
}


@dataclass(frozen=True, eq=False)
class Constraint:
    """A family of scalar constraints phi_k(C) <= 0.

    Two-sided conditions are expanded into one-sided pieces, ordered
    ``(+, -)`` per index so that the piece pairs line up with the target entries.
    """

    kind: ConstraintKind
    target_class: int = 0
    tau: float | np.ndarray | None = None
    eps: float = 0.0
    coeffs: np.ndarray | None = None
    bound: float = 0.0
    lipschitz_hint: float | None = None
    _lipschitz_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", ConstraintKind(self.kind))
        if self.kind is ConstraintKind.COVERAGE:
            object.__setattr__(self, "tau", np.asarray(self.tau, dtype=float).ravel())
        if self.coeffs is not None:
            object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float).ravel())
        if self.kind is ConstraintKind.LINEAR and self.coeffs is None:
            raise ValueError("LinearCustom constraint needs coeffs")

    @classmethod
    def class_precision(cls, target_class: int, tau: float):
        return cls(ConstraintKind.CLASS_PRECISION, target_class=target_class, tau=float(tau))

    @classmethod
    def coverage_band(cls, tau, eps: float = 0.01):
        return cls(ConstraintKind.COVERAGE, tau=tau, eps=eps)

    @classmethod
    def quantification_kld(cls, eps: float):
        return cls(ConstraintKind.KLD, eps=eps)

    @classmethod
    def demographic_parity(cls, eps: float):
        return cls(ConstraintKind.DEMOGRAPHIC_PARITY, eps=eps)

    @classmethod
    def equal_opportunity(cls, eps: float = 0.05, positive_class: int = 1):
        return cls(ConstraintKind.EQUAL_OPPORTUNITY, target_class=positive_class, eps=eps)

    @classmethod
    def equalized_odds(cls, eps: float):
        return cls(ConstraintKind.EQUALIZED_ODDS, eps=eps)

    @classmethod
    def linear(cls, coeffs, bound: float = 0.0):
        return cls(ConstraintKind.LINEAR, coeffs=coeffs, bound=bound)

    @property
    def affine(self) -> bool:
        return self.kind not in (ConstraintKind.CLASS_PRECISION, ConstraintKind.KLD)

    @property
    def in_layout_space(self) -> bool:
        return self.kind is ConstraintKind.LINEAR

    def count(self, n: int, m: int = 1) -> int:
        k = self.kind
        if k in (ConstraintKind.CLASS_PRECISION, ConstraintKind.KLD, ConstraintKind.LINEAR):
            return 1
        if k is ConstraintKind.COVERAGE:
            return 2 * n
        if k is ConstraintKind.DEMOGRAPHIC_PARITY:
            return 2 * m * n
        if k is ConstraintKind.EQUAL_OPPORTUNITY:
            return 2 * m
        return 2 * m * n * n

    def functionals(self, n: int, m: int, masses=None) -> np.ndarray:
        k = self.kind
        if k is ConstraintKind.CLASS_PRECISION:
            i = self.target_class
            return np.vstack([diagonal_rows(n, m)[i], column_sum_rows(n, m)[i]])
        if k in (ConstraintKind.COVERAGE, ConstraintKind.KLD):
            return column_sum_rows(n, m)
        if k is ConstraintKind.DEMOGRAPHIC_PARITY:
            return np.vstack([column_sum_rows(n, m, groupwise=True), column_sum_rows(n, m)])
        if k is ConstraintKind.EQUAL_OPPORTUNITY:
            p = self.target_class
            rows = np.zeros((m, m * n * n))
            for a in range(m):
                rows[a, (a * n + p) * n + p] = 1.0
            return rows
        if k is ConstraintKind.EQUALIZED_ODDS:
            return np.eye(m * n * n)
        raise ValueError("LinearCustom constraints are defined on layout entries")

    def _masses(self, masses):
        if self.kind in _NEEDS_MASSES and masses is None:
            raise LayoutMismatch(f"{self.kind.value} needs group/class masses")
        return masses

    def raw_values(self, raw, masses=None) -> np.ndarray:
        """Piece values with shape ``(..., count)``."""
        raw = np.asarray(raw, dtype=float)
        masses = self._masses(masses)
        m, n = raw.shape[-3], raw.shape[-1]
        C = raw.sum(axis=-3)
        K = C.sum(axis=-2)
        k = self.kind
        if k is ConstraintKind.CLASS_PRECISION:
            i = self.target_class
            v = 1.0 - C[..., i, i] / np.maximum(K[..., i], EPS) - self.tau
            return v[..., None]
        if k is ConstraintKind.COVERAGE:
            return _two_sided(K - self.tau, self.eps)
        if k is ConstraintKind.KLD:
            pi = masses.sum(axis=0)
            pos = pi > 0
            v = (pi[pos] * np.log(pi[pos] / np.maximum(K[..., pos], EPS))).sum(axis=-1)
            return (v - self.eps)[..., None]
        pi = np.maximum(masses.sum(axis=0), EPS)
        mu = np.maximum(masses, EPS)
        if k is ConstraintKind.DEMOGRAPHIC_PARITY:
            Kg = raw.sum(axis=-2)
            diff = Kg / np.maximum(mu.sum(axis=1), EPS)[:, None] - K[..., None, :]
            return _two_sided(diff.reshape(diff.shape[:-2] + (m * n,)), self.eps)
        if k is ConstraintKind.EQUAL_OPPORTUNITY:
            p = self.target_class
            diff = raw[..., :, p, p] / mu[:, p] - (C[..., p, p] / pi[p])[..., None]
            return _two_sided(diff, self.eps)
        if k is ConstraintKind.EQUALIZED_ODDS:
            diff = raw / mu[:, :, None] - (C / pi[:, None])[..., None, :, :]
            return _two_sided(diff.reshape(diff.shape[:-3] + (m * n * n,)), self.eps)
        raise ValueError("LinearCustom constraints are defined on layout entries")

    def raw_jacobians(self, raw, masses=None) -> np.ndarray:
        """Piece gradients with shape ``(..., count, m, n, n)``."""
        raw = np.asarray(raw, dtype=float)
        masses = self._masses(masses)
        m, n = raw.shape[-3], raw.shape[-1]
        batch = raw.shape[:-3]
        C = raw.sum(axis=-3)
        K = C.sum(axis=-2)
        k = self.kind
        if k is ConstraintKind.CLASS_PRECISION:
            i = self.target_class
            Ki = np.maximum(K[..., i], EPS)
            dC = np.zeros(batch + (n, n))
            dC[..., :, i] = (C[..., i, i] / Ki**2)[..., None]
            dC[..., i, i] -= 1.0 / Ki
            return np.broadcast_to(dC[..., None, None, :, :], batch + (1, m, n, n)).copy()
        if k is ConstraintKind.COVERAGE:
            J = np.zeros((2 * n, m, n, n))
            for j in range(n):
                J[2 * j, :, :, j] = 1.0
                J[2 * j + 1, :, :, j] = -1.0
            return np.broadcast_to(J, batch + J.shape).copy()
        if k is ConstraintKind.KLD:
            pi = masses.sum(axis=0)
            dK = -pi / np.maximum(K, EPS)
            return np.broadcast_to(dK[..., None, None, None, :], batch + (1, m, n, n)).copy()
        pi = np.maximum(masses.sum(axis=0), EPS)
        mu = np.maximum(masses, EPS)
        if k is ConstraintKind.DEMOGRAPHIC_PARITY:
            mu_a = np.maximum(mu.sum(axis=1), EPS)
            J = np.zeros((2 * m * n, m, n, n))
            for a in range(m):
                for j in range(n):
                    g = np.zeros((m, n, n))
                    g[:, :, j] = -1.0
                    g[a, :, j] += 1.0 / mu_a[a]
                    J[2 * (a * n + j)] = g
                    J[2 * (a * n + j) + 1] = -g
            return np.broadcast_to(J, batch + J.shape).copy()
        if k is ConstraintKind.EQUAL_OPPORTUNITY:
            p = self.target_class
            J = np.zeros((2 * m, m, n, n))
            for a in range(m):
                g = np.zeros((m, n, n))
                g[:, p, p] = -1.0 / pi[p]
                g[a, p, p] += 1.0 / mu[a, p]
                J[2 * a], J[2 * a + 1] = g, -g
            return np.broadcast_to(J, batch + J.shape).copy()
        if k is ConstraintKind.EQUALIZED_ODDS:
            J = np.zeros((2 * m * n * n, m, n, n))
            for a in range(m):
                for i in range(n):
                    for j in range(n):
                        g = np.zeros((m, n, n))
                        g[:, i, j] = -1.0 / pi[i]
                        g[a, i, j] += 1.0 / mu[a, i]
                        r = (a * n + i) * n + j
                        J[2 * r], J[2 * r + 1] = g, -g
            return np.broadcast_to(J, batch + J.shape).copy()
        raise ValueError("LinearCustom constraints are defined on layout entries")


def _two_sided(diff, eps):
    out = np.empty(diff.shape[:-1] + (2 * diff.shape[-1],))
    out[..., 0::2] = diff - eps
    out[..., 1::2] = -diff - eps
    return out


class BoundConstraints:
    """A list of constraints tied to a layout, flattened into scalar pieces."""

    def __init__(self, constraints, layout: ConfusionLayout):
        self.constraints = list(constraints)
        self.layout = layout
        n, m, d = layout.n_classes, layout.n_groups, layout.dim
        for c in self.constraints:
            if c.in_layout_space:
                if c.coeffs.size != d:
                    raise LayoutMismatch(f"constraint coefficients have length {c.coeffs.size}, layout needs {d}")
            else:
                if c.kind in _NEEDS_MASSES and layout.masses is None:
                    raise LayoutMismatch(f"{c.kind.value} needs group/class masses")
                if not layout.represents(c.functionals(n, m, layout.masses)):
                    raise LayoutMismatch(
                        f"{c.kind.value} needs confusion entries the {layout.representation.value} layout lacks"
                    )
        self._lift = layout.lift_affine
        self.counts = [c.count(n, m) for c in self.constraints]
        self.count = int(sum(self.counts))
        self.affine = all(c.affine for c in self.constraints)

    def __len__(self):
        return self.count

    def _raw(self, x):
        x = np.asarray(x, dtype=float)
        if self._lift is not None:
            x = x @ self._lift[0].T + self._lift[1]
        n, m = self.layout.n_classes, self.layout.n_groups
        return x.reshape(x.shape[:-1] + (m, n, n))

    def values(self, X) -> np.ndarray:
        """Piece values with shape ``(..., K)``."""
        X = np.asarray(X, dtype=float)
        if not self.constraints:
            return np.zeros(X.shape[:-1] + (0,))
        raw = self._raw(X)
        parts = []
        for c in self.constraints:
            if c.in_layout_space:
                parts.append((X @ c.coeffs - c.bound)[..., None])
            else:
                parts.append(c.raw_values(raw, self.layout.masses))
        return np.concatenate(parts, axis=-1)

    def jacobian(self, X) -> np.ndarray:
        """Piece gradients with shape ``(..., K, d)``."""
        X = np.asarray(X, dtype=float)
        d = self.layout.dim
        if not self.constraints:
            return np.zeros(X.shape[:-1] + (0, d))
        raw = self._raw(X)
        parts = []
        for c, cnt in zip(self.constraints, self.counts):
            if c.in_layout_space:
                parts.append(np.broadcast_to(c.coeffs, X.shape[:-1] + (1, d)))
                continue
            J = c.raw_jacobians(raw, self.layout.masses)
            J = J.reshape(J.shape[:-3] + (-1,))
            parts.append(J if self._lift is None else J @ self._lift[0])
        return np.concatenate(parts, axis=-2)

    @property
    def lipschitz(self) -> float:
        """Largest piece Lipschitz constant (hint, exact for affine pieces, or sampled)."""
        best = 0.0
        for c in self.constraints:
            if c.lipschitz_hint is not None:
                best = max(best, float(c.lipschitz_hint))
                continue
            cache = c._lipschitz_cache
            if self.layout not in cache:
                single = BoundConstraints([c], self.layout)
                size = 1 if c.affine else 10_000
                X = interior_sample(self.layout, size, np.random.default_rng(0))
                J = single.jacobian(X)
                cache[self.layout] = float(np.linalg.norm(J, axis=-1).max())
            best = max(best, cache[self.layout])
        return best


# --------------------------------------------------------------------------- functional API


def _with_masses(layout: ConfusionLayout, priors=None, group_masses=None) -> ConfusionLayout:
    if group_masses is not None:
        return layout.with_masses(group_masses)
    if priors is not None:
        if layout.n_groups != 1:
            raise LayoutMismatch("group layouts need group_masses, not priors")
        return layout.with_masses(np.asarray(priors, dtype=float)[None, :])
    return layout


def evaluate_metric(metric: Metric, c: ConfusionVector, priors=None) -> float:
    """psi(C); ``priors`` overrides the class masses carried by the layout."""
    layout = _with_masses(c.layout, priors)
    return BoundMetric(metric, layout).value(c.entries)


def gradient_metric(metric: Metric, c: ConfusionVector, priors=None) -> np.ndarray:
    layout = _with_masses(c.layout, priors)
    return BoundMetric(metric, layout).gradient(c.entries)


def evaluate_constraints(constraints, c: ConfusionVector, priors=None, group_masses=None) -> np.ndarray:
    layout = _with_masses(c.layout, priors, group_masses)
    return BoundConstraints(constraints, layout).values(c.entries)


def subgradient_constraint(constraint: Constraint, c: ConfusionVector, priors=None, group_masses=None) -> np.ndarray:
    """Gradient of each scalar piece of one constraint, shape ``(pieces, d)``."""
    layout = _with_masses(c.layout, priors, group_masses)
    return BoundConstraints([constraint], layout).jacobian(c.entries)


def balanced_loss(priors) -> np.ndarray:
    """Flattened cost matrix ``1(i != j) / (n * pi_i)`` of the balanced error."""
    priors = np.asarray(priors, dtype=float)
    n = priors.size
    return ((1.0 - np.eye(n)) / (n * priors[:, None])).ravel()


def zero_one_loss(n: int) -> np.ndarray:
    return (1.0 - np.eye(n)).ravel()


def choose_layout(metric: Metric, constraints=(), n: int = 2, m: int = 1, masses=None) -> ConfusionLayout:
    """Smallest convenient layout that carries everything the metric and constraints read.

    The diagonal layout when it suffices, the full layout for ratio metrics and
    metrics given in layout coordinates, otherwise a generalized layout spanned
    by a linearly independent subset of the functionals involved.
    """
    if masses is not None:
        masses = np.atleast_2d(np.asarray(masses, dtype=float))
    full = ConfusionLayout.full(n, m, masses)
    constraints = list(constraints or ())
    if metric.in_layout_space or any(c.in_layout_space for c in constraints):
        return full
    if metric.smoothness is Smoothness.RATIO or masses is None:
        return full
    rows = [metric.functionals(n, m, masses)] + [c.functionals(n, m, masses) for c in constraints]
    F = np.vstack(rows)
    if np.all(masses > 0):
        diag = ConfusionLayout.diagonal(masses)
        if diag.represents(F):
            return diag
    basis = []
    for row in F:
        trial = np.vstack(basis + [row])
        if np.linalg.matrix_rank(trial, tol=1e-10) == len(trial):
            basis.append(row)
    if len(basis) >= full.dim:
        return full
    return ConfusionLayout.generalized(np.array(basis), n, m, masses)
