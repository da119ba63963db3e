"""Exhaustive and grid-search reference solutions for small problems.

These routines are independent of the iterative solvers and exist to check
them: exact linear minimization by enumerating every deterministic labelling of
a finite support, weighted-argmax grid searches for Bayes-optimal classifiers,
and constrained optima over mixtures of two grid classifiers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .confusion import ConfusionLayout, ConfusionVector
from .data import Dataset, SyntheticSpec, exact_eta, sample_synthetic
from .errors import BudgetExceeded, InfeasibleAtGridResolution, InvalidData
from .metrics import BoundConstraints, BoundMetric
from .oracle import LmoResult, raw_confusion_from_predictions

ENUMERATION_LIMIT = 10**7
FEAS_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Finite-support distribution with exact class probabilities at every support point."""

    points: np.ndarray
    mass: np.ndarray
    eta: np.ndarray
    groups: np.ndarray | None = None
    n_groups: int = 1

    def __post_init__(self):
        P = np.asarray(self.points, dtype=float)
        if P.ndim == 1:
            P = P[:, None]
        mass = np.asarray(self.mass, dtype=float)
        eta = np.asarray(self.eta, dtype=float)
        if mass.shape != (P.shape[0],) or eta.shape[0] != P.shape[0]:
            raise InvalidData("need one mass and one class-probability vector per point")
        if np.any(mass < 0) or abs(mass.sum() - 1) > 1e-9:
            raise InvalidData("masses must be nonnegative and sum to 1")
        if np.any(eta < 0) or np.any(np.abs(eta.sum(axis=1) - 1) > 1e-9):
            raise InvalidData("class probabilities must lie in the simplex")
        if len({tuple(p) for p in P}) != P.shape[0]:
            raise InvalidData("support points must be distinct")
        object.__setattr__(self, "points", P)
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "eta", eta)
        if self.groups is not None:
            g = np.asarray(self.groups, dtype=np.int64)
            if g.shape != mass.shape or g.min() < 0 or g.max() >= self.n_groups:
                raise InvalidData("groups must index [0, n_groups) once per point")
            object.__setattr__(self, "groups", g)

    @property
    def n_classes(self) -> int:
        return self.eta.shape[1]

    @property
    def size(self) -> int:
        return self.mass.size

    def as_dataset(self) -> Dataset:
        """Weighted, soft-labelled dataset whose empirical confusions are the exact population ones."""
        return Dataset(self.points, np.argmax(self.eta, axis=1), self.n_classes, groups=self.groups,
                       n_groups=self.n_groups, weights=self.mass, label_probs=self.eta)

    def group_class_masses(self) -> np.ndarray:
        g = self.groups if self.groups is not None else np.zeros(self.size, dtype=np.int64)
        out = np.zeros((self.n_groups, self.n_classes))
        np.add.at(out, g, self.mass[:, None] * self.eta)
        return out

    def layout(self) -> ConfusionLayout:
        return ConfusionLayout.full(self.n_classes, self.n_groups, masses=self.group_class_masses())

    def raw_confusion(self, assignment) -> np.ndarray:
        """Exact ``(m, n, n)`` confusion of the labelling ``assignment`` (one class per point)."""
        return raw_confusion_from_predictions(np.asarray(assignment), self.as_dataset(), self.n_groups)

    def model(self) -> TabulatedModel:
        return TabulatedModel(self.points, self.eta)


class TabulatedModel:
    """Class-probability model that looks up the exact probabilities of known support points."""

    def __init__(self, points, eta):
        self.points = np.asarray(points, dtype=float)
        self.eta = np.asarray(eta, dtype=float)
        self.n_classes = self.eta.shape[1]

    def index(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.points.shape[1])
        d = np.abs(X[:, None, :] - self.points[None, :, :]).max(axis=2)
        idx = np.argmin(d, axis=1)
        if np.any(d[np.arange(X.shape[0]), idx] > 1e-12):
            raise InvalidData("point outside the tabulated support")
        return idx

    def predict_proba(self, X) -> np.ndarray:
        return self.eta[self.index(X)]

    def to_dict(self) -> dict:
        return {"type": "tabulated", "points": self.points.tolist(), "eta": self.eta.tolist()}


class TabulatedClassifier:
    """Deterministic classifier given by one label per support point."""

    def __init__(self, dist: DiscreteDistribution, assignment):
        self.dist = dist
        self.assignment = np.asarray(assignment, dtype=np.int64)
        self._model = dist.model()

    @property
    def n_classes(self) -> int:
        return self.dist.n_classes

    @property
    def n_groups(self) -> int:
        return self.dist.n_groups

    def predict(self, X, groups=None) -> np.ndarray:
        return self.assignment[self._model.index(X)]

    def raw_confusion(self, sample: Dataset, eta=None) -> np.ndarray:
        return raw_confusion_from_predictions(self.predict(sample.features), sample, self.n_groups)

    def to_dict(self) -> dict:
        return {"type": "tabulated", "assignment": self.assignment.tolist()}


def _point_costs(raw_loss, dist: DiscreteDistribution) -> np.ndarray:
    n, m = dist.n_classes, dist.n_groups
    L = np.asarray(raw_loss, dtype=float).reshape(m, n, n)
    g = dist.groups if dist.groups is not None else np.zeros(dist.size, dtype=np.int64)
    return dist.mass[:, None] * np.einsum("ki,kij->kj", dist.eta, L[g])


def enumerate_lmo(raw_loss, dist: DiscreteDistribution):
    """Best deterministic labelling for a raw loss by full enumeration.

    Returns ``(assignment, raw confusion, value)``; ties go to the
    lexicographically smallest assignment.
    """
    n, k = dist.n_classes, dist.size
    if n**k > ENUMERATION_LIMIT:
        raise BudgetExceeded(f"{n}^{k} labellings exceed the enumeration limit")
    costs = _point_costs(raw_loss, dist)
    total = np.zeros(())
    for row in costs:
        total = np.add.outer(total, row)
    flat = int(np.argmin(total.ravel()))
    assignment = np.array(np.unravel_index(flat, (n,) * k)).ravel()
    return assignment, dist.raw_confusion(assignment), float(total.ravel()[flat])


def all_assignments(dist: DiscreteDistribution) -> np.ndarray:
    n, k = dist.n_classes, dist.size
    if n**k > ENUMERATION_LIMIT:
        raise BudgetExceeded(f"{n}^{k} labellings exceed the enumeration limit")
    return np.array(list(itertools.product(range(n), repeat=k)), dtype=np.int64).reshape(-1, k)


def enumerate_confusions(dist: DiscreteDistribution) -> tuple[np.ndarray, np.ndarray]:
    """Every deterministic labelling and its exact raw confusion, shape ``(n^k, m, n, n)``."""
    A = all_assignments(dist)
    n, m = dist.n_classes, dist.n_groups
    g = dist.groups if dist.groups is not None else np.zeros(dist.size, dtype=np.int64)
    # contribution of point x labelled j: mass_x * eta_x[i] at (g_x, i, j)
    contrib = dist.mass[:, None] * dist.eta  # (k, n)
    out = np.zeros((A.shape[0], m, n, n))
    for x in range(dist.size):
        out[np.arange(A.shape[0]), g[x], :, A[:, x]] += contrib[x]
    return A, out


class EnumerationOracle:
    """Exact LMO on a discrete distribution by enumerating all labellings."""

    def __init__(self, dist: DiscreteDistribution, layout: ConfusionLayout | None = None):
        self.dist = dist
        self.layout = layout or dist.layout()
        self.sample = dist.as_dataset()
        self.calls = 0

    def __call__(self, loss) -> LmoResult:
        self.calls += 1
        raw_loss = self.layout.to_raw_loss(loss)
        assignment, raw, _ = enumerate_lmo(raw_loss, self.dist)
        return LmoResult(TabulatedClassifier(self.dist, assignment),
                         ConfusionVector(self.layout, self.layout.forward(raw)), self.dist.size)

    def confusion_of(self, classifier) -> ConfusionVector:
        raw = classifier.raw_confusion(self.sample)
        return ConfusionVector(self.layout, self.layout.forward(raw))


def deterministic_optimum(psi, dist: DiscreteDistribution, layout: ConfusionLayout | None = None):
    """Smallest metric value over deterministic labellings (the optimum for ratio-of-linear metrics)."""
    layout = layout or dist.layout()
    bm = psi if isinstance(psi, BoundMetric) else psi.bind(layout)
    A, raw = enumerate_confusions(dist)
    X = layout.forward(raw)
    with np.errstate(all="ignore"):
        vals = np.array([_safe_value(bm, x) for x in X])
    k = int(np.argmin(vals))
    return float(vals[k]), A[k], X[k]


def _safe_value(bm, x):
    try:
        return bm.value(x)
    except ArithmeticError:
        return np.inf


# --------------------------------------------------------------------------- grid search


def weighted_argmax(eta, w) -> np.ndarray:
    """``argmax_i w_i eta_i(x)`` with ties going to the larger class index."""
    s = np.asarray(eta) * np.asarray(w)
    n = s.shape[-1]
    return n - 1 - np.argmax(s[..., ::-1], axis=-1)


def weight_grid(step: float, w_max: float = 10.0) -> np.ndarray:
    return np.round(np.arange(0.0, w_max + step / 2, step), 12)


@dataclass(frozen=True)
class GridResult:
    weights: np.ndarray
    value: float
    confusion: np.ndarray


def monte_carlo_sample(spec: SyntheticSpec, n_samples: int = 10**6, seed: int = 0) -> Dataset:
    """Seeded sample with exact soft labels, used as a stand-in for the population."""
    return sample_synthetic(spec, n_samples, seed=seed, soft_labels=True)


def _population(source, n_samples, seed):
    if isinstance(source, DiscreteDistribution):
        return source.eta, source.mass, source.eta
    data = monte_carlo_sample(source, n_samples, seed)
    return data.label_probs, data.row_weights(), data.label_probs


def grid_confusions(source, step: float = 0.02, w_max: float = 10.0, n_samples: int = 10**6, seed: int = 0):
    """Confusions of every weighted-argmax classifier on the grid (first weight fixed at 1).

    Returns ``(weights, confusions)`` with shapes ``(G, n)`` and ``(G, n, n)``.
    """
    eta, mass, soft = _population(source, n_samples, seed)
    n = eta.shape[1]
    grid = weight_grid(step, w_max)
    if n == 1:
        return np.ones((1, 1)), np.ones((1, 1, 1))
    if n > 3:
        raise BudgetExceeded("grid search supports at most 3 classes")
    if isinstance(source, DiscreteDistribution):
        W = np.array([(1.0,) + w for w in itertools.product(grid, repeat=n - 1)])
        preds = weighted_argmax(eta[None, :, :], W[:, None, :])  # (G, k)
        contrib = mass[:, None] * soft
        C = np.zeros((W.shape[0], n, n))
        for x in range(eta.shape[0]):
            C[np.arange(W.shape[0]), :, preds[:, x]] += contrib[x]
        return W, C
    contrib = mass[:, None] * soft
    if n == 2:
        return np.column_stack([np.ones(grid.size), grid]), _sweep(eta[:, 0], eta[:, 1], contrib, grid, 0, True)
    Ws, Cs = [], []
    for w2 in grid:
        m2 = w2 * eta[:, 2]
        base2 = m2 >= eta[:, 0]
        C = np.zeros((grid.size, n, n))
        if base2.any():
            # class 2 until w1*eta1 strictly exceeds w2*eta2
            C += _sweep(m2[base2], eta[base2, 1], contrib[base2], grid, 2, False)
        if (~base2).any():
            # class 0 until w1*eta1 reaches eta0
            C += _sweep(eta[~base2, 0], eta[~base2, 1], contrib[~base2], grid, 0, True)
        Ws.append(np.column_stack([np.ones(grid.size), grid, np.full(grid.size, w2)]))
        Cs.append(C)
    return np.vstack(Ws), np.concatenate(Cs)


def _sweep(rival, eta1, contrib, grid, base, inclusive):
    """Confusions as ``w1`` sweeps the grid: a point moves from ``base`` to class 1 once ``w1*eta1`` beats ``rival``."""
    n = contrib.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        thr = np.where(eta1 > 0, rival / eta1, np.inf)
    order = np.argsort(thr, kind="stable")
    thr = thr[order]
    cum = np.vstack([np.zeros(n), np.cumsum(contrib[order], axis=0)])
    side = "right" if inclusive else "left"
    k = np.searchsorted(thr, grid, side=side)  # points switched to class 1
    total = cum[-1]
    C = np.zeros((grid.size, n, n))
    C[:, :, 1] = cum[k]
    C[:, :, base] += total - cum[k]
    return C


def grid_bayes(psi, source, step: float = 0.02, w_max: float = 10.0, n_samples: int = 10**6,
               seed: int = 0) -> GridResult:
    """Best weighted-argmax classifier on the weight grid for the metric ``psi``."""
    W, C = grid_confusions(source, step, w_max, n_samples, seed)
    masses = C[0].sum(axis=1)
    layout = ConfusionLayout.full(C.shape[1], masses=masses)
    bm = psi.bind(layout)
    with np.errstate(all="ignore"):
        vals = bm.values(C.reshape(C.shape[0], -1))
    k = int(np.argmin(vals))
    return GridResult(W[k], float(vals[k]), C[k])


def constrained_grid_optimum(psi, constraints, source, step: float = 0.5, w_max: float = 10.0,
                             mix_steps: int = 20, n_samples: int = 10**6, seed: int = 0):
    """Best feasible mixture ``(1 - s) C[h_a] + s C[h_b]`` of two grid classifiers.

    Feasibility uses the tolerance ``1e-6`` on the constraint values. For affine
    constraints the feasible range of ``s`` is found exactly and the mixing grid
    is laid over that range; otherwise ``s`` runs over ``[0, 1]``. Returns
    ``(value, confusion, (weights_a, weights_b, s))``.
    """
    W, C = grid_confusions(source, step, w_max, n_samples, seed)
    layout = ConfusionLayout.full(C.shape[1], masses=C[0].sum(axis=1))
    flat = C.reshape(C.shape[0], -1)
    value, x, (a, b, s) = mixture_optimum(psi, constraints, flat, layout, mix_steps)
    return value, x, (W[a], W[b], s)


def mixture_optimum(psi, constraints, confusions, layout: ConfusionLayout, mix_steps: int = 100,
                    chunk: int = 2**16):
    """Best feasible two-point mixture of the given confusions (layout coordinates).

    Returns ``(value, confusion, (index_a, index_b, s))``.
    """
    bm = psi if isinstance(psi, BoundMetric) else psi.bind(layout)
    bc = constraints if isinstance(constraints, BoundConstraints) else BoundConstraints(list(constraints or []), layout)
    P = np.asarray(confusions, dtype=float)
    _, first = np.unique(P, axis=0, return_index=True)
    first = np.sort(first)
    G = P[first]
    phi = bc.values(G) if len(bc) else np.zeros((G.shape[0], 0))
    affine = bc.affine if len(bc) else True
    frac = np.linspace(0.0, 1.0, mix_steps + 1)
    ia, ib = np.triu_indices(G.shape[0])
    best = (np.inf, None, None)
    for start in range(0, ia.size, chunk):
        a, b = ia[start:start + chunk], ib[start:start + chunk]
        if affine:
            lo, hi = _feasible_interval(phi[a], phi[b])
            live = lo <= hi
            a, b, lo, hi = a[live], b[live], lo[live], hi[live]
            if a.size == 0:
                continue
            S = lo[:, None] + (hi - lo)[:, None] * frac[None, :]
        else:
            S = np.broadcast_to(frac, (a.size, frac.size))
        X = (1 - S)[:, :, None] * G[a][:, None, :] + S[:, :, None] * G[b][:, None, :]
        X = X.reshape(-1, G.shape[1])
        ok = bc.values(X).max(axis=1) <= FEAS_TOL if len(bc) else np.ones(X.shape[0], dtype=bool)
        if not ok.any():
            continue
        with np.errstate(all="ignore"):
            vals = np.where(ok, bm.values(X), np.inf)
        k = int(np.argmin(vals))
        if vals[k] < best[0]:
            p, q = divmod(k, frac.size)
            best = (float(vals[k]), X[k], (int(first[a[p]]), int(first[b[p]]), float(S[p, q])))
    if best[1] is None:
        raise InfeasibleAtGridResolution("no grid mixture satisfies the constraints")
    return best


def _feasible_interval(phi_a, phi_b):
    """Range of ``s`` in [0, 1] with ``(1 - s) phi_a + s phi_b <= tol`` for affine pieces."""
    lo = np.zeros(phi_a.shape[0])
    hi = np.ones(phi_a.shape[0])
    if phi_a.shape[1] == 0:
        return lo, hi
    slope = phi_b - phi_a
    room = FEAS_TOL - phi_a
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = room / slope
    up = slope > 0
    down = slope < 0
    hi = np.minimum(hi, np.where(up, bound, np.inf).min(axis=1))
    lo = np.maximum(lo, np.where(down, bound, -np.inf).max(axis=1))
    flat_bad = (~up & ~down & (room < 0)).any(axis=1)
    hi[flat_bad] = -1.0
    return lo, hi


# --------------------------------------------------------------------------- discretization


def discretize(spec: SyntheticSpec, bins: int = 50, low: float = -4.0, high: float = 4.0) -> DiscreteDistribution:
    """Finite-support version of a one-dimensional synthetic distribution.

    Each bin (the two outer ones reaching to infinity) becomes a support point
    at its midpoint carrying the bin's probability and class posterior.
    """
    if spec.dim != 1:
        raise InvalidData("only one-dimensional distributions can be discretized")
    edges = np.linspace(low, high, bins + 1)
    cdf_edges = np.concatenate([[-np.inf], edges[1:-1], [np.inf]])
    joint = np.zeros((bins, spec.n_classes))
    for i, (prior, comp) in enumerate(zip(spec.priors, spec.components)):
        if comp.kind == "normal":
            dist = stats.norm(comp.mean[0], np.sqrt(comp.cov[0][0]))
        else:
            dist = stats.uniform(comp.low[0], comp.high[0] - comp.low[0])
        joint[:, i] = prior * np.diff(dist.cdf(cdf_edges))
    mass = joint.sum(axis=1)
    keep = mass > 0
    points = 0.5 * (edges[:-1] + edges[1:])
    eta = joint[keep] / mass[keep, None]
    return DiscreteDistribution(points[keep], mass[keep] / mass[keep].sum(), eta)


def exact_confusion_of_weights(spec: SyntheticSpec, w, X) -> np.ndarray:
    """Soft-label confusion of a weighted-argmax rule on the points ``X`` (uniform weights)."""
    eta, _ = exact_eta(spec, X)
    pred = weighted_argmax(eta, w)
    n = eta.shape[1]
    C = np.zeros((n, n))
    np.add.at(C.T, pred, eta / len(X))
    return C
