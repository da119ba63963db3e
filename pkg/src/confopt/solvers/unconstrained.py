"""Solvers for unconstrained minimization of a confusion-matrix metric.

Every solver takes a metric and an LMO: a callable mapping a loss vector in the
LMO's layout to an ``LmoResult``. The achievable confusion set is only ever
accessed through that oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..confusion import ConfusionVector
from ..errors import NumericalFailure, ZeroCutDirection
from ..inner import minimize_over_hull, minimize_xi, project_ball, project_box, project_simplex
from .common import RandomizedClassifier, SolverTrace, TraceRecord, bind_metric, normalized


def frank_wolfe(psi, lmo, T: int = 5000) -> tuple[RandomizedClassifier, SolverTrace]:
    """Conditional gradient over achievable confusions with step ``2/(t+1)``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    bm = bind_metric(psi, lmo.layout)
    zero_one = lmo.layout.zero_one_direction()
    C = lmo(zero_one).confusion
    calls = 1
    members, gammas = [], []
    trace = SolverTrace()
    for t in range(1, T + 1):
        g = bm.gradient(C)
        if not np.all(np.isfinite(g)):
            raise NumericalFailure("non-finite gradient", t)
        res = lmo(normalized(g, np.inf, zero_one))
        calls += 1
        gamma = 2.0 / (t + 1)
        C = (1 - gamma) * C + gamma * res.confusion
        members.append(res.classifier)
        gammas.append(gamma)
        trace.append(TraceRecord(t, calls, bm.value(C)))
    weights = fw_weights(gammas)
    trace.final_confusion = ConfusionVector(lmo.layout, C)
    return RandomizedClassifier(members, weights), trace


def fw_weights(gammas) -> np.ndarray:
    """Member weights ``gamma_t * prod_{s>t} (1 - gamma_s)`` of a Frank-Wolfe mixture."""
    g = np.asarray(gammas, dtype=float)
    keep = np.append(np.cumprod((1 - g)[::-1])[::-1][1:], 1.0)
    return g * keep


def gda(psi, lmo, T: int = 5000, L: float | None = None, lambda_radius: float | None = None,
        eta: float | None = None, eta_dual: float | None = None) -> tuple[RandomizedClassifier, SolverTrace]:
    """Gradient descent-ascent on the Lagrangian ``psi(xi) + <lam, C - xi>``; returns the uniform mixture."""
    if T < 1:
        raise ValueError("T must be at least 1")
    layout = lmo.layout
    bm = bind_metric(psi, layout)
    L = bm.lipschitz if L is None else L
    radius = 2 * L if lambda_radius is None else lambda_radius
    eta = 1 / (4 * L * math.sqrt(2 * T)) if eta is None else eta
    eta_dual = 4 * L / math.sqrt(2 * T) if eta_dual is None else eta_dual
    project_xi = project_simplex if layout.xi_domain == "simplex" else project_box
    zero_one = layout.zero_one_direction()
    d = layout.dim
    xi = np.full(d, 1.0 / d) if layout.xi_domain == "simplex" else np.full(d, 0.5)
    lam = np.zeros(d)
    members = []
    C_sum = np.zeros(d)
    trace = SolverTrace()
    for t in range(1, T + 1):
        res = lmo(normalized(lam, np.inf, zero_one))
        C = res.confusion
        members.append(res.classifier)
        C_sum += C
        grad_xi = bm.gradient(xi) - lam
        if not np.all(np.isfinite(grad_xi)):
            raise NumericalFailure("non-finite gradient", t)
        xi, lam = project_xi(xi - eta * grad_xi), project_ball(lam + eta_dual * (C - xi), radius)
        trace.append(TraceRecord(t, t, bm.value(C_sum / t), dual_norm=float(np.linalg.norm(lam))))
    trace.final_confusion = ConfusionVector(layout, C_sum / T)
    trace.info.update(L=L, lambda_radius=radius, eta=eta, eta_dual=eta_dual)
    return RandomizedClassifier(members, np.full(T, 1.0 / T)), trace


# below this semi-axis length the centre no longer moves in floating point
_COLLAPSED = 1e-10
# eigenvalue ratio at which the shape matrix stops being reliably positive definite
_THIN = 1e-14


@dataclass(frozen=True)
class EllipsoidState:
    """Ellipsoid ``{x : (x - center)^T shape^{-1} (x - center) <= 1}``."""

    center: np.ndarray
    shape: np.ndarray
    radius: float | None = None

    @classmethod
    def ball(cls, dim: int, radius: float) -> EllipsoidState:
        return cls(np.zeros(dim), radius**2 * np.eye(dim), radius)

    def _eig(self):
        vals, vecs = np.linalg.eigh(self.shape)
        if not np.all(np.isfinite(vals)) or vals.min() <= 0:
            raise NumericalFailure("ellipsoid shape matrix is not positive definite")
        return vals, vecs

    def sqrt_shape(self) -> np.ndarray:
        vals, vecs = self._eig()
        return (vecs * np.sqrt(vals)) @ vecs.T

    def log_volume(self) -> float:
        """Log volume up to the unit-ball constant: half the log-determinant of the shape."""
        return 0.5 * float(np.log(self._eig()[0]).sum())

    def max_semi_axis(self) -> float:
        return float(np.sqrt(self._eig()[0].max()))

    def collapsed(self) -> bool:
        """True once the ellipsoid is too thin to cut further in floating point."""
        vals = np.linalg.eigvalsh(self.shape)
        if not np.all(np.isfinite(vals)) or vals.max() <= 0:
            return True
        return bool(vals.max() < _COLLAPSED**2 or vals.min() <= _THIN * vals.max())

    def contains(self, X) -> np.ndarray:
        D = np.atleast_2d(X) - self.center
        return np.einsum("ij,ij->i", D @ np.linalg.inv(self.shape), D) <= 1 + 1e-9


def jle(state: EllipsoidState, w) -> EllipsoidState:
    """Minimum-volume ellipsoid containing ``state`` intersected with ``{x : <x - center, w> >= 0}``."""
    w = np.asarray(w, dtype=float)
    if not np.any(w):
        raise ZeroCutDirection("cut direction is zero")
    m = w.size
    root = state.sqrt_shape()
    u = root @ w
    nu = np.linalg.norm(u)
    if nu == 0 or not np.isfinite(nu):
        raise NumericalFailure("degenerate cut direction")
    u /= nu
    t = 1.0 / (m + 1)
    a = 1.0 / (1 - t) ** 2
    P = np.outer(u, u)
    if m == 1:
        B = P / a
    else:
        b = (m * m - 1.0) / (m * m)
        B = P / a + (np.eye(m) - P) / b
    shape = root @ B @ root
    shape = 0.5 * (shape + shape.T)
    return EllipsoidState(state.center + t * (root @ u), shape, state.radius)


def ellipsoid(psi, lmo, T: int = 1000, a: float = 1000.0, xi_budget: int = 1000,
              hull_budget: int = 1000, max_lmo_calls: int | None = None) -> tuple[RandomizedClassifier, SolverTrace]:
    """Central-cut ellipsoid method on the dual; final weights from a convex fit over stored confusions.

    ``T`` caps the iterations. With ``max_lmo_calls`` the run also stops once
    that many LMO calls have been made; cuts taken outside the ball cost none.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    layout = lmo.layout
    bm = bind_metric(psi, layout)
    zero_one = layout.zero_one_direction()
    state = EllipsoidState.ball(layout.dim, a)
    members, confusions = [], []
    h0 = C0 = None
    calls = 0
    trace = SolverTrace()
    for t in range(T):
        lam = state.center
        if np.linalg.norm(lam) > a:
            h, C = h0, C0
            cut = -lam
        else:
            res = lmo(lam if np.any(lam) else zero_one)
            calls += 1
            h, C = res.classifier, res.confusion
            if h0 is None:
                h0, C0 = h, C
            xi = minimize_xi(bm, lam, budget=xi_budget)
            cut = C - xi
        members.append(h)
        confusions.append(C)
        trace.append(TraceRecord(t, calls, bm.value(C), log_volume=state.log_volume()))
        if not np.any(cut) or (max_lmo_calls is not None and calls >= max_lmo_calls):
            break
        try:
            nxt = jle(state, cut)
        except NumericalFailure as exc:
            raise NumericalFailure(str(exc), t) from None
        if nxt.collapsed():
            break
        state = nxt
    hull = minimize_over_hull(bm, confusions, budget=hull_budget)
    final = hull.weights @ np.array(confusions)
    trace.final_confusion = ConfusionVector(layout, final)
    trace.info["hull_objective"] = hull.objective
    return RandomizedClassifier(members, hull.weights).support(), trace


def bisection(psi, lmo, T: int = 20):
    """Bisection on the optimal value of a ratio-of-linear metric; returns a deterministic classifier."""
    layout = lmo.layout
    bm = bind_metric(psi, layout)
    A, B = bm.ratio_coefficients()
    res = lmo(layout.zero_one_direction())
    h, C = res.classifier, res.confusion
    calls = 1
    lo, hi = 0.0, 1.0
    trace = SolverTrace()
    for t in range(1, T + 1):
        gamma = (lo + hi) / 2
        direction = normalized(A - gamma * B, 2, layout.zero_one_direction())
        res = lmo(direction)
        calls += 1
        value = bm.value(res.confusion)
        if value <= gamma:
            hi = gamma
            h, C = res.classifier, res.confusion
        else:
            lo = gamma
        trace.append(TraceRecord(t, calls, bm.value(C), extras={"alpha": lo, "beta": hi, "gamma": gamma}))
    trace.final_confusion = ConfusionVector(layout, C)
    return h, trace
