"""Solvers for metric minimization subject to confusion-matrix constraints ``phi_k(C) <= 0``."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ..confusion import ConfusionVector, row_sum_rows
from ..errors import NumericalFailure, StrictFeasibilityUnknown
from ..inner import (
    linear_min_over_feasible,
    minimize_over_hull,
    minimize_xi,
    project_ball,
    project_box,
    prune_mixture,
)
from ..metrics import Metric
from ..oracle import ConstantClassifier
from .common import RandomizedClassifier, SolverTrace, TraceRecord, bind_constraints, bind_metric, normalized
from .unconstrained import EllipsoidState, fw_weights, jle


@dataclass(frozen=True)
class FeasibilityConfig:
    """Strict-feasibility radius ``r``, augmented-Lagrangian weight ``zeta`` and optional step sizes."""

    r: float = 0.05
    zeta: float = 10.0
    eta_lambda: float | None = None
    eta_mu: float | None = None
    eta_xi: float | None = None
    initial_feasible: object = None

    def __post_init__(self):
        if self.r <= 0 or self.zeta <= 0:
            raise ValueError("r and zeta must be positive")


def _violation(bc, C) -> float:
    if len(bc) == 0:
        return 0.0
    return max(float(bc.values(C).max()), 0.0)


def mass_slice(layout):
    """Row-sum identities ``R @ F = masses`` every achievable confusion obeys, for identity layouts."""
    if not layout.is_identity or layout.masses is None:
        return None
    return row_sum_rows(layout.n_classes, layout.n_groups, groupwise=True), layout.masses.ravel()


def split_fw(psi, constraints, lmo, T: int = 10000, zeta: float = 10.0, eta_schedule=(0.5, 0.1, 0.001),
             line_search: bool = False, prune: bool = True) -> tuple[RandomizedClassifier, SolverTrace]:
    """Frank-Wolfe on the augmented Lagrangian of ``psi(C) + psi(F)`` with ``C = F``, ``F`` feasible.

    ``C`` moves through LMO calls, ``F`` through linear minimization over the
    explicitly feasible set. When the layout knows the class masses, ``F`` is
    also held to the row sums every achievable confusion has. The returned
    iterate has the smallest ``||C - F||^2`` over the second half of the run;
    with ``prune`` its members are then re-weighted by the linearized pruning
    program so that the constraints hold on the sample whenever they can.
    """
    if T < 2:
        raise ValueError("T must be at least 2")
    layout = lmo.layout
    bm = bind_metric(psi, layout)
    bc = bind_constraints(constraints, layout)
    domain = layout.xi_domain
    slice_ = mass_slice(layout)
    res = lmo(layout.zero_one_direction())
    C = res.confusion
    members = [res.classifier]
    F = linear_min_over_feasible(bm.gradient(C), bc, domain, equalities=slice_)
    lam = np.zeros(layout.dim)
    calls = 1
    gammas, residuals, Cs = [], [], []
    grid = np.linspace(0.0, 1.0, 101)
    trace = SolverTrace()
    for t in range(1, T + 1):
        diff = C - F
        a = bm.gradient(C) + lam + zeta * diff
        b = bm.gradient(F) - lam - zeta * diff
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise NumericalFailure("non-finite gradient", t)
        res = lmo(normalized(a, 2, layout.zero_one_direction()))
        calls += 1
        F_new = linear_min_over_feasible(b, bc, domain, equalities=slice_)
        if line_search:
            Cg = (1 - grid)[:, None] * C + grid[:, None] * res.confusion
            Fg = (1 - grid)[:, None] * F + grid[:, None] * F_new
            D = Cg - Fg
            aug = bm.values(Cg) + bm.values(Fg) + D @ lam + 0.5 * zeta * (D**2).sum(axis=1)
            gamma = float(grid[int(np.argmin(aug))])
        else:
            gamma = 2.0 / (t + 2)
        C = (1 - gamma) * C + gamma * res.confusion
        F = (1 - gamma) * F + gamma * F_new
        eta = eta_schedule[min(3 * (t - 1) // T, 2)]
        lam = lam + (eta / t) * (C - F)
        members.append(res.classifier)
        gammas.append(gamma)
        residuals.append(float(((C - F) ** 2).sum()))
        Cs.append(C)
        trace.append(TraceRecord(t, calls, bm.value(C), _violation(bc, C), float(np.linalg.norm(lam)),
                                 extras={"residual": residuals[-1], "F_violation": _violation(bc, F)}))
    start = T // 2  # index of t = T//2 + 1
    t_star = start + int(np.argmin(residuals[start:]))
    g = np.array(gammas[: t_star + 1])
    weights = np.concatenate([[np.prod(1 - g)], fw_weights(g)])
    kept = members[: t_star + 2]
    C_star = Cs[t_star]
    if prune:
        conf = np.array([lmo.confusion_of(h).entries for h in kept])
        weights = prune_mixture(bm, bc, conf).weights
        C_star = weights @ conf
    trace.final_confusion = ConfusionVector(layout, C_star)
    trace.info["t_star"] = t_star + 1
    return RandomizedClassifier(kept, weights).support(), trace


def con_gda(psi, constraints, lmo, T: int = 10000, L: float | None = None, r: float = 0.05,
            eta: float | None = None, eta_dual: float | None = None, prune: bool = True,
            check_invariants: bool = False) -> tuple[RandomizedClassifier, SolverTrace]:
    """Gradient descent-ascent on ``psi(xi) + <lam, C - xi> + <mu, phi(xi)>``.

    ``xi`` lives in the unit box, ``lam`` in an l2 ball of radius ``2L(1 + 1/r)``
    and ``mu`` in ``{mu >= 0, ||mu||_1 <= 2/r}``. The uniform mixture of the
    iterates is re-weighted by the linearized pruning program when ``prune``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    layout = lmo.layout
    bm = bind_metric(psi, layout)
    bc = bind_constraints(constraints, layout)
    K = len(bc)
    L = max(bm.lipschitz, bc.lipschitz if K else 0.0) if L is None else L
    L_bar = 4 * (1 + 1 / r) * L + 2 / r
    eta = 1 / (L_bar * math.sqrt(2 * T)) if eta is None else eta
    eta_dual = L_bar / ((1 + 2 * math.sqrt(K)) * math.sqrt(2 * T)) if eta_dual is None else eta_dual
    lam_radius = 2 * L * (1 + 1 / r)
    mu_radius = 2 / r
    d = layout.dim
    xi = np.full(d, 0.5)
    # start the multiplier at the metric's own descent direction
    lam = project_ball(bm.gradient(xi), lam_radius)
    mu = np.zeros(K)
    members, confs = [], []
    C_sum = np.zeros(d)
    zero_one = layout.zero_one_direction()
    trace = SolverTrace()
    for t in range(1, T + 1):
        res = lmo(normalized(lam, 2, zero_one))
        C = res.confusion
        members.append(res.classifier)
        confs.append(C)
        C_sum += C
        grad_xi = bm.gradient(xi) - lam
        phi = bc.values(xi) if K else np.zeros(0)
        if K:
            grad_xi = grad_xi + mu @ bc.jacobian(xi)
        if not np.all(np.isfinite(grad_xi)):
            raise NumericalFailure("non-finite gradient", t)
        xi, lam, mu = (
            project_box(xi - eta * grad_xi),
            project_ball(lam + eta_dual * (C - xi), lam_radius),
            project_ball(mu + eta_dual * phi, mu_radius, "l1_nonneg") if K else mu,
        )
        if check_invariants:
            assert np.linalg.norm(lam) <= lam_radius * (1 + 1e-12)
            assert np.all(mu >= 0) and mu.sum() <= mu_radius * (1 + 1e-12)
            assert np.all((xi >= 0) & (xi <= 1))
        avg = C_sum / t
        trace.append(TraceRecord(t, t, bm.value(avg), _violation(bc, avg), float(np.linalg.norm(lam)),
                                 extras={"mu_l1": float(mu.sum())}))
    weights = np.full(T, 1.0 / T)
    final = C_sum / T
    if prune:
        pr = prune_mixture(bm, bc, confs)
        weights = pr.weights
        final = weights @ np.array(confs)
    trace.final_confusion = ConfusionVector(layout, final)
    trace.info.update(L=L, L_bar=L_bar, eta=eta, eta_dual=eta_dual)
    return RandomizedClassifier(members, weights).support(), trace


def default_feasible_classifier(lmo, bc):
    """The 0-1 plug-in if it satisfies the constraints, otherwise the prior-matching constant classifier."""
    res = lmo(lmo.layout.zero_one_direction())
    if len(bc) == 0 or float(bc.values(res.confusion).max()) <= 0:
        return res.classifier, res.confusion
    masses = lmo.sample.group_class_masses()
    h = ConstantClassifier(masses.sum(axis=0), lmo.layout.n_groups)
    return h, lmo.confusion_of(h).entries


def con_ellipsoid(psi, constraints, lmo, T: int = 1000, a: float = 1000.0, h0=None, r: float = 0.05,
                  xi_budget: int = 1000, hull_budget: int = 1000,
                  max_lmo_calls: int | None = None) -> tuple[RandomizedClassifier, SolverTrace]:
    """Ellipsoid method on the dual variables ``(lam, mu)``; weights from a constrained fit over the iterates.

    ``T`` caps the iterations and ``max_lmo_calls``, when given, caps the LMO calls.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    layout = lmo.layout
    bm = bind_metric(psi, layout)
    bc = bind_constraints(constraints, layout)
    K, d = len(bc), layout.dim
    zero_one = layout.zero_one_direction()
    C0 = None
    if h0 is not None:
        C0 = lmo.confusion_of(h0).entries
    elif K:
        h0, C0 = default_feasible_classifier(lmo, bc)
    if K and float(bc.values(C0).max()) > -r:
        warnings.warn(f"initial classifier does not satisfy the constraints with margin {r}", StrictFeasibilityUnknown,
                      stacklevel=2)
    state = EllipsoidState.ball(d + K, a)
    members, confusions = [], []
    calls = 0
    trace = SolverTrace()
    for t in range(T):
        lam, mu = state.center[:d], state.center[d:]
        if np.linalg.norm(state.center) > a:
            h, C, cut = h0, C0, -state.center
        elif K and np.any(mu < 0):
            h, C = h0, C0
            cut = np.concatenate([np.zeros(d), np.maximum(-mu, 0.0)])
        else:
            res = lmo(lam if np.any(lam) else zero_one)
            calls += 1
            h, C = res.classifier, res.confusion
            if h0 is None:
                h0, C0 = h, C
            xi = minimize_xi(bm, lam, mu, bc, budget=xi_budget)
            cut = np.concatenate([C - xi, bc.values(xi) if K else np.zeros(0)])
        members.append(h)
        confusions.append(C)
        trace.append(TraceRecord(t, calls, bm.value(C), _violation(bc, C),
                                 float(np.linalg.norm(lam)), state.log_volume(), extras={"mu_l1": float(np.abs(mu).sum())}))
        if not np.any(cut) or (max_lmo_calls is not None and calls >= max_lmo_calls):
            break
        try:
            nxt = jle(state, cut)
        except NumericalFailure as exc:
            raise NumericalFailure(str(exc), t) from None
        if nxt.collapsed():
            break
        state = nxt
    hull = minimize_over_hull(bm, confusions, bc if K else None, budget=hull_budget)
    trace.final_confusion = ConfusionVector(layout, hull.weights @ np.array(confusions))
    trace.info.update(hull_objective=hull.objective, hull_violation=hull.max_violation)
    return RandomizedClassifier(members, hull.weights).support(), trace


def con_bisection(psi, constraints, lmo, T: int = 10, T_inner: int = 1000, r: float = 0.05, h0=None,
                  branch: str = "proof", L: float | None = None, prune: bool = True):
    """Bisection on the optimal value of a ratio-of-linear metric with a constrained inner solve.

    Each step runs ``con_gda`` on the linear metric ``<A - gamma B, C>``.
    ``branch="proof"`` lowers the upper bracket and keeps the new classifier
    when ``psi <= gamma``; ``branch="printed"`` raises the lower bracket and
    keeps the new classifier when ``psi >= gamma``.
    """
    if branch not in ("proof", "printed"):
        raise ValueError("branch must be 'proof' or 'printed'")
    layout = lmo.layout
    bm = bind_metric(psi, layout)
    bc = bind_constraints(constraints, layout)
    A, B = bm.ratio_coefficients()
    if h0 is None:
        h0, C0 = default_feasible_classifier(lmo, bc)
    else:
        C0 = lmo.confusion_of(h0).entries
    L_inner = max(bc.lipschitz if len(bc) else 0.0, float(np.linalg.norm(A) + np.linalg.norm(B))) if L is None else L
    h, C = h0, C0
    lo, hi = 0.0, 1.0
    calls = 0
    trace = SolverTrace()
    for t in range(1, T + 1):
        gamma = (lo + hi) / 2
        inner = Metric.linear(A - gamma * B, lipschitz_hint=L_inner)
        g, sub = con_gda(inner, bc, lmo, T=T_inner, L=L_inner, r=r, prune=prune)
        calls += len(sub)
        Cg = sub.final_confusion.entries
        value = bm.value(Cg)
        if branch == "proof":
            if value <= gamma:
                hi, h, C = gamma, g, Cg
            else:
                lo = gamma
        else:
            if value >= gamma:
                lo, h, C = gamma, g, Cg
            else:
                hi = gamma
        trace.append(TraceRecord(t, calls, bm.value(C), _violation(bc, C),
                                 extras={"alpha": lo, "beta": hi, "gamma": gamma}))
    trace.final_confusion = ConfusionVector(layout, C)
    return h, trace
