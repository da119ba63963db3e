"""Projections and the small convex subproblems the solvers need.

The iterative solves are projected subgradient methods with ``c / sqrt(t)``
steps and best-iterate tracking. Problems that are plain linear programs
(pruning a mixture, the feasible-set step of split Frank-Wolfe) go to HiGHS
through ``scipy.optimize.linprog`` so that their constraints hold to solver
precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, minimize

from .errors import NumericalFailure

FEAS_TOL = 1e-6
# largest distinct-member count handed to the SLSQP polish of a hull fit
POLISH_LIMIT = 400


def project_simplex(v, total: float = 1.0) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum(x) = total}`` by sorting and thresholding."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def project_ball(v, radius: float, norm: str = "l2") -> np.ndarray:
    """Project onto the l2 ball, or onto ``{mu >= 0, sum(mu) <= radius}`` for ``norm="l1_nonneg"``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    v = np.asarray(v, dtype=float)
    if norm == "l2":
        r = np.linalg.norm(v)
        return v * (radius / r) if r > radius else v.copy()
    if norm == "l1_nonneg":
        p = np.maximum(v, 0.0)
        return p if p.sum() <= radius else project_simplex(p, radius)
    raise ValueError(f"unknown norm {norm!r}")


def project_box(v, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    return np.clip(v, low, high)


def _domain(name: str, d: int):
    if name == "simplex":
        return project_simplex, np.full(d, 1.0 / d), math.sqrt(2.0)
    if name == "box":
        return project_box, np.full(d, 0.5), math.sqrt(d)
    raise ValueError(f"unknown domain {name!r}")


def _domain_vertices(name: str, d: int, grad):
    # the linear minimizers over the domain for a given gradient
    if name == "simplex":
        return np.eye(d)
    return (grad < 0).astype(float)[None, :]


def minimize_xi(psi, lam, mu=None, constraints=None, budget: int = 1000, domain: str | None = None) -> np.ndarray:
    """Minimize ``psi(xi) - <lam, xi> + <mu, phi(xi)>`` over the auxiliary domain.

    ``psi`` is any object with ``value``/``gradient`` (normally a bound metric);
    ``constraints`` is a bound constraint list evaluated at ``xi``. The domain
    defaults to the metric layout's auxiliary domain. Returns the best iterate,
    which is never worse than the domain center or the linear-minimizing vertices.
    """
    lam = np.asarray(lam, dtype=float)
    d = lam.size
    if domain is None:
        domain = getattr(getattr(psi, "layout", None), "xi_domain", "simplex")
    project, x, diam = _domain(domain, d)
    use_mu = mu is not None and constraints is not None and len(constraints) > 0 and np.any(np.asarray(mu) != 0)
    mu = np.asarray(mu, dtype=float) if use_mu else None

    def objective(X):
        val = np.atleast_1d(psi.values(X) if hasattr(psi, "values") else psi.value(X)) - X @ lam
        if use_mu:
            val = val + constraints.values(X) @ mu
        return val

    def gradient(x):
        g = np.asarray(psi.gradient(x), dtype=float) - lam
        if use_mu:
            g = g + mu @ constraints.jacobian(x)
        return g

    best_x, best_f = x.copy(), float(objective(x[None])[0])
    g = gradient(x)
    if not np.all(np.isfinite(g)) or not math.isfinite(best_f):
        raise NumericalFailure("non-finite objective in the auxiliary minimization")
    gnorm = np.linalg.norm(g)
    c = diam / gnorm if gnorm > 0 else 0.0
    for t in range(1, budget + 1):
        if gnorm == 0:
            break
        x_new = project(x - (c / math.sqrt(t)) * g)
        if np.array_equal(x_new, x):
            break
        x = x_new
        f = float(objective(x[None])[0])
        if not math.isfinite(f):
            raise NumericalFailure("non-finite objective in the auxiliary minimization", t)
        if f < best_f:
            best_x, best_f = x, f
        g = gradient(x)
        gnorm = np.linalg.norm(g)
    V = _domain_vertices(domain, d, gradient(best_x))
    with np.errstate(all="ignore"):
        try:
            fv = objective(V)
        except ArithmeticError:
            fv = np.full(V.shape[0], np.inf)
    fv = np.where(np.isfinite(fv), fv, np.inf)
    k = int(np.argmin(fv))
    if fv[k] < best_f:
        best_x = V[k]
    return best_x


@dataclass(frozen=True)
class HullResult:
    weights: np.ndarray
    objective: float
    max_violation: float


def _dedupe(points):
    """Unique rows and, for each, the index of its first occurrence."""
    P = np.asarray(points, dtype=float)
    _, first = np.unique(P, axis=0, return_index=True)
    order = np.argsort(first)
    return P[first[order]], first[order]


def _max_violation(constraints, X):
    if constraints is None or len(constraints) == 0:
        return np.zeros(np.asarray(X).shape[:-1])
    return np.maximum(constraints.values(X).max(axis=-1), 0.0)


def minimize_over_hull(psi, confusions, constraints=None, budget: int = 1000) -> HullResult:
    """Mixture weights minimizing ``psi`` of the mixed confusion, optionally subject to constraints.

    Constraints enter as a quadratic penalty whose weight doubles every tenth of
    the budget. The best feasible iterate wins (lowest violation if none is
    feasible); if it is still infeasible it is blended with the least-violating
    mixture of the linearized program until the constraints hold. When there
    are at most ``POLISH_LIMIT`` distinct confusions, SLSQP then refines the
    weights, and its answer is kept only if it is feasible and better.
    """
    C_all = np.array([getattr(c, "entries", c) for c in confusions], dtype=float)
    if C_all.ndim != 2 or C_all.shape[0] == 0:
        raise ValueError("need at least one confusion")
    C, keep = _dedupe(C_all)
    T = C.shape[0]
    has_cons = constraints is not None and len(constraints) > 0

    def evaluate(A):
        X = A @ C
        return np.atleast_1d(psi.values(X)), _max_violation(constraints, X)

    if T == 1:
        a = np.ones(1)
    else:
        a = np.full(T, 1.0 / T)
        weight = 10.0
        cands = [a]
        g = _hull_gradient(psi, constraints, C, a, weight)
        gnorm = np.linalg.norm(g)
        c = math.sqrt(2.0) / gnorm if gnorm > 0 else 0.0
        period = max(budget // 10, 1)
        for t in range(1, budget + 1):
            if gnorm == 0:
                break
            a = project_simplex(a - (c / math.sqrt(t)) * g)
            cands.append(a)
            if has_cons and t % period == 0:
                weight *= 2.0
            g = _hull_gradient(psi, constraints, C, a, weight)
            gnorm = np.linalg.norm(g)
        A = np.vstack(cands + list(np.eye(T)))
        vals, viol = evaluate(A)
        feasible = viol <= FEAS_TOL
        if feasible.any():
            idx = np.flatnonzero(feasible)
            k = idx[np.argmin(vals[idx])]
        else:
            k = int(np.argmin(viol))
        a = A[k]
        if has_cons and viol[k] > FEAS_TOL:
            a = _repair(constraints, C, a)
        if T <= POLISH_LIMIT:
            a = _polish(psi, constraints if has_cons else None, C, a, evaluate)
    weights = np.zeros(C_all.shape[0])
    weights[keep] = a
    val, viol = evaluate(a[None])
    return HullResult(weights, float(val[0]), float(viol[0]))


def _polish(psi, constraints, C, a, evaluate):
    cons = ()
    if constraints is not None:
        cons = ({"type": "ineq", "fun": lambda w: -constraints.values(w @ C),
                 "jac": lambda w: -constraints.jacobian(w @ C) @ C.T},)
    cons += ({"type": "eq", "fun": lambda w: w.sum() - 1.0, "jac": lambda w: np.ones_like(w)},)
    with np.errstate(all="ignore"):
        res = minimize(lambda w: float(psi.value(w @ C)), a, jac=lambda w: C @ np.asarray(psi.gradient(w @ C)),
                       method="SLSQP", bounds=[(0.0, 1.0)] * a.size, constraints=cons,
                       options={"maxiter": 500, "ftol": 1e-12})
    if not np.all(np.isfinite(res.x)):
        return a
    b = np.maximum(res.x, 0.0)
    b /= b.sum()
    (v_old, v_new), (g_old, g_new) = evaluate(np.vstack([a, b]))
    if g_new <= FEAS_TOL and (v_new < v_old or g_old > FEAS_TOL):
        return b
    return a


def _hull_gradient(psi, constraints, C, a, weight):
    x = a @ C
    g = C @ np.asarray(psi.gradient(x), dtype=float)
    if constraints is not None and len(constraints) > 0:
        phi = constraints.values(x)
        active = np.maximum(phi, 0.0)
        if active.any():
            g = g + C @ (2.0 * weight * (active @ constraints.jacobian(x)))
    return g


def _repair(constraints, C, a):
    """Blend ``a`` toward the least-violating mixture until the constraints hold."""
    phi = constraints.values(C)  # (T, K)
    feas = solve_mixture_lp(np.zeros(C.shape[0]), phi).weights
    if _max_violation(constraints, feas @ C) > FEAS_TOL:
        return feas
    lo, hi = 0.0, 1.0
    for _ in range(60):
        s = 0.5 * (lo + hi)
        if _max_violation(constraints, ((1 - s) * a + s * feas) @ C) <= FEAS_TOL:
            hi = s
        else:
            lo = s
    return (1 - hi) * a + hi * feas


def solve_mixture_lp(psi_values, phi_values) -> HullResult:
    """``min sum a_t psi_t`` s.t. ``sum a_t phi_{k,t} <= 0``, ``a`` in the simplex.

    Ties are broken toward members with lower indices. If the program is
    infeasible the weights minimize the largest aggregated violation instead.
    """
    psi_values = np.asarray(psi_values, dtype=float)
    T = psi_values.size
    Phi = np.asarray(phi_values, dtype=float).reshape(T, -1)
    K = Phi.shape[1]
    A_eq, b_eq = np.ones((1, T)), np.ones(1)
    bounds = [(0, None)] * T
    A_ub = Phi.T if K else None
    b_ub = np.zeros(K) if K else None
    res = linprog(psi_values, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status == 0:
        best = res.fun
        tie_A = np.vstack([A_ub, psi_values[None]]) if K else psi_values[None]
        slack = 1e-9 * max(1.0, abs(best))
        tie_b = np.concatenate([b_ub, [best + slack]]) if K else np.array([best + slack])
        tie = linprog(np.arange(T, dtype=float), A_ub=tie_A, b_ub=tie_b, A_eq=A_eq, b_eq=b_eq,
                      bounds=bounds, method="highs")
        # keep the tie-broken weights only if they did not spend the slack on a worse member
        keep_tie = tie.status == 0 and tie.x @ psi_values <= best + 1e-12 * max(1.0, abs(best))
        a = tie.x if keep_tie else res.x
    else:
        # minimize s subject to Phi^T a <= s
        c = np.zeros(T + 1)
        c[-1] = 1.0
        A = np.hstack([Phi.T, -np.ones((K, 1))])
        res = linprog(c, A_ub=A, b_ub=np.zeros(K), A_eq=np.hstack([A_eq, [[0.0]]]), b_eq=b_eq,
                      bounds=bounds + [(None, None)], method="highs")
        if res.status != 0:
            raise NumericalFailure(f"linear program failed: {res.message}")
        a = res.x[:T]
    a = np.maximum(a, 0.0)
    a /= a.sum()
    viol = float(np.max(a @ Phi, initial=0.0)) if K else 0.0
    return HullResult(a, float(a @ psi_values), max(viol, 0.0))


def prune_mixture(psi, constraints, member_confusions) -> HullResult:
    """Re-weight mixture members by the linearized program over their own metric and constraint values."""
    C = np.array([getattr(c, "entries", c) for c in member_confusions], dtype=float)
    if C.shape[0] == 0:
        raise ValueError("need at least one member")
    psi_values = np.atleast_1d(psi.values(C))
    phi = constraints.values(C) if constraints is not None and len(constraints) else np.zeros((C.shape[0], 0))
    return solve_mixture_lp(psi_values, phi)


def linear_min_over_feasible(direction, constraints, domain: str, budget: int = 1000,
                             equalities=None) -> np.ndarray:
    """``argmin <direction, F>`` over the domain intersected with ``{phi(F) <= 0}``.

    ``equalities`` is an optional pair ``(A, b)`` adding ``A @ F = b``, e.g. the
    row sums a confusion must have once the class masses are known.
    """
    g = np.asarray(direction, dtype=float)
    d = g.size
    has_cons = constraints is not None and len(constraints) > 0
    if equalities is not None:
        return _linear_min_with_equalities(g, constraints if has_cons else None, domain, budget, equalities)
    if not has_cons:
        if domain == "simplex":
            F = np.zeros(d)
            F[int(np.argmin(g))] = 1.0
            return F
        return (g < 0).astype(float)
    x0 = np.full(d, 1.0 / d if domain == "simplex" else 0.5)
    if constraints.affine:
        J = constraints.jacobian(x0)
        b = constraints.values(x0) - J @ x0
        if domain == "box":
            fast = _box_with_coordinate_bounds(g, J, b)
            if fast is not None:
                return fast
        A_eq = np.ones((1, d)) if domain == "simplex" else None
        b_eq = np.ones(1) if domain == "simplex" else None
        bounds = [(0, None)] * d if domain == "simplex" else [(0, 1)] * d
        res = linprog(g, A_ub=J, b_ub=-b, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
        if res.status == 0:
            return res.x
        # infeasible: fall back to the point of least violation
        res = linprog(np.r_[np.zeros(d), 1.0], A_ub=np.hstack([J, -np.ones((J.shape[0], 1))]), b_ub=-b,
                      A_eq=None if A_eq is None else np.hstack([A_eq, [[0.0]]]), b_eq=b_eq,
                      bounds=bounds + [(None, None)], method="highs")
        if res.status != 0:
            raise NumericalFailure(f"linear program failed: {res.message}")
        return res.x[:d]
    return _penalized_linear_min(g, constraints, domain, budget)


def _box_with_coordinate_bounds(g, J, b):
    # constraints of the form +-x_j + b <= 0 are just tighter box bounds
    nz = np.abs(J) > 0
    if not np.all(nz.sum(axis=1) == 1):
        return None
    lo, hi = np.zeros(g.size), np.ones(g.size)
    for row, off in zip(J, b):
        j = int(np.flatnonzero(row)[0])
        bound = -off / row[j]
        if row[j] > 0:
            hi[j] = min(hi[j], bound)
        else:
            lo[j] = max(lo[j], bound)
    if np.any(lo > hi):
        return None
    return np.where(g < 0, hi, lo)


def _linear_min_with_equalities(g, constraints, domain, budget, equalities):
    A_eq, b_eq = (np.atleast_2d(np.asarray(equalities[0], dtype=float)),
                  np.atleast_1d(np.asarray(equalities[1], dtype=float)))
    d = g.size
    bounds = [(0, None)] * d if domain == "simplex" else [(0, 1)] * d
    if domain == "simplex":
        A_eq, b_eq = np.vstack([A_eq, np.ones((1, d))]), np.append(b_eq, 1.0)
    if constraints is None or constraints.affine:
        A_ub = b_ub = None
        if constraints is not None:
            x0 = np.full(d, 1.0 / d)
            A_ub = constraints.jacobian(x0)
            b_ub = -(constraints.values(x0) - A_ub @ x0)
        res = linprog(g, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
        if res.status == 0:
            return res.x
        if A_ub is None:
            raise NumericalFailure(f"linear program failed: {res.message}")
        res = linprog(np.r_[np.zeros(d), 1.0], A_ub=np.hstack([A_ub, -np.ones((A_ub.shape[0], 1))]), b_ub=b_ub,
                      A_eq=np.hstack([A_eq, np.zeros((A_eq.shape[0], 1))]), b_eq=b_eq,
                      bounds=bounds + [(None, None)], method="highs")
        if res.status != 0:
            raise NumericalFailure(f"linear program failed: {res.message}")
        return res.x[:d]
    return _penalized_linear_min(g, constraints, domain, budget, (A_eq, b_eq))


def _penalized_linear_min(g, constraints, domain, budget, equalities=None):
    project, x, diam = _domain(domain, g.size)
    weight = 10.0
    period = max(budget // 10, 1)
    best, best_key = x.copy(), None
    c = diam / max(np.linalg.norm(g), 1e-12)
    for t in range(1, budget + 1):
        phi = constraints.values(x)
        if equalities is not None:
            resid = equalities[0] @ x - equalities[1]
            phi = np.concatenate([phi, resid, -resid])
            jac = np.vstack([constraints.jacobian(x), equalities[0], -equalities[0]])
        else:
            jac = None
        viol = max(float(phi.max()), 0.0)
        key = (viol > FEAS_TOL, viol if viol > FEAS_TOL else float(g @ x))
        if best_key is None or key < best_key:
            best, best_key = x.copy(), key
        active = np.maximum(phi, 0.0)
        if active.any() and jac is None:
            jac = constraints.jacobian(x)
        step_dir = g + (2.0 * weight * (active @ jac) if active.any() else 0.0)
        x = project(x - (c / math.sqrt(t)) * step_dir)
        if t % period == 0:
            weight *= 2.0
    return best
