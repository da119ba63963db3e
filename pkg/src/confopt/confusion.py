"""Confusion-matrix layouts and vectors.

Raw confusion entries are stored group-major: entry ``(a, i, j)`` (group ``a``,
true class ``i``, predicted class ``j``) lives at flat offset ``(a*n + i)*n + j``.
A layout is a linear map from these ``m*n*n`` raw entries to the ``d`` entries a
solver works with.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import LayoutMismatch

_RANK_TOL = 1e-10


class Representation(str, enum.Enum):
    FULL = "Full"
    DIAGONAL = "DiagonalNormalized"
    GROUP_STACKED = "GroupStacked"
    GENERALIZED = "GeneralizedLinear"


def raw_offset(n: int, a: int, i: int, j: int) -> int:
    return (a * n + i) * n + j


def diagonal_rows(n: int, m: int, priors=None) -> np.ndarray:
    """One row per class selecting the overall diagonal entry, optionally divided by the prior."""
    rows = np.zeros((n, m * n * n))
    for i in range(n):
        for a in range(m):
            rows[i, raw_offset(n, a, i, i)] = 1.0
        if priors is not None:
            rows[i] /= max(priors[i], 1e-12)
    return rows


def row_sum_rows(n: int, m: int, groupwise: bool = False) -> np.ndarray:
    k = m * n if groupwise else n
    rows = np.zeros((k, m * n * n))
    for a in range(m):
        for i in range(n):
            r = a * n + i if groupwise else i
            rows[r, raw_offset(n, a, i, 0):raw_offset(n, a, i, 0) + n] = 1.0
    return rows


def column_sum_rows(n: int, m: int, groupwise: bool = False) -> np.ndarray:
    k = m * n if groupwise else n
    rows = np.zeros((k, m * n * n))
    for a in range(m):
        for i in range(n):
            for j in range(n):
                r = a * n + j if groupwise else j
                rows[r, raw_offset(n, a, i, j)] = 1.0
    return rows


@dataclass(frozen=True, eq=False)
class ConfusionLayout:
    """How a (possibly group-stacked) confusion matrix is flattened into a vector.

    ``masses`` holds the group-class probabilities ``P(A=a, Y=i)`` as an
    ``(n_groups, n_classes)`` array; their column sums are the class priors.
    """

    n_classes: int
    n_groups: int = 1
    representation: Representation = Representation.FULL
    maps: np.ndarray | None = None
    masses: np.ndarray | None = None

    def __post_init__(self):
        rep = Representation(self.representation)
        object.__setattr__(self, "representation", rep)
        n, m = int(self.n_classes), int(self.n_groups)
        if n < 1 or m < 1:
            raise LayoutMismatch("n_classes and n_groups must be positive")
        object.__setattr__(self, "n_classes", n)
        object.__setattr__(self, "n_groups", m)
        if self.masses is not None:
            masses = np.array(self.masses, dtype=float)
            if masses.ndim == 1 and m == 1:
                masses = masses[None, :]
            if masses.shape != (m, n) or not np.all(np.isfinite(masses)) or np.any(masses < 0):
                raise LayoutMismatch(f"masses must be a nonnegative ({m}, {n}) array")
            masses.setflags(write=False)
            object.__setattr__(self, "masses", masses)
        if rep is Representation.GENERALIZED:
            if self.maps is None:
                raise LayoutMismatch("GeneralizedLinear layout needs maps")
            maps = np.array(self.maps, dtype=float)
            if maps.ndim != 2 or maps.shape[1] != m * n * n:
                raise LayoutMismatch(f"every map must have length {m * n * n}")
            maps.setflags(write=False)
            object.__setattr__(self, "maps", maps)
        elif self.maps is not None:
            raise LayoutMismatch("maps are only used by the GeneralizedLinear layout")
        if rep is Representation.DIAGONAL:
            if self.masses is None or np.any(self.masses <= 0):
                raise LayoutMismatch("DiagonalNormalized layout needs strictly positive masses")

    @classmethod
    def full(cls, n_classes: int, n_groups: int = 1, masses=None) -> ConfusionLayout:
        rep = Representation.FULL if n_groups == 1 else Representation.GROUP_STACKED
        return cls(n_classes, n_groups, rep, masses=masses)

    @classmethod
    def diagonal(cls, masses) -> ConfusionLayout:
        masses = np.atleast_2d(np.asarray(masses, dtype=float))
        return cls(masses.shape[1], masses.shape[0], Representation.DIAGONAL, masses=masses)

    @classmethod
    def generalized(cls, maps, n_classes: int, n_groups: int = 1, masses=None) -> ConfusionLayout:
        return cls(n_classes, n_groups, Representation.GENERALIZED, maps=maps, masses=masses)

    def with_masses(self, masses) -> ConfusionLayout:
        return ConfusionLayout(self.n_classes, self.n_groups, self.representation, self.maps, masses)

    @property
    def raw_dim(self) -> int:
        return self.n_groups * self.n_classes**2

    @property
    def dim(self) -> int:
        if self.representation is Representation.DIAGONAL:
            return self.n_groups * self.n_classes
        if self.representation is Representation.GENERALIZED:
            return self.maps.shape[0]
        return self.raw_dim

    @property
    def is_identity(self) -> bool:
        return self.representation in (Representation.FULL, Representation.GROUP_STACKED)

    @property
    def priors(self) -> np.ndarray | None:
        return None if self.masses is None else self.masses.sum(axis=0)

    @property
    def xi_domain(self) -> str:
        """Set the auxiliary variables of the saddle-point solvers live in."""
        return "simplex" if self.is_identity else "box"

    @cached_property
    def matrix(self) -> np.ndarray:
        """The ``d x (m n^2)`` map from raw entries to layout entries."""
        n, m = self.n_classes, self.n_groups
        if self.is_identity:
            return np.eye(self.raw_dim)
        if self.representation is Representation.GENERALIZED:
            return self.maps
        out = np.zeros((m * n, self.raw_dim))
        for a in range(m):
            for i in range(n):
                out[a * n + i, raw_offset(n, a, i, i)] = 1.0 / self.masses[a, i]
        return out

    @cached_property
    def _lift(self):
        # Affine right-inverse of `matrix`, completed with the row-sum identities
        # (rows of each group's confusion sum to its class masses) when masses are known.
        M = self.matrix
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
        r = int(np.sum(s > _RANK_TOL * s[0])) if s.size else 0
        Q = Vt[:r]
        coords = (U[:, :r] / s[:r]).T
        P = Q.T @ coords
        q = np.zeros(self.raw_dim)
        basis = Q
        if self.masses is not None:
            R = row_sum_rows(self.n_classes, self.n_groups, groupwise=True)
            Rp = R - (R @ Q.T) @ Q
            U2, s2, V2t = np.linalg.svd(Rp, full_matrices=False)
            r2 = int(np.sum(s2 > _RANK_TOL))
            if r2:
                W = V2t[:r2]
                G = (U2[:, :r2] / s2[:r2]).T
                P = P - W.T @ (G @ (R @ Q.T) @ coords)
                q = W.T @ (G @ self.masses.ravel())
                basis = np.vstack([Q, W])
        return P, q, basis

    @property
    def lift_affine(self) -> tuple[np.ndarray, np.ndarray] | None:
        """``(P, q)`` with ``raw = P @ entries + q``, or None for the identity layouts."""
        if self.is_identity:
            return None
        P, q, _ = self._lift
        return P, q

    def represents(self, functionals: np.ndarray) -> bool:
        """Whether every functional (row over raw entries) is determined by the layout entries."""
        if self.is_identity:
            return True
        basis = self._lift[2]
        F = np.atleast_2d(functionals)
        resid = F - (F @ basis.T) @ basis
        scale = np.maximum(1.0, np.linalg.norm(F, axis=1))
        return bool(np.all(np.linalg.norm(resid, axis=1) <= 1e-8 * scale))

    def forward(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        flat = raw.reshape(raw.shape[: raw.ndim - 3] + (self.raw_dim,)) if raw.ndim >= 3 else raw
        if self.is_identity:
            return flat.copy()
        return flat @ self.matrix.T

    def lift_raw(self, entries) -> np.ndarray:
        """Raw ``(..., m, n, n)`` tensor consistent with the layout entries."""
        x = np.asarray(entries, dtype=float)
        lift = self.lift_affine
        raw = x if lift is None else x @ lift[0].T + lift[1]
        return raw.reshape(x.shape[:-1] + (self.n_groups, self.n_classes, self.n_classes))

    def check_length(self, vector, what: str = "vector") -> np.ndarray:
        v = np.asarray(vector, dtype=float).ravel()
        if v.size != self.dim:
            raise LayoutMismatch(f"{what} has length {v.size}, layout needs {self.dim}")
        return v

    def to_raw_loss(self, loss) -> np.ndarray:
        """Raw loss whose inner product with raw confusions equals ``<loss, entries>``."""
        loss = self.check_length(loss, "loss")
        return loss if self.is_identity else self.matrix.T @ loss

    def zero_one_direction(self) -> np.ndarray:
        """Layout-space loss whose plug-in classifier is the argmax of the class probabilities."""
        n, m = self.n_classes, self.n_groups
        if self.is_identity:
            return np.tile((1.0 - np.eye(n)).ravel(), m)
        target = np.tile((-np.eye(n)).ravel(), m)
        return np.linalg.lstsq(self.matrix.T, target, rcond=None)[0]


@dataclass(frozen=True, eq=False)
class ConfusionVector:
    layout: ConfusionLayout
    entries: np.ndarray

    def __post_init__(self):
        entries = self.layout.check_length(self.entries, "confusion vector").copy()
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_matrix(cls, matrix, masses=None) -> ConfusionVector:
        """Full (or group-stacked) vector from an ``(n, n)`` or ``(m, n, n)`` array."""
        C = np.asarray(matrix, dtype=float)
        if C.ndim == 2:
            C = C[None]
        layout = ConfusionLayout.full(C.shape[1], C.shape[0], masses=masses)
        return cls(layout, C.ravel())

    def matrix(self) -> np.ndarray:
        """Raw ``(m, n, n)`` confusion; exact for Full layouts."""
        return self.layout.lift_raw(self.entries)

    def validate(self, tol: float = 1e-9) -> None:
        from .errors import InvalidData

        x = self.entries
        if self.layout.is_identity:
            if np.any(x < -tol) or abs(x.sum() - 1.0) > tol:
                raise InvalidData("Full confusion entries must be nonnegative and sum to 1")
        elif self.layout.representation is Representation.DIAGONAL:
            if np.any(x < -tol) or np.any(x > 1 + tol):
                raise InvalidData("normalized diagonal entries must lie in [0, 1]")
