import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confopt.confusion import ConfusionLayout, ConfusionVector, Representation
from confopt.errors import DegenerateDenominator, LayoutMismatch
from confopt.metrics import (
    BoundConstraints,
    Constraint,
    Metric,
    MetricKind,
    choose_layout,
    evaluate_constraints,
    evaluate_metric,
    gradient_metric,
    subgradient_constraint,
)


def vec(C, priors=None):
    return ConfusionVector.from_matrix(C, masses=None if priors is None else [priors])


def fd_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# evaluation examples


def test_hmean_perfect_classifier():
    assert evaluate_metric(Metric.hmean(), vec([[0.5, 0], [0, 0.5]]), priors=[0.5, 0.5]) == pytest.approx(0.0)


def test_qmean_coin_flip():
    assert evaluate_metric(Metric.qmean(), vec([[0.25, 0.25], [0.25, 0.25]])) == pytest.approx(0.5)


def test_micro_f1_perfect():
    assert evaluate_metric(Metric.micro_f1(0), vec([[0.5, 0], [0, 0.5]])) == pytest.approx(0.0)


def test_minmax_worst_class_error():
    C = np.array([[0.4, 0.1], [0.2, 0.3]])
    r = np.diag(C) / np.array([0.5, 0.5])
    assert (1 - r).max() == pytest.approx(0.4)
    assert evaluate_metric(Metric.min_max(), vec(C), priors=[0.5, 0.5]) == pytest.approx(0.4)


def test_ratio_with_nonpositive_denominator_raises():
    m = Metric.ratio([1, 0, 0, 0], [0, 0, 0, 0])
    with pytest.raises(DegenerateDenominator):
        evaluate_metric(m, vec([[0.5, 0], [0, 0.5]]))


def test_diagonal_layout_cannot_express_column_sums():
    # with two classes the diagonal and the masses fix every entry, so use three
    layout = ConfusionLayout.diagonal([[0.5, 0.3, 0.2]])
    with pytest.raises(LayoutMismatch):
        Metric.macro_f1().bind(layout)


# gradients


def test_linear_gradient_is_coefficients():
    L = np.array([0.1, -0.2, 0.3, 0.4])
    np.testing.assert_allclose(gradient_metric(Metric.linear(L), vec([[0.3, 0.2], [0.1, 0.4]])), L)


@pytest.mark.parametrize("metric,C", [
    (Metric.hmean(), [[0.5, 0], [0, 0.5]]),
    (Metric.qmean(), [[0.25, 0.25], [0.25, 0.25]]),
])
def test_gradient_matches_finite_differences(metric, C):
    c = vec(C, priors=[0.5, 0.5])
    bm = metric.bind(c.layout)
    g = bm.gradient(c.entries)
    fd = fd_gradient(bm.value, c.entries.copy())
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5)


def _random_interior(rng, n, size):
    # random full confusions with every class prior bounded away from zero
    X = rng.dirichlet(np.ones(n * n), size=size) * 0.9 + 0.1 / (n * n)
    return X


@pytest.mark.parametrize("metric", [Metric.hmean(), Metric.gmean(), Metric.qmean(), Metric.micro_f1()])
def test_smooth_gradients_at_random_points(metric):
    rng = np.random.default_rng(0)
    n = 3
    layout = ConfusionLayout.full(n)
    bm = metric.bind(layout)
    for x in _random_interior(rng, n, 100):
        g = bm.gradient(x)
        fd = fd_gradient(bm.value, x)
        scale = max(np.linalg.norm(fd), 1e-12)
        assert np.linalg.norm(g - fd) <= 1e-5 * scale + 1e-7


def test_gradients_with_fixed_priors_in_diagonal_layout():
    masses = np.array([[0.5, 0.3, 0.2]])
    layout = ConfusionLayout.diagonal(masses)
    bm = Metric.qmean().bind(layout)
    x = np.array([0.6, 0.5, 0.7])
    np.testing.assert_allclose(bm.gradient(x), fd_gradient(bm.value, x), rtol=1e-6, atol=1e-8)


def test_minmax_subgradient_averages_ties():
    C = vec([[0.3, 0.2], [0.2, 0.3]], priors=[0.5, 0.5])
    g = gradient_metric(Metric.min_max(), C)
    # both classes tie at error 0.4; each active piece contributes half
    np.testing.assert_allclose(g.reshape(2, 2), [[-1.0, 0], [0, -1.0]])


# properties


@st.composite
def confusion_pairs(draw):
    n = draw(st.integers(2, 3))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    priors = rng.dirichlet(np.ones(n)) * 0.8 + 0.2 / n
    C1 = rng.dirichlet(np.ones(n), size=n) * priors[:, None]
    C2 = rng.dirichlet(np.ones(n), size=n) * priors[:, None]
    t = draw(st.floats(0, 1))
    return priors, C1, C2, t


@settings(max_examples=100, deadline=None)
@given(confusion_pairs())
def test_convexity_on_normalized_recall_layout(case):
    priors, C1, C2, t = case
    layout = ConfusionLayout.full(priors.size, masses=[priors])
    for metric in (Metric.hmean(), Metric.qmean(), Metric.min_max(), Metric.gmean()):
        bm = metric.bind(layout)
        mid = bm.value(t * C1.ravel() + (1 - t) * C2.ravel())
        assert mid <= t * bm.value(C1.ravel()) + (1 - t) * bm.value(C2.ravel()) + 1e-9


@settings(max_examples=100, deadline=None)
@given(confusion_pairs())
def test_values_in_unit_interval(case):
    priors, C1, _, _ = case
    layout = ConfusionLayout.full(priors.size, masses=[priors])
    for kind in MetricKind:
        if kind in (MetricKind.LINEAR, MetricKind.RATIO):
            continue
        v = Metric(kind).bind(layout).value(C1.ravel())
        assert -1e-12 <= v <= 1 + 1e-12, kind


@settings(max_examples=100, deadline=None)
@given(confusion_pairs())
def test_coverage_expansion_round_trip(case):
    priors, C1, _, _ = case
    n = priors.size
    tau = np.full(n, 1 / n)
    c = Constraint.coverage_band(tau, 0.02)
    assert c.count(n) == 2 * n
    vals = evaluate_constraints([c], vec(C1, priors))
    assert vals.size == 2 * n
    max_form = np.abs(C1.sum(axis=0) - tau).max() - 0.02
    assert vals.max() == pytest.approx(max_form, abs=1e-12)


# constraints


def test_coverage_on_diagonal_confusion():
    priors = [0.5, 0.3, 0.2]
    vals = evaluate_constraints([Constraint.coverage_band(priors, 0.01)], vec(np.diag(priors), priors))
    np.testing.assert_allclose(vals, -0.01, atol=1e-15)


def test_class_precision_example():
    C = vec([[0.4, 0.1], [0.1, 0.4]])
    vals = evaluate_constraints([Constraint.class_precision(1, 0.5)], C)
    assert vals[0] == pytest.approx(1 - 0.4 / 0.5 - 0.5)
    assert vals[0] == pytest.approx(-0.3)


def test_equal_opportunity_identical_groups():
    g = np.array([[0.3, 0.2], [0.1, 0.4]]) / 2
    raw = np.stack([g, g])
    masses = raw.sum(axis=2)
    c = ConfusionVector(ConfusionLayout.full(2, 2, masses), raw.ravel())
    vals = evaluate_constraints([Constraint.equal_opportunity(0.05)], c)
    np.testing.assert_allclose(vals, -0.05, atol=1e-15)


def test_group_constraint_without_masses_raises():
    raw = np.full((2, 2, 2), 1 / 8)
    c = ConfusionVector(ConfusionLayout.full(2, 2), raw.ravel())
    with pytest.raises(LayoutMismatch):
        evaluate_constraints([Constraint.equal_opportunity(0.05)], c)


def test_linear_constraint_subgradient():
    v = np.array([1.0, -2.0, 0.5, 0.0])
    J = subgradient_constraint(Constraint.linear(v, 0.1), vec([[0.3, 0.2], [0.1, 0.4]]))
    np.testing.assert_allclose(J, [v])


def test_coverage_subgradient_is_column_indicator():
    J = subgradient_constraint(Constraint.coverage_band([0.5, 0.5], 0.01), vec([[0.3, 0.2], [0.1, 0.4]]))
    np.testing.assert_allclose(J[0].reshape(2, 2), [[1, 0], [1, 0]])
    np.testing.assert_allclose(J[2].reshape(2, 2), [[0, 1], [0, 1]])


def test_kld_gradient_matches_finite_differences():
    priors = [0.5, 0.3, 0.2]
    C = np.array([[0.3, 0.1, 0.1], [0.05, 0.2, 0.05], [0.05, 0.05, 0.1]])
    c = vec(C, priors)
    bc = BoundConstraints([Constraint.quantification_kld(0.01)], c.layout)
    J = bc.jacobian(c.entries)[0]
    fd = fd_gradient(lambda x: bc.values(x)[0], c.entries.copy())
    np.testing.assert_allclose(J, fd, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("make", [
    lambda: Constraint.demographic_parity(0.02),
    lambda: Constraint.equal_opportunity(0.05),
    lambda: Constraint.equalized_odds(0.05),
])
def test_group_constraint_jacobians(make):
    rng = np.random.default_rng(3)
    raw = rng.dirichlet(np.ones(8)).reshape(2, 2, 2)
    layout = ConfusionLayout.full(2, 2, raw.sum(axis=2))
    bc = BoundConstraints([make()], layout)
    x = raw.ravel()
    J = bc.jacobian(x)
    for k in range(len(bc)):
        np.testing.assert_allclose(J[k], fd_gradient(lambda y: bc.values(y)[k], x.copy()), atol=1e-6)


# layout choice


def test_choose_layout_qmean_is_diagonal():
    layout = choose_layout(Metric.qmean(), [], 3, 1, [[0.5, 0.3, 0.2]])
    assert layout.representation is Representation.DIAGONAL and layout.dim == 3


def test_choose_layout_with_coverage_is_generalized():
    masses = [[0.5, 0.3, 0.2]]
    layout = choose_layout(Metric.qmean(), [Constraint.coverage_band(masses[0], 0.01)], 3, 1, masses)
    assert layout.representation is Representation.GENERALIZED
    assert layout.dim == 6
    rng = np.random.default_rng(1)
    full = ConfusionLayout.full(3, masses=masses)
    raw = rng.dirichlet(np.ones(3), size=3) * np.array(masses[0])[:, None]
    x = layout.forward(raw[None])
    q, qf = Metric.qmean().bind(layout), Metric.qmean().bind(full)
    assert q.value(x) == pytest.approx(qf.value(raw.ravel()), abs=1e-12)


def test_choose_layout_ratio_is_full():
    layout = choose_layout(Metric.micro_f1(), [], 3, 1, [[0.5, 0.3, 0.2]])
    assert layout.representation is Representation.FULL
