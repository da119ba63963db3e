import math
import warnings

import numpy as np
import pytest

from confopt.bruteforce import (
    DiscreteDistribution,
    EnumerationOracle,
    discretize,
    enumerate_confusions,
    grid_confusions,
    mixture_optimum,
)
from confopt.data import SyntheticSpec
from confopt.errors import StrictFeasibilityUnknown
from confopt.metrics import BoundConstraints, Constraint, Metric
from confopt.oracle import PluginOracle
from confopt.solvers.constrained import con_bisection, con_ellipsoid, con_gda, split_fw
from confopt.solvers.unconstrained import bisection, ellipsoid, frank_wolfe


class Recording:
    """Wraps an LMO and keeps every loss it was asked about."""

    def __init__(self, oracle):
        self.oracle = oracle
        self.layout = oracle.layout
        self.sample = oracle.sample
        self.losses = []

    def __call__(self, loss):
        self.losses.append(np.array(loss, dtype=float))
        return self.oracle(loss)

    def confusion_of(self, classifier):
        return self.oracle.confusion_of(classifier)


def population_oracle(dist):
    return PluginOracle(dist.model(), dist.as_dataset(), dist.layout())


def three_points():
    return DiscreteDistribution([[0.0], [1.0], [2.0]], [0.3, 0.4, 0.3], [[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]])


def enumerated_reference(psi, constraints, dist, mix_steps=400):
    _, raw = enumerate_confusions(dist)
    layout = dist.layout()
    return mixture_optimum(psi, constraints, layout.forward(raw), layout, mix_steps=mix_steps)[0]


def violation(constraints, layout, x):
    return float(BoundConstraints(constraints, layout).values(x).max())


@pytest.fixture(scope="module")
def normbal():
    dist = discretize(SyntheticSpec("NormBal"), bins=30)
    _, C = grid_confusions(dist, step=0.02)
    return dist, C.reshape(len(C), -1)


# the running example: H-mean with C00 - C11 >= 0.2
GAP = [Constraint.linear([-1.0, 0.0, 0.0, 1.0], -0.2)]


@pytest.fixture(scope="module")
def gap_reference(normbal):
    dist, confs = normbal
    return mixture_optimum(Metric.hmean(), GAP, confs, dist.layout(), mix_steps=200)[0]


# split Frank-Wolfe


def test_split_fw_without_coupling_follows_fw_direction():
    dist = three_points()
    rec = Recording(population_oracle(dist))
    split_fw(Metric.hmean(), [], rec, T=2, zeta=0.0)
    fw_rec = Recording(population_oracle(dist))
    frank_wolfe(Metric.hmean(), fw_rec, T=1)
    a, b = rec.losses[1], fw_rec.losses[1]
    np.testing.assert_allclose(a / np.linalg.norm(a), b / np.linalg.norm(b), atol=1e-12)


def test_split_fw_running_example(normbal, gap_reference):
    dist, _ = normbal
    _, trace = split_fw(Metric.hmean(), GAP, population_oracle(dist), T=10000)
    x = trace.final_confusion.entries
    assert violation(GAP, dist.layout(), x) <= 0.02
    assert Metric.hmean().bind(dist.layout()).value(x) == pytest.approx(gap_reference, abs=2e-2)


def test_split_fw_feasible_iterate_stays_feasible(normbal):
    dist, _ = normbal
    _, trace = split_fw(Metric.hmean(), GAP, population_oracle(dist), T=500)
    assert trace.column("F_violation").max() <= 1e-6


def test_split_fw_residual_shrinks_with_budget(normbal):
    dist, _ = normbal
    best = []
    for T in (100, 1000, 10000):
        _, trace = split_fw(Metric.hmean(), GAP, population_oracle(dist), T=T, prune=False)
        best.append(trace.column("residual")[T // 2:].min())
    assert best[1] <= best[0] + 1e-6 and best[2] <= best[1] + 1e-6


def test_split_fw_zero_residual_leaves_multiplier_alone():
    # a single support point: C is fixed, and without constraints F lands on it too
    dist = DiscreteDistribution([[0.0]], [1.0], [[1.0, 0.0]])
    _, trace = split_fw(Metric.zero_one(), [], population_oracle(dist), T=10)
    np.testing.assert_allclose(trace.column("residual"), 0.0)
    np.testing.assert_allclose(trace.column("dual_norm"), 0.0)


# constrained GDA


def test_con_gda_inactive_constraint_keeps_mu_zero():
    dist = three_points()
    never = [Constraint.linear([0.0, 0.0, 0.0, 0.0], 0.1)]
    _, trace = con_gda(Metric.hmean(), never, population_oracle(dist), T=300)
    assert np.all(trace.column("mu_l1") == 0.0)


def test_con_gda_duals_stay_in_their_sets(normbal):
    dist, _ = normbal
    con_gda(Metric.hmean(), GAP, population_oracle(dist), T=500, check_invariants=True)


def test_con_gda_running_example(normbal, gap_reference):
    dist, _ = normbal
    _, trace = con_gda(Metric.hmean(), GAP, population_oracle(dist), T=2000)
    x = trace.final_confusion.entries
    assert violation(GAP, dist.layout(), x) <= 1e-6
    assert Metric.hmean().bind(dist.layout()).value(x) == pytest.approx(gap_reference, abs=1e-2)


def two_group_dist():
    return DiscreteDistribution([[0.0], [1.0], [2.0], [3.0]], [0.3, 0.2, 0.3, 0.2],
                                [[0.8, 0.2], [0.3, 0.7], [0.6, 0.4], [0.1, 0.9]], groups=[0, 0, 1, 1], n_groups=2)


def test_con_gda_gmean_equal_opportunity():
    dist = two_group_dist()
    cons = [Constraint.equal_opportunity(0.05)]
    _, trace = con_gda(Metric.gmean(), cons, population_oracle(dist), T=10000)
    x = trace.final_confusion.entries
    assert violation(cons, dist.layout(), x) <= 0.01
    ref = enumerated_reference(Metric.gmean(), cons, dist)
    assert Metric.gmean().bind(dist.layout()).value(x) <= ref + 2e-2


def test_pruning_never_worse_than_uniform_linearization(normbal):
    dist, _ = normbal
    oracle = population_oracle(dist)
    bm = Metric.hmean().bind(dist.layout())
    clf_u, tr_u = con_gda(Metric.hmean(), GAP, oracle, T=300, prune=False)
    clf_p, tr_p = con_gda(Metric.hmean(), GAP, oracle, T=300, prune=True)
    members = np.array([oracle.confusion_of(h).entries for h in clf_p.members])
    lin_pruned = clf_p.weights @ bm.values(members)
    uniform = np.array([oracle.confusion_of(h).entries for h in clf_u.members])
    if violation(GAP, dist.layout(), uniform.mean(axis=0)) <= 0:
        assert lin_pruned <= bm.values(uniform).mean() + 1e-9


# constrained ellipsoid


def test_con_ellipsoid_without_constraints_is_ellipsoid():
    rng = np.random.default_rng(0)
    dist = three_points()
    for _ in range(20):
        psi = Metric.linear(rng.uniform(-1, 1, 4))
        _, a = ellipsoid(psi, population_oracle(dist), T=40, a=5.0)
        _, b = con_ellipsoid(psi, [], population_oracle(dist), T=40, a=5.0)
        np.testing.assert_array_equal(a.column("objective"), b.column("objective"))
        np.testing.assert_array_equal(a.column("log_volume"), b.column("log_volume"))


def test_con_ellipsoid_reuses_h0_without_lmo_calls(normbal):
    dist, _ = normbal
    rec = Recording(population_oracle(dist))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StrictFeasibilityUnknown)
        _, trace = con_ellipsoid(Metric.hmean(), GAP, rec, T=100)
    calls = trace.column("lmo_calls")
    # one call for the default h0, then one per iteration that reached the LMO branch
    assert len(rec.losses) == calls[-1] + 1
    assert np.any(np.diff(calls) == 0)


def test_con_ellipsoid_log_volume_rate(normbal):
    dist, _ = normbal
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StrictFeasibilityUnknown)
        _, trace = con_ellipsoid(Metric.hmean(), GAP, population_oracle(dist), T=100)
    m = dist.layout().dim + 1
    assert np.all(np.diff(trace.column("log_volume")) <= -1 / (2 * m))


def test_con_ellipsoid_stops_at_lmo_call_budget(normbal):
    dist, _ = normbal
    rec = Recording(population_oracle(dist))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StrictFeasibilityUnknown)
        _, trace = con_ellipsoid(Metric.hmean(), GAP, rec, T=10_000, max_lmo_calls=40)
    assert trace.column("lmo_calls")[-1] == 40
    # free cuts make the run longer than its call budget
    assert len(trace) > 40


def test_con_ellipsoid_warns_without_margin(normbal):
    dist, _ = normbal
    with pytest.warns(StrictFeasibilityUnknown):
        con_ellipsoid(Metric.hmean(), GAP, population_oracle(dist), T=5)


def test_con_ellipsoid_hmean_coverage_three_points():
    dist = three_points()
    priors = dist.group_class_masses()[0]
    cons = [Constraint.coverage_band(priors, 0.01)]
    m = dist.layout().dim + 2 * 2
    T = math.ceil(2 * m * m * math.log(m / 1e-2))
    _, trace = con_ellipsoid(Metric.hmean(), cons, population_oracle(dist), T=T)
    x = trace.final_confusion.entries
    assert violation(cons, dist.layout(), x) <= 1e-2
    ref = enumerated_reference(Metric.hmean(), cons, dist)
    assert Metric.hmean().bind(dist.layout()).value(x) == pytest.approx(ref, abs=1e-2)


def test_con_ellipsoid_running_example(normbal, gap_reference):
    dist, _ = normbal
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StrictFeasibilityUnknown)
        _, trace = con_ellipsoid(Metric.hmean(), GAP, population_oracle(dist), T=300)
    x = trace.final_confusion.entries
    assert violation(GAP, dist.layout(), x) <= 1e-6
    assert Metric.hmean().bind(dist.layout()).value(x) == pytest.approx(gap_reference, abs=1e-2)


# constrained bisection


def test_con_bisection_first_threshold():
    dist = three_points()
    _, trace = con_bisection(Metric.micro_f1(), [], population_oracle(dist), T=3, T_inner=5)
    assert trace.column("gamma")[0] == 0.5


def test_con_bisection_without_constraints_matches_bisection():
    dist = DiscreteDistribution(np.arange(4, dtype=float), [0.1, 0.4, 0.3, 0.2],
                                [[0.9, 0.1], [0.6, 0.4], [0.35, 0.65], [0.1, 0.9]])
    psi = Metric.micro_f1(1)
    _, a = bisection(psi, EnumerationOracle(dist), T=10)
    _, b = con_bisection(psi, [], EnumerationOracle(dist), T=10, T_inner=1)
    np.testing.assert_array_equal(a.column("alpha"), b.column("alpha"))
    np.testing.assert_array_equal(a.column("beta"), b.column("beta"))


def test_con_bisection_micro_f1_coverage():
    dist = three_points()
    priors = dist.group_class_masses()[0]
    cons = [Constraint.coverage_band(priors, 0.01)]
    psi = Metric.micro_f1(1)
    _, trace = con_bisection(psi, cons, population_oracle(dist), T=10, T_inner=4000)
    x = trace.final_confusion.entries
    assert violation(cons, dist.layout(), x) <= 2e-2
    ref = enumerated_reference(psi, cons, dist, mix_steps=2000)
    assert psi.bind(dist.layout()).value(x) <= ref + 2.0**-10 + 5e-2


def test_con_bisection_branches_differ_only_in_bookkeeping():
    dist = three_points()
    _, proof = con_bisection(Metric.micro_f1(1), [], population_oracle(dist), T=6, T_inner=50)
    _, printed = con_bisection(Metric.micro_f1(1), [], population_oracle(dist), T=6, T_inner=50, branch="printed")
    assert proof.column("gamma")[0] == printed.column("gamma")[0] == 0.5
    with pytest.raises(ValueError):
        con_bisection(Metric.micro_f1(1), [], population_oracle(dist), T=1, branch="sideways")
