import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confopt.bruteforce import DiscreteDistribution, enumerate_lmo
from confopt.confusion import ConfusionLayout
from confopt.data import Dataset, ExactEtaModel, SyntheticSpec, sample_synthetic
from confopt.errors import DegenerateLoss, EmptySample, GroupOutOfRange
from confopt.oracle import (
    ClassProbabilityModel,
    ConstantClassifier,
    CpeConfig,
    DeterministicClassifier,
    PluginOracle,
    WlrOracle,
    classifier_from_dict,
    diagonal_weights,
    empirical_confusion,
    group_plugin_lmo,
    plugin_lmo,
    raw_confusion_from_predictions,
    train_cpe,
    wlr_lmo,
)


class FixedEta:
    """Model whose class probabilities are the same at every point."""

    def __init__(self, eta):
        self.eta = np.asarray(eta, dtype=float)
        self.n_classes = self.eta.size

    def predict_proba(self, X):
        return np.tile(self.eta, (np.asarray(X).shape[0], 1))


def one_point(n=2):
    return Dataset(np.zeros((1, 1)), [0], n)


def balanced_loss(priors):
    p = np.asarray(priors, dtype=float)
    return ((1 - np.eye(p.size)) / p[:, None]).ravel()


# plug-in rule


def test_balanced_loss_favours_minority_class():
    # predicting 0 costs 0.3 / 0.2, predicting 1 costs 0.7 / 0.8
    clf = DeterministicClassifier(balanced_loss([0.8, 0.2]), FixedEta([0.7, 0.3]))
    assert clf.predict(np.zeros((1, 1)))[0] == 1


def test_tie_goes_to_larger_class():
    clf = DeterministicClassifier(balanced_loss([0.8, 0.2]), FixedEta([0.8, 0.2]))
    assert clf.predict(np.zeros((1, 1)))[0] == 1
    assert DeterministicClassifier(1 - np.eye(3), FixedEta([0.4, 0.2, 0.4])).predict(np.zeros((1, 1)))[0] == 2


def test_zero_one_loss_is_argmax():
    rng = np.random.default_rng(0)
    eta = rng.dirichlet(np.ones(4), size=500)
    pred = DeterministicClassifier(1 - np.eye(4), FixedEta(eta[0])).predict_from_proba(eta)
    np.testing.assert_array_equal(pred, eta.argmax(axis=1))


def test_group_specific_costs():
    # group 0 uses 0-1 loss, group 1 makes predicting class 0 expensive
    loss = np.stack([1 - np.eye(2), [[0, 1], [10, 0]]])
    sample = Dataset(np.zeros((2, 1)), [0, 0], 2, groups=[0, 1], n_groups=2)
    layout = ConfusionLayout.full(2, 2)
    res = group_plugin_lmo(loss.ravel(), FixedEta([0.6, 0.4]), sample, None, layout)
    np.testing.assert_array_equal(res.classifier.predict_from_proba(np.tile([0.6, 0.4], (2, 1)), [0, 1]), [0, 1])


def test_group_map_out_of_range():
    sample = Dataset(np.zeros((2, 1)), [0, 1], 2)
    with pytest.raises(GroupOutOfRange):
        group_plugin_lmo(np.zeros(8), FixedEta([0.5, 0.5]), sample, [0, 2], ConfusionLayout.full(2, 2))


def test_group_map_callable():
    sample = Dataset(np.array([[-1.0], [1.0]]), [0, 1], 2)
    res = group_plugin_lmo(np.tile(1 - np.eye(2), (2, 1, 1)).ravel(), FixedEta([0.5, 0.5]), sample,
                           lambda X: (X[:, 0] > 0).astype(int), ConfusionLayout.full(2, 2))
    raw = res.confusion.reshape(2, 2, 2)
    assert raw[0].sum() == pytest.approx(0.5) and raw[1].sum() == pytest.approx(0.5)


# empirical confusions


def test_raw_confusion_from_hard_labels():
    sample = Dataset(np.zeros((4, 1)), [0, 0, 1, 1], 2)
    raw = raw_confusion_from_predictions(np.array([0, 1, 1, 1]), sample, 1)
    np.testing.assert_allclose(raw[0], [[0.25, 0.25], [0, 0.5]])


def test_raw_confusion_from_soft_labels():
    sample = Dataset(np.zeros((2, 1)), [0, 1], 2, label_probs=[[0.6, 0.4], [0.2, 0.8]])
    raw = raw_confusion_from_predictions(np.array([0, 1]), sample, 1)
    np.testing.assert_allclose(raw[0], [[0.3, 0.1], [0.2, 0.4]])


def test_constant_classifier_confusion():
    sample = Dataset(np.zeros((4, 1)), [0, 0, 0, 1], 2)
    raw = ConstantClassifier([0.5, 0.5]).raw_confusion(sample)
    np.testing.assert_allclose(raw[0], [[0.375, 0.375], [0.125, 0.125]])


def test_empirical_confusion_in_diagonal_layout():
    # diagonal coordinates are per-class recalls
    sample = Dataset(np.zeros((4, 1)), [0, 0, 1, 1], 2)
    layout = ConfusionLayout.diagonal([[0.5, 0.5]])
    clf = DeterministicClassifier(1 - np.eye(2), FixedEta([0.9, 0.1]))
    np.testing.assert_allclose(empirical_confusion(clf, sample, layout).entries, [1.0, 0.0])


def test_empty_sample_rejected():
    with pytest.raises(EmptySample):
        empirical_confusion(ConstantClassifier([1.0, 0.0]), Dataset(np.zeros((0, 1)), [], 2),
                            ConfusionLayout.full(2))


def test_classifier_round_trip():
    model = ClassProbabilityModel([[1.0, -1.0], [0.2, 0.0]])
    clf = DeterministicClassifier(balanced_loss([0.7, 0.3]), model)
    again = classifier_from_dict(clf.to_dict())
    X = np.linspace(-2, 2, 9)[:, None]
    np.testing.assert_array_equal(again.predict(X), clf.predict(X))


# class-probability estimation


def test_zero_iterations_gives_uniform():
    d = sample_synthetic(SyntheticSpec("NormBal"), 200, seed=0)
    model = train_cpe(d, CpeConfig(iterations=0))
    np.testing.assert_allclose(model.predict_proba(d.features[:5]), 0.5)


def test_cpe_objective_never_increases():
    d = sample_synthetic(SyntheticSpec("ThreeClass2D"), 2000, seed=1)
    hist = np.array(train_cpe(d, CpeConfig(iterations=300, step=5.0)).history)
    assert np.all(np.diff(hist) <= 1e-12)


def test_cpe_symmetric_data_is_even_at_origin():
    X = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    model = train_cpe(Dataset(X, [0, 0, 1, 1], 2))
    assert model.predict_proba([[0.0]])[0] == pytest.approx([0.5, 0.5], abs=1e-9)
    assert model.predict_proba([[3.0]])[0, 1] > 0.9


def test_cpe_recovers_normbal_posterior():
    spec = SyntheticSpec("NormBal")
    model = train_cpe(sample_synthetic(spec, 20_000, seed=2))
    X = np.linspace(-2, 2, 21)[:, None]
    np.testing.assert_allclose(model.predict_proba(X), ExactEtaModel(spec).predict_proba(X), atol=0.03)


# weighted logistic regression


def test_wlr_zero_weight_class_never_predicted():
    d = sample_synthetic(SyntheticSpec("NormBal"), 500, seed=3)
    res = wlr_lmo([1.0, 0.0], d)
    assert res.confusion.reshape(2, 2)[:, 1].sum() == 0


def test_wlr_rejects_all_zero_weights():
    with pytest.raises(DegenerateLoss):
        wlr_lmo([0.0, 0.0], one_point())


def test_wlr_separable_data():
    X = np.array([[-3.0], [-2.0], [2.0], [3.0]])
    res = wlr_lmo([1.0, 1.0], Dataset(X, [0, 0, 1, 1], 2))
    np.testing.assert_allclose(res.confusion.reshape(2, 2), [[0.5, 0], [0, 0.5]])


def test_diagonal_weights():
    np.testing.assert_allclose(diagonal_weights([[0, 2], [0.5, 0]], 2), [2, 0.5])
    assert diagonal_weights([[0, 1, 2], [1, 0, 1], [1, 1, 0]], 3) is None


def test_wlr_oracle_falls_back_for_general_losses():
    d = sample_synthetic(SyntheticSpec("ThreeClass1D"), 300, seed=4)
    layout = ConfusionLayout.full(3)
    loss = np.array([[0, 1, 2], [1, 0, 1], [1, 1, 0]], dtype=float).ravel()
    with pytest.raises(DegenerateLoss):
        WlrOracle(d, layout)(loss)
    model = ExactEtaModel(SyntheticSpec("ThreeClass1D"))
    res = WlrOracle(d, layout, fallback_model=model)(loss)
    np.testing.assert_allclose(res.confusion, plugin_lmo(loss, model, d, layout).confusion)


# properties


@st.composite
def discrete_problems(draw):
    n = draw(st.integers(2, 3))
    k = draw(st.integers(1, 5))
    rng = np.random.default_rng(draw(st.integers(0, 2**31)))
    dist = DiscreteDistribution(np.arange(k, dtype=float), rng.dirichlet(np.ones(k)),
                                rng.dirichlet(np.ones(n), size=k))
    loss = rng.uniform(-1, 1, n * n)
    return dist, loss


@settings(max_examples=100, deadline=None)
@given(discrete_problems())
def test_plugin_with_true_posterior_matches_enumeration(problem):
    dist, loss = problem
    layout = dist.layout()
    res = PluginOracle(dist.model(), dist.as_dataset(), layout)(loss)
    _, _, best = enumerate_lmo(loss, dist)
    assert res.confusion @ loss == pytest.approx(best, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(discrete_problems(), st.floats(0.01, 100))
def test_loss_rescaling_leaves_classifier_unchanged(problem, scale):
    dist, loss = problem
    oracle = PluginOracle(dist.model(), dist.as_dataset(), dist.layout())
    np.testing.assert_allclose(oracle(loss * scale).confusion, oracle(loss).confusion)


@settings(max_examples=50, deadline=None)
@given(discrete_problems())
def test_single_group_plugin_equals_ungrouped(problem):
    dist, loss = problem
    sample = dist.as_dataset()
    layout = dist.layout()
    a = plugin_lmo(loss, dist.model(), sample, layout)
    b = group_plugin_lmo(loss, dist.model(), sample, np.zeros(dist.size, dtype=int), layout)
    np.testing.assert_array_equal(a.confusion, b.confusion)


def test_empirical_confusion_concentrates():
    rng = np.random.default_rng(5)
    dist = DiscreteDistribution(np.arange(4, dtype=float), [0.1, 0.2, 0.3, 0.4],
                                [[0.9, 0.1], [0.6, 0.4], [0.3, 0.7], [0.1, 0.9]])
    clf = DeterministicClassifier(1 - np.eye(2), dist.model())
    exact = clf.raw_confusion(dist.as_dataset())
    N = 100_000
    idx = rng.choice(4, N, p=dist.mass)
    y = (rng.random(N) < dist.eta[idx, 1]).astype(int)
    emp = clf.raw_confusion(Dataset(idx[:, None].astype(float), y, 2))
    assert np.abs(emp - exact).max() <= 0.01
