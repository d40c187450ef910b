import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taro.gradcheck import numeric_grad, relative_error, tiny_forest
from taro.hierhead import (
    EPS,
    StrengthParams,
    build_class_targets,
    classification_loss,
    hier_activation,
    hier_activation_backward,
    hier_activation_grads,
    sigmoid_activations,
)
from taro.matching import MatchResult
from taro.taxonomy import TaxonomyError, multi_hot_target, parse_taxonomy


@pytest.fixture
def pair():
    """One root with a single leaf: ids are P=0, C=1."""
    return parse_taxonomy("P -> C")


@pytest.fixture
def forest():
    return tiny_forest()


def _alpha(forest, value):
    return StrengthParams.init(forest, value)


class TestSigmoid:
    def test_values(self):
        y = sigmoid_activations([0.0, 20.0, -20.0])
        assert y[0] == 0.5
        assert abs(y[1] - 1) < 1e-8 and y[2] < 1e-8

    def test_monotone(self):
        x = np.linspace(-30, 30, 301)
        assert np.all(np.diff(sigmoid_activations(x)) >= 0)


class TestActivation:
    def test_substitution(self, pair):
        y = np.array([[0.5, 0.8]])
        out = hier_activation(y, _alpha(pair, 1.0), pair)
        assert out[0, 1] == pytest.approx(0.4, abs=1e-15)
        assert out[0, 0] == 0.5

    def test_alpha_zero_is_identity(self, forest):
        y = np.random.default_rng(0).uniform(0.01, 0.99, (4, len(forest)))
        np.testing.assert_array_equal(hier_activation(y, _alpha(forest, 0.0), forest), y)

    def test_roots_unchanged(self, forest):
        y = np.random.default_rng(1).uniform(0.01, 0.99, (3, len(forest)))
        out = hier_activation(y, _alpha(forest, 2.5), forest)
        for r in forest.roots:
            np.testing.assert_array_equal(out[:, r], y[:, r])

    def test_raw_parent_vs_compound(self, forest):
        y = np.full((1, len(forest)), 0.5)
        leaf = forest.id("a0")
        raw = hier_activation(y, _alpha(forest, 1.0), forest)
        comp = hier_activation(y, _alpha(forest, 1.0), forest, compound=True)
        assert raw[0, leaf] == pytest.approx(0.25)
        assert comp[0, leaf] == pytest.approx(0.125)

    def test_parent_clamped(self, pair):
        y = np.array([[0.0, 0.8]])
        out = hier_activation(y, _alpha(pair, 1.0), pair)
        assert out[0, 1] == pytest.approx(0.8 * EPS)

    def test_accepts_plain_vector_alpha(self, pair):
        y = np.array([[0.5, 0.8]])
        np.testing.assert_array_equal(hier_activation(y, np.array([0.0, 1.0]), pair),
                                      hier_activation(y, _alpha(pair, 1.0), pair))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(1e-3, 1 - 1e-3)),
       arrays(np.float64, 7, elements=st.floats(0.01, 5.0)))
def test_child_never_exceeds_raw_sigmoid(y, a):
    forest = tiny_forest()
    alpha = _alpha(forest, 1.0)
    alpha.alpha[alpha.nonroot] = a[alpha.nonroot]
    out = hier_activation(y, alpha, forest)
    assert np.all(out <= y + 1e-15)
    for c in forest.nonleaves + forest.leaves:
        if forest.parent(c) is not None:
            assert np.all(out[:, c] < y[:, c])


class TestLocalPartials:
    def test_hand_values(self, pair):
        y = np.array([[0.5, 0.8]])
        d_self, d_parent, d_alpha = hier_activation_grads(y, _alpha(pair, 1.0), pair)
        assert d_self[0, 1] == pytest.approx(0.5)
        assert d_parent[0, 1] == pytest.approx(0.8)
        assert d_alpha[0, 1] == pytest.approx(0.4 * np.log(0.5))
        assert d_alpha[0, 1] == pytest.approx(-0.27726, abs=1e-5)
        assert (d_self[0, 0], d_parent[0, 0], d_alpha[0, 0]) == (1.0, 0.0, 0.0)

    def test_alpha_zero_parent_partial(self, forest):
        y = np.random.default_rng(2).uniform(0.1, 0.9, (2, len(forest)))
        _, d_parent, _ = hier_activation_grads(y, _alpha(forest, 0.0), forest)
        np.testing.assert_array_equal(d_parent, 0.0)

    def test_partials_match_differences(self, pair):
        rng = np.random.default_rng(3)
        for _ in range(50):
            y = rng.uniform(0.05, 0.95, (1, 2))
            alpha = _alpha(pair, float(rng.uniform(0, 3)))
            d_self, d_parent, d_alpha = hier_activation_grads(y, alpha, pair)

            def f():
                return hier_activation(y, alpha, pair)[0, 1]

            num_y = numeric_grad(f, y)
            num_a = numeric_grad(f, alpha.alpha)
            assert relative_error(d_self[0, 1], num_y[0, 1]) < 1e-5
            assert relative_error(d_parent[0, 1], num_y[0, 0]) < 1e-5
            assert relative_error(d_alpha[0, 1], num_a[1]) < 1e-5


class TestBackward:
    @pytest.mark.parametrize("compound", [False, True])
    def test_matches_differences(self, forest, compound):
        rng = np.random.default_rng(4)
        for _ in range(20):
            y = rng.uniform(0.05, 0.95, (3, len(forest)))
            alpha = _alpha(forest, 1.0)
            alpha.alpha[alpha.nonroot] = rng.uniform(0, 3, int(alpha.nonroot.sum()))
            w = rng.normal(size=y.shape)

            def f():
                return float(np.sum(w * hier_activation(y, alpha, forest, compound)))

            g_y, g_a = hier_activation_backward(y, alpha, forest, w, compound)
            assert relative_error(g_y, numeric_grad(f, y)) < 1e-5
            num_a = numeric_grad(f, alpha.alpha)
            assert relative_error(g_a[alpha.nonroot], num_a[alpha.nonroot]) < 1e-5
            assert np.all(g_a[~alpha.nonroot] == 0)

    def test_loss_chain_to_logits(self, forest):
        """BCE -> coupling -> sigmoid, differentiated end to end."""
        rng = np.random.default_rng(5)
        Q = 4
        logits = rng.normal(0, 1.5, (Q, len(forest)))
        alpha = _alpha(forest, 1.0)
        alpha.alpha[alpha.nonroot] = rng.uniform(0.2, 2.0, int(alpha.nonroot.sum()))
        targets = build_class_targets(MatchResult(((0, 2),), 0.0), forest, Q, [forest.id("b1")])

        def f():
            ytil = hier_activation(sigmoid_activations(logits), alpha, forest)
            return classification_loss(ytil, targets)[0]

        y = sigmoid_activations(logits)
        _, g_til = classification_loss(hier_activation(y, alpha, forest), targets)
        g_y, g_a = hier_activation_backward(y, alpha, forest, g_til)
        assert relative_error(g_y * y * (1 - y), numeric_grad(f, logits)) < 1e-5
        num_a = numeric_grad(f, alpha.alpha)
        assert relative_error(g_a[alpha.nonroot], num_a[alpha.nonroot]) < 1e-5


class TestClassificationLoss:
    def test_single_cell_ln2(self):
        t = build_class_targets((), parse_taxonomy("Solo"), 1, [])
        loss, grad = classification_loss(np.array([[0.5]]),
                                         type(t)(np.array([[1.0]]), np.array([[1.0]])))
        assert loss == pytest.approx(np.log(2))
        assert grad[0, 0] == pytest.approx(-2.0)

    def test_exact_targets_near_zero(self, forest):
        t = build_class_targets(MatchResult(((0, 1),), 0.0), forest, 3, [forest.id("a0")])
        loss, _ = classification_loss(t.targets.copy(), t)
        assert loss < 1e-5

    def test_masked_positions_inert(self, forest):
        rng = np.random.default_rng(6)
        t = build_class_targets(MatchResult(((0, 1),), 0.0), forest, 3, [forest.id("a0")])
        ytil = rng.uniform(0.1, 0.9, (3, len(forest)))
        loss, grad = classification_loss(ytil, t)
        assert np.all(grad[t.mask == 0] == 0)
        perturbed = ytil.copy()
        perturbed[t.mask == 0] = rng.uniform(0.1, 0.9, int((t.mask == 0).sum()))
        assert classification_loss(perturbed, t)[0] == loss

    def test_fully_masked(self, forest, caplog):
        t = build_class_targets((), forest, 2, [])
        t = type(t)(t.targets, np.zeros_like(t.mask))
        loss, grad = classification_loss(np.full((2, len(forest)), 0.3), t)
        assert loss == 0.0 and not grad.any()
        assert "masked" in caplog.text

    def test_column_weights(self):
        t = type(build_class_targets((), parse_taxonomy("A\nB"), 1, []))
        ct = t(np.array([[1.0, 0.0]]), np.ones((1, 2)))
        ytil = np.array([[0.5, 0.5]])
        plain = classification_loss(ytil, ct)[0]
        weighted = classification_loss(ytil, ct, weights=[3.0, 1.0])[0]
        # both cells cost ln 2, so any weighting of the mean leaves the value unchanged
        assert plain == pytest.approx(weighted)


class TestTargets:
    def test_one_match(self):
        f = parse_taxonomy("Vehicles -> Land Vehicle\nLand Vehicle -> Car\nLand Vehicle -> Bus\n")
        car = f.id("Car")
        t = build_class_targets(MatchResult(((0, 1),), 0.0), f, 3, [car])
        np.testing.assert_array_equal(t.targets[1], multi_hot_target(f, car))
        np.testing.assert_array_equal(t.mask[1], 1.0)
        for row in (0, 2):
            np.testing.assert_array_equal(t.targets[row], 0.0)
            np.testing.assert_array_equal(t.mask[row, f.leaf_slice], 1.0)
            np.testing.assert_array_equal(t.mask[row, : f.n_nonleaf], 0.0)

    def test_no_matches(self, forest):
        t = build_class_targets((), forest, 4, [])
        assert not t.targets.any()
        assert t.mask[:, : forest.n_nonleaf].sum() == 0
        assert t.mask[:, forest.leaf_slice].all()

    def test_all_matched(self, forest):
        leaves = forest.leaves[:3]
        pairs = tuple((g, g) for g in range(3))
        t = build_class_targets(pairs, forest, 3, leaves)
        assert t.mask.all()

    def test_non_leaf_rejected(self, forest):
        with pytest.raises(TaxonomyError):
            build_class_targets(((0, 0),), forest, 2, [forest.id("a")])
