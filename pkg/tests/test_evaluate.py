import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepfault.errors import ArgumentError
from deepfault.evaluate import (
    activation_increase_ratio,
    bar_chart_svg,
    counts_to_csv,
    distances,
    mann_whitney_u,
    midranks,
    per_layer_counts,
    summarize,
)
from deepfault.network import LabeledInput, Network, NeuronId
from deepfault.suspiciousness import Measure, SuspiciousnessReport
from deepfault.synthesis import SynthesisConfig, synthesize_one
from oracles import per_class_accuracy, permutation_p, u_statistic


def gain_net(gain):
    w1 = np.array([[gain, 0.0], [0.0, 1.0]])
    w2 = np.array([[0.0, 1.0], [0.0, -1.0]])
    return Network([w1, w2], [np.zeros(2), np.zeros(2)])


def results_for(gain, points=((0.5, 0.5), (0.2, 0.9))):
    net = gain_net(gain)
    out = [synthesize_one(net, LabeledInput(np.array(p), 0), [NeuronId(2, 1)], SynthesisConfig())
           for p in points]
    return net, out


class TestDistances:
    def test_example(self):
        l1, l2, linf = distances([0.0, 0.5], [0.1, 0.4])
        assert l1 == pytest.approx(0.2, abs=1e-15)
        assert l2 == pytest.approx(0.141421, abs=1e-6)
        assert l2 == pytest.approx(math.sqrt(0.02), abs=1e-15)
        assert linf == pytest.approx(0.1, abs=1e-15)

    def test_equal_vectors(self):
        assert distances([1.0, 2.0], [1.0, 2.0]) == (0.0, 0.0, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(ArgumentError):
            distances([1.0], [1.0, 2.0])


class TestActivationIncrease:
    def test_all_increase(self):
        _, results = results_for(5.0)
        assert activation_increase_ratio(results) == 1.0

    def test_zero_gradient_gives_zero(self):
        _, results = results_for(0.0)
        assert activation_increase_ratio(results) == 0.0

    def test_explicit_neurons(self):
        _, results = results_for(5.0)
        # neuron (2,2) copies x[1], which the step leaves alone
        assert activation_increase_ratio(results, [NeuronId(2, 1), NeuronId(2, 2)]) == 0.5

    def test_empty(self):
        with pytest.raises(ArgumentError):
            activation_increase_ratio([])


class TestMannWhitney:
    def test_separated_triples(self):
        u, p = mann_whitney_u([1, 2, 3], [4, 5, 6])
        assert u == 0.0
        # 2 of the C(6,3) = 20 splits are as extreme
        assert p == pytest.approx(0.1, abs=1e-15)

    def test_identical_samples(self):
        assert mann_whitney_u([3, 1, 2], [3, 1, 2])[1] == 1.0
        assert mann_whitney_u([0.5] * 10, [0.5] * 10)[1] == 1.0

    def test_separated_tens(self):
        u, p = mann_whitney_u(range(1, 11), range(11, 21))
        assert u == 0.0
        assert p < 0.001
        assert mann_whitney_u(range(1, 11), range(11, 21), method="exact")[1] == pytest.approx(
            2 / math.comb(20, 10), rel=1e-12)

    def test_u_counts_ties_half(self):
        assert mann_whitney_u([1, 2, 2], [2, 3])[0] == u_statistic([1, 2, 2], [2, 3])

    def test_midranks(self):
        np.testing.assert_array_equal(midranks([10, 20, 20, 5]), [2.0, 3.5, 3.5, 1.0])

    def test_empty(self):
        with pytest.raises(ArgumentError):
            mann_whitney_u([], [1.0])

    def test_unknown_method(self):
        with pytest.raises(ArgumentError):
            mann_whitney_u([1.0], [2.0], method="bootstrap")

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 6), min_size=1, max_size=12),
           st.lists(st.integers(0, 6), min_size=1, max_size=12))
    def test_symmetry(self, a, b):
        u_ab, p_ab = mann_whitney_u(a, b)
        u_ba, p_ba = mann_whitney_u(b, a)
        assert u_ab + u_ba == len(a) * len(b)
        assert p_ab == pytest.approx(p_ba, abs=1e-12)
        assert 0.0 <= p_ab <= 1.0

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=5),
           st.lists(st.integers(0, 4), min_size=1, max_size=5))
    def test_exact_matches_permutation_oracle_with_ties(self, a, b):
        assert mann_whitney_u(a, b)[1] == pytest.approx(permutation_p(a, b), abs=1e-12)

    @pytest.mark.parametrize("n,m", [(8, 8), (8, 12), (10, 10), (12, 9), (12, 12)])
    def test_normal_close_to_exact(self, n, m):
        rng = np.random.default_rng(n * 100 + m)
        for _ in range(40):
            pooled = rng.permutation(n + m).astype(float)
            a, b = pooled[:n], pooled[n:]
            exact = mann_whitney_u(a, b, method="exact")[1]
            normal = mann_whitney_u(a, b, method="normal")[1]
            assert abs(exact - normal) < 0.02

    def test_normal_used_for_larger_samples(self):
        a, b = np.arange(9.0), np.arange(9.0) + 4.5
        assert mann_whitney_u(a, b)[1] == mann_whitney_u(a, b, method="normal")[1]


class TestSummary:
    def test_still_correct_means_accuracy_one(self):
        net, results = results_for(5.0)
        report = SuspiciousnessReport(Measure.ochiai(), (NeuronId(2, 1), NeuronId(2, 2)), 1,
                                      "all", {NeuronId(2, 1): 1.0, NeuronId(2, 2): 0.0})
        summary = summarize(net, results, report, elapsed=0.5)
        assert summary.accuracy == 1.0
        assert summary.n_results == 2
        assert summary.per_layer_counts == {2: 1}
        assert summary.distances.mean_Linf == pytest.approx(0.1)
        assert summary.loss == pytest.approx(np.mean([r.loss() for r in results]))
        assert summary.to_dict()["per_layer_counts"] == {"2": 1}

    def test_flipped_prediction_counts_against_accuracy(self):
        # raising neuron (2,2) drags x[1] below zero, so class 1 wins after synthesis
        net = Network([np.array([[1.0, 0.0], [0.0, -5.0]]), np.array([[0.0, -1.0], [0.0, 1.0]])],
                      [np.zeros(2), np.zeros(2)])
        t = LabeledInput(np.array([0.5, 0.05]), 0)
        result = synthesize_one(net, t, [NeuronId(2, 2)], SynthesisConfig(domain_min=-1.0))
        assert result.synthesized[1] < 0
        assert not result.still_correct
        report = SuspiciousnessReport(Measure.ochiai(), (NeuronId(2, 2), NeuronId(2, 1)), 1, "all",
                                      {NeuronId(2, 2): 1.0, NeuronId(2, 1): 0.0})
        assert summarize(net, [result], report).accuracy == 0.0

    def test_per_layer_counts_sum_to_k(self):
        net = Network([np.eye(3), np.eye(3), np.eye(3)], [np.zeros(3)] * 3)
        selected = [NeuronId(3, 1), NeuronId(3, 2), NeuronId(2, 3)]
        counts = per_layer_counts(net, selected)
        assert counts == {2: 1, 3: 2}
        assert sum(counts.values()) == len(selected)

    def test_empty(self, identity_net):
        report = SuspiciousnessReport(Measure.ochiai(), (NeuronId(2, 1),), 1)
        with pytest.raises(ArgumentError):
            summarize(identity_net, [], report)

    def test_distribution_outputs(self):
        counts = {2: 1, 3: 4, 4: 0}
        assert counts_to_csv(counts) == "layer,count\n2,1\n3,4\n4,0\n"
        svg = bar_chart_svg(counts)
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
        assert svg.count("<rect") == 3


@pytest.mark.mnist
@pytest.mark.slow
class TestMnistEffect:
    def test_ochiai_accuracy_below_random(self, mnist_experiment):
        runs = mnist_experiment["runs"]
        ochiai = per_class_accuracy(runs["ochiai", 10]).mean()
        random = np.mean([per_class_accuracy(runs["random", s]).mean() for s in range(5)])
        assert ochiai <= 0.5
        assert random >= 0.6

    def test_top1_activation_increase(self, mnist_experiment):
        runs = mnist_experiment["runs"]
        for name in ("tarantula", "ochiai", "dstar"):
            assert activation_increase_ratio(runs[name, 1]) >= 0.85

    def test_at_most_ten_per_class(self, mnist_experiment):
        results = mnist_experiment["runs"]["ochiai", 10]
        labels = [r.label for r in results]
        assert len(results) <= 100
        assert set(labels) == set(range(10))
        assert max(labels.count(c) for c in range(10)) <= 10


def test_oracle_sanity():
    # the oracle itself reproduces the textbook 3-vs-3 value
    assert permutation_p([1, 2, 3], [4, 5, 6]) == pytest.approx(0.1)
    assert len(list(itertools.combinations(range(6), 3))) == 20
