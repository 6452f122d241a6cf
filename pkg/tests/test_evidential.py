import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcue.errors import ConfigurationError, InvalidInputError
from dualcue.evidential import dirichlet_summary, evidence_from_logits


class TestEvidenceFromLogits:
    def test_zero_logits_rectifier(self):
        e = evidence_from_logits([0.0, 0.0], "rectifier")
        np.testing.assert_array_equal(e.numpy(), [0.0, 0.0])

    def test_zero_logits_exponential(self):
        e = evidence_from_logits([0.0, 0.0], "clamped_exponential")
        np.testing.assert_array_equal(e.numpy(), [1.0, 1.0])

    def test_rectifier_negative_clipped(self):
        e = evidence_from_logits([2.0, -1.0], "rectifier")
        np.testing.assert_array_equal(e.numpy(), [2.0, 0.0])

    def test_exponential_clamps_at_ten(self):
        e = evidence_from_logits([50.0, -50.0], "clamped_exponential")
        np.testing.assert_allclose(e.numpy(), [math.exp(10), math.exp(-10)], rtol=1e-15)

    def test_smooth_rectifier(self):
        e = evidence_from_logits([0.0, 3.0], "smooth_rectifier")
        np.testing.assert_allclose(e.numpy(), [math.log(2.0), math.log1p(math.exp(3.0))], rtol=1e-15)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            evidence_from_logits([float("nan"), 0.0])
        with pytest.raises(InvalidInputError):
            evidence_from_logits([float("inf"), 0.0])

    def test_single_class_rejected(self):
        with pytest.raises(ConfigurationError):
            evidence_from_logits([1.0])

    def test_unknown_activation(self):
        with pytest.raises(ConfigurationError):
            evidence_from_logits([1.0, 2.0], "sigmoid")

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.integers(0, 5), st.floats(0.01, 5.0))
    def test_exponential_monotone_in_each_logit(self, logits, k, delta):
        k = k % len(logits)
        base = evidence_from_logits(logits)
        bumped = list(logits)
        bumped[k] += delta
        after = evidence_from_logits(bumped)
        assert after[k] >= base[k]
        others = [i for i in range(len(logits)) if i != k]
        np.testing.assert_array_equal(after[others].numpy(), base[others].numpy())


class TestDirichletSummary:
    def test_zero_evidence(self):
        s = dirichlet_summary([0.0, 0.0])
        assert float(s.strength) == 2.0
        assert float(s.uncertainty) == 1.0
        assert float(s.prob) == 0.5

    def test_confident(self):
        s = dirichlet_summary([8.0, 0.0])
        assert float(s.strength) == 10.0
        assert float(s.uncertainty) == pytest.approx(0.2, abs=1e-15)
        assert float(s.prob) == pytest.approx(0.9, abs=1e-15)
        assert int(s.y_hat) == 0

    def test_tie_goes_to_lower_class(self):
        s = dirichlet_summary([3.0, 3.0])
        assert float(s.strength) == 8.0
        assert float(s.uncertainty) == 0.25
        assert float(s.prob) == 0.5
        assert int(s.y_hat) == 0

    def test_batched_ties(self):
        s = dirichlet_summary(torch.tensor([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0], [0.0, 0.0, 0.0]], dtype=torch.float64))
        assert s.y_hat.tolist() == [0, 1, 0]

    def test_negative_evidence_rejected(self):
        with pytest.raises(InvalidInputError):
            dirichlet_summary([1.0, -0.1])

    def test_u_is_one_only_at_zero_evidence(self):
        assert float(dirichlet_summary([0.0, 0.0, 0.0]).uncertainty) == 1.0
        assert float(dirichlet_summary([0.0, 1e-9, 0.0]).uncertainty) < 1.0

    @settings(max_examples=200)
    @given(st.lists(st.floats(0, 1e6), min_size=2, max_size=8))
    def test_identities(self, e):
        s = dirichlet_summary(e)
        k = len(e)
        assert abs(float(s.uncertainty * s.strength) - k) <= 1e-12 * k
        assert abs(float(s.belief.sum()) - 1.0) <= 1e-12
        assert float(s.prob) == float(s.belief.max())
        assert float(s.prob) >= 1.0 / k - 1e-15
        assert 0.0 < float(s.uncertainty) <= 1.0

    @given(st.lists(st.floats(0, 1e4), min_size=2, max_size=6), st.integers(0, 5), st.floats(1e-3, 10))
    def test_more_evidence_less_uncertainty(self, e, k, delta):
        k = k % len(e)
        bumped = list(e)
        bumped[k] += delta
        assert float(dirichlet_summary(bumped).uncertainty) < float(dirichlet_summary(e).uncertainty)
