"""Tests for the independent oracles and the full check suites."""

import math

import numpy as np
import pytest

from fedreg.errors import ConfigurationError
from fedreg.model import init_params
from fedreg.oracles import (
    GRADIENT_MODEL,
    brute_force_ctc_loss,
    check_ctc,
    check_edit_distance,
    check_fedavg_equivalence,
    check_gradients,
    collapse,
    recursive_edit_distance,
    run_checks,
)


class TestOracles:
    """Tests for the reference implementations themselves."""

    def test_collapse(self):
        """Repeats merge before blanks are removed."""
        assert collapse((1, 1, 0, 1, 2, 2)) == (1, 1, 2)
        assert collapse((0, 0)) == ()

    def test_brute_force_uniform(self):
        """Six of the eight uniform three-frame paths give (1,)."""
        log_probs = np.log(np.full((3, 2), 0.5))
        assert brute_force_ctc_loss(log_probs, (1,)) == pytest.approx(-math.log(0.75))

    def test_brute_force_infeasible(self):
        """No path means infinite loss."""
        assert brute_force_ctc_loss(np.log(np.full((1, 3), 1 / 3)), (1, 2)) == math.inf

    def test_recursive_edit_distance(self):
        """kitten -> sitting needs three edits."""
        assert recursive_edit_distance("kitten", "sitting") == 3

    def test_gradient_model_count(self):
        """Frontend 56, two blocks of 600, head 45."""
        assert init_params(GRADIENT_MODEL, 0).size == 1301


class TestSuites:
    """Tests for the check suites at reduced size."""

    def test_ctc_small(self):
        """A handful of random CTC cases."""
        result = check_ctc(n_cases=20, max_frames=4, seed=1)
        assert result.passed, result.failures
        assert result.cases == 20
        assert result.max_error <= 1e-10

    def test_gradients_small(self):
        """One case per objective term."""
        result = check_gradients(n_cases=5, seed=2, tensors_per_case=1)
        assert result.passed, result.failures[:5]
        assert result.cases == 5

    def test_fedavg_equivalence_short(self):
        """Three rounds match centralized SGD."""
        result = check_fedavg_equivalence(n_steps=3, seed=1)
        assert result.passed, result.failures
        assert result.max_error <= 1e-10

    def test_fedavg_equivalence_threaded(self):
        """Worker threads do not break the equivalence."""
        assert check_fedavg_equivalence(n_steps=2, seed=3, threads=3).passed

    def test_unknown_suite(self):
        """Unknown suite names are configuration errors."""
        with pytest.raises(ConfigurationError):
            run_checks(only=["speed"])


@pytest.mark.slow
class TestFullSuites:
    """The suites at their release sizes."""

    def test_ctc(self):
        """200 cases with T <= 6, U <= 3, V <= 4."""
        result = check_ctc()
        assert result.passed, result.failures
        assert result.cases == 200

    def test_edit_distance(self):
        """All pairs up to length 5 over three symbols."""
        result = check_edit_distance()
        assert result.passed, result.failures
        assert result.cases == 364 * 364

    def test_gradients(self):
        """At least 100 cases across every objective term."""
        result = check_gradients()
        assert result.passed, result.failures[:10]
        assert result.cases >= 100

    def test_fedavg_equivalence(self):
        """Ten full-batch rounds within 1e-10 of centralized SGD."""
        result = check_fedavg_equivalence()
        assert result.passed, result.failures
        assert result.cases == 10
