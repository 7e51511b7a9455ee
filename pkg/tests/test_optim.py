"""
Tests for the Adam optimizer
"""

import numpy as np
import pytest

from src.optim import Adam


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        params = {"x": np.array([1.0, -2.0, 3.0])}
        Adam({"x": 0.1}).step(params, {"x": np.array([5.0, -0.01, 2.0])})
        np.testing.assert_allclose(params["x"], [0.9, -1.9, 2.9])

    def test_zero_learning_rate_freezes_group(self):
        params = {"x": np.ones(3), "y": np.ones(3)}
        Adam({"x": 0.1, "y": 0.0}).step(params, {"x": np.ones(3), "y": np.ones(3)})
        np.testing.assert_array_equal(params["y"], 1.0)
        assert np.all(params["x"] < 1.0)

    def test_zero_gradient_no_motion(self):
        params = {"x": np.array([0.5, 0.5])}
        Adam({"x": 0.1}).step(params, {"x": np.zeros(2)})
        np.testing.assert_array_equal(params["x"], [0.5, 0.5])

    def test_minimises_quadratic(self):
        target = np.array([0.3, -0.7])
        params = {"x": np.zeros(2)}
        optimizer = Adam({"x": 0.05})
        for _ in range(500):
            optimizer.step(params, {"x": 2.0 * (params["x"] - target)})
        np.testing.assert_allclose(params["x"], target, atol=1e-2)
        assert optimizer.moments_finite()
        assert optimizer.step_count == 500

    def test_updates_in_place(self):
        x = np.zeros(2)
        Adam({"x": 0.1}).step({"x": x}, {"x": np.ones(2)})
        assert x[0] == pytest.approx(-0.1)
