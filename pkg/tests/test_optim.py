"""
Tests for the gradient-descent and Adam update rules.
"""

import numpy as np
import pytest
from ilmar_lab import CompGraph, ParamVector, StructureError
from ilmar_lab.optim import AdamState, adam_step, sgd_step


class TestSgdStep:
    def test_plain_step(self):
        params = ParamVector({"w": [1.0, 2.0]})
        grads = ParamVector({"w": [0.5, -1.0]})
        out = sgd_step(params, grads, lr=0.1)
        np.testing.assert_allclose(out["w"], [0.95, 2.1])

    def test_zero_lr_is_identity(self):
        params = ParamVector({"w": [1.0, 2.0]})
        assert sgd_step(params, ParamVector({"w": [3.0, 4.0]}), lr=0.0).equals(params)

    def test_negative_lr_rejected(self):
        params = ParamVector({"w": [1.0]})
        with pytest.raises(ValueError):
            sgd_step(params, params, lr=-0.1)

    def test_segment_mismatch_rejected(self):
        with pytest.raises(StructureError):
            sgd_step(ParamVector({"w": [1.0]}), ParamVector({"b": [1.0]}), lr=0.1)

    def test_traced_step_stays_differentiable(self):
        graph = CompGraph()
        leaves = graph.watch(ParamVector({"w": [2.0]}))
        g = leaves["w"] * leaves["w"]
        out = sgd_step(leaves, {"w": g}, lr=0.1, traced=True)
        # d/dw (w - 0.1 w^2) = 1 - 0.2 w
        (d,) = graph.gradients(out["w"].sum(), [leaves["w"]])
        assert d.item() == pytest.approx(0.6)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        params = ParamVector({"w": [1.0, -1.0]})
        state = AdamState.zeros_like(params)
        out, state = adam_step(state, params, ParamVector({"w": [0.3, -2.0]}), lr=0.01)
        np.testing.assert_allclose(out["w"], [0.99, -0.99], atol=1e-6)
        assert state.step == 1

    def test_zero_gradient_does_not_move(self):
        params = ParamVector({"w": [1.0]})
        out, _ = adam_step(AdamState.zeros_like(params), params, ParamVector({"w": [0.0]}), lr=0.1)
        np.testing.assert_allclose(out["w"], [1.0])

    def test_minimizes_quadratic(self):
        params = ParamVector({"w": [3.0, -2.0]})
        state = AdamState.zeros_like(params)
        for _ in range(500):
            params, state = adam_step(state, params, params.map(lambda w: 2.0 * w), lr=0.05)
        assert np.max(np.abs(params["w"])) < 0.1

    def test_structure_checked(self):
        params = ParamVector({"w": [1.0]})
        with pytest.raises(StructureError):
            adam_step(AdamState.zeros_like(params), params, ParamVector({"w": [1.0, 2.0]}), lr=0.1)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
