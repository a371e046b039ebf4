import pytest

import gradient_suite


@pytest.mark.parametrize("name", sorted(gradient_suite.CASES))
def test_layer_gradient_matches_finite_differences(name):
    worst = gradient_suite.check(name)
    assert worst < gradient_suite.TOL, f"{name}: worst relative error {worst:.3e}"
