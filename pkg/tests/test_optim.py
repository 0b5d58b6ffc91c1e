import numpy as np
import pytest

from tsdlab.optim import Adam, Sgd, make_optimizer


def test_sgd_step():
    params = {"w": np.array([1.0, -2.0])}
    Sgd(lr=0.5).step(params, {"w": np.array([2.0, 2.0])})
    np.testing.assert_array_equal(params["w"], [0.0, -3.0])


def test_adam_first_step_is_sign_of_gradient():
    params = {"w": np.zeros(3)}
    Adam(lr=0.1).step(params, {"w": np.array([4.0, -0.5, 1e-3])})
    np.testing.assert_allclose(params["w"], [-0.1, 0.1, -0.1], rtol=1e-4)


def test_adam_reset_restarts_bias_correction():
    opt = Adam(lr=0.1)
    params = {"w": np.zeros(1), "dsigma": np.zeros(1)}
    for _ in range(5):
        opt.step(params, {"w": np.ones(1), "dsigma": np.ones(1)})
    assert opt.t == {"w": 5, "dsigma": 5}
    opt.reset(["dsigma", "absent"])
    assert "dsigma" not in opt.m
    before = params["dsigma"].copy()
    opt.step(params, {"w": np.ones(1), "dsigma": -np.ones(1)})
    assert opt.t["dsigma"] == 1
    assert params["dsigma"][0] - before[0] == pytest.approx(0.1, rel=1e-6)


def test_make_optimizer():
    assert isinstance(make_optimizer("sgd", 0.1), Sgd)
    adam = make_optimizer("adam", 0.2)
    assert isinstance(adam, Adam) and adam.lr == 0.2
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", 0.1)
