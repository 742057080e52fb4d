import numpy as np
import pytest
import torch

from surfeltrace.optim import Adam, ParamGroup


def make(values, lr=0.1, normalize=False):
    p = torch.tensor(values, dtype=torch.float64)
    return p, Adam([ParamGroup("p", [p], lr, normalize)])


def test_zero_gradient_leaves_params():
    p, opt = make([1.0, -2.0, 3.0])
    before = p.clone()
    for _ in range(3):
        opt.step({"p.0": torch.zeros(3, dtype=torch.float64)})
    assert torch.equal(p, before)


def test_first_step_is_sign_scaled():
    p, opt = make([0.0, 0.0, 0.0], lr=0.01)
    opt.step({"p.0": torch.tensor([3.0, -0.5, 1e-3], dtype=torch.float64)})
    assert np.allclose(p.numpy(), [-0.01, 0.01, -0.01], rtol=1e-9)


def test_three_step_hand_computation():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-15
    p, opt = make([1.0], lr=lr)
    grads = [0.5, -1.0, 2.0]
    m = v = 0.0
    x = 1.0
    for t, g in enumerate(grads, 1):
        opt.step({"p.0": torch.tensor([g], dtype=torch.float64)})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
        assert p.item() == pytest.approx(x, rel=1e-12)
        assert opt.state.m["p.0"].item() == pytest.approx(m, rel=1e-12)
        assert opt.state.v["p.0"].item() == pytest.approx(v, rel=1e-12)
    assert opt.state.step["p.0"] == 3


def test_shape_mismatch_raises():
    p, opt = make([1.0, 2.0])
    with pytest.raises(ValueError):
        opt.step({"p.0": torch.zeros(3, dtype=torch.float64)})


def test_quaternions_renormalized():
    q = torch.tensor([[1.0, 0.0, 0.0, 0.0], [0.5, 0.5, 0.5, 0.5]], dtype=torch.float64)
    opt = Adam([ParamGroup("rot", [q], 0.1, normalize=True)])
    opt.step({"rot.0": torch.randn(2, 4, dtype=torch.float64)})
    assert np.allclose(torch.linalg.vector_norm(q, dim=-1).numpy(), 1.0)


def test_zero_lr_group_accumulates_moments_only():
    a = torch.tensor([1.0], dtype=torch.float64)
    b = torch.tensor([1.0], dtype=torch.float64)
    opt = Adam([ParamGroup("a", [a], 0.0), ParamGroup("b", [b], 0.1)])
    opt.step({"a.0": torch.ones(1, dtype=torch.float64), "b.0": torch.ones(1, dtype=torch.float64)})
    assert a.item() == 1.0 and b.item() == pytest.approx(0.9)
    assert opt.state.m["a.0"].item() == pytest.approx(0.1)


def test_only_restricts_groups():
    a = torch.tensor([1.0], dtype=torch.float64)
    b = torch.tensor([1.0], dtype=torch.float64)
    opt = Adam([ParamGroup("a", [a], 0.1), ParamGroup("b", [b], 0.1)])
    g = {"a.0": torch.ones(1, dtype=torch.float64), "b.0": torch.ones(1, dtype=torch.float64)}
    opt.step(g, only={"b"})
    assert a.item() == 1.0 and opt.state.step["a.0"] == 0 and b.item() != 1.0


def test_uses_param_grad_by_default():
    p = torch.tensor([2.0], dtype=torch.float64, requires_grad=True)
    opt = Adam([ParamGroup("p", [p], 0.5)])
    (p * p).sum().backward()
    opt.step()
    assert p.item() == pytest.approx(1.5)
    opt.zero_grad()
    assert p.grad is None


def test_state_round_trip():
    p, opt = make([1.0, 2.0])
    opt.step({"p.0": torch.tensor([0.3, -0.2], dtype=torch.float64)})
    arrays = opt.state_arrays()
    q, opt2 = make([1.0, 2.0])
    opt2.load_state_arrays(arrays)
    assert opt2.state.step == opt.state.step
    assert torch.equal(opt2.state.m["p.0"], opt.state.m["p.0"])
    assert torch.equal(opt2.state.v["p.0"], opt.state.v["p.0"])
    with pytest.raises(KeyError):
        opt.group("missing")
