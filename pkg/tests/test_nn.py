import numpy as np
import pytest

from disentangle import autodiff as ad
from disentangle.autodiff import Tensor
from disentangle.nn import (
    SGD, BatchNorm2d, Conv2d, Linear, LookupTable, Module, frozen, init_parameters, lookup_forward, sgd_step,
)


class Net(Module):
    def __init__(self):
        super().__init__()
        self.conv = Conv2d(1, 3, 3, padding=1)
        self.bn = BatchNorm2d(3)
        self.fc = Linear(3 * 4 * 4, 2)
        self.table = LookupTable(5, 3)

    def forward(self, x):
        h = ad.relu(self.bn(self.conv(x)))
        return self.fc(ad.reshape(h, (x.shape[0], -1)))


def test_lookup_forward_row_and_range():
    t = init_parameters(LookupTable(10, 4), seed=0)
    np.testing.assert_array_equal(lookup_forward(t, 3).data, t.table.data[3])
    with pytest.raises(IndexError):
        lookup_forward(t, 10)


def test_init_parameters_statistics_and_determinism():
    a, b = init_parameters(Net(), 7), init_parameters(Net(), 7)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    big = init_parameters(Linear(400, 300), 0)
    assert big.weight.data.std() == pytest.approx(0.02, rel=0.02)
    assert np.all(big.bias.data == 0)
    net = init_parameters(Net(), 1)
    assert np.all(net.bn.gamma.data == 1) and np.all(net.bn.beta.data == 0)


def test_init_parameters_seed_changes_weights():
    a, b = init_parameters(Net(), 1), init_parameters(Net(), 2)
    assert not np.array_equal(a.fc.weight.data, b.fc.weight.data)


def test_state_dict_round_trip_includes_buffers():
    net = init_parameters(Net(), 0)
    net(Tensor(np.random.default_rng(0).normal(size=(4, 1, 4, 4))))
    state = {k: v.copy() for k, v in net.state_dict().items()}
    assert "bn.running_mean" in state and "bn.running_var" in state
    other = init_parameters(Net(), 99)
    other.load_state_dict(state)
    for k, v in other.state_dict().items():
        assert v.tobytes() == state[k].tobytes()


def test_load_state_dict_reports_shape_and_missing():
    net = Net()
    state = dict(net.state_dict())
    state["fc.weight"] = np.zeros((3, 3))
    with pytest.raises(ValueError, match="fc.weight"):
        net.load_state_dict(state)
    del state["fc.weight"]
    with pytest.raises(KeyError):
        net.load_state_dict(state)


def test_train_eval_mode_propagates():
    net = Net().eval()
    assert all(not m.training for m in net.modules())
    net.train()
    assert all(m.training for m in net.modules())


def test_sgd_step_is_plain_gradient_descent():
    net = init_parameters(Net(), 3)
    x = Tensor(np.random.default_rng(1).normal(size=(4, 1, 4, 4)))
    before = {n: p.data.copy() for n, p in net.named_parameters() if not n.startswith("table")}
    ad.backward(ad.tsum(net(x)))
    grads = {n: p.grad.copy() for n, p in net.named_parameters() if n in before}
    sgd_step([(n, p) for n, p in net.named_parameters() if n in before], 0.1)
    for n, p in net.named_parameters():
        if n in before:
            np.testing.assert_array_equal(p.data, before[n] - 0.1 * grads[n])


def test_sgd_step_names_parameter_without_gradient():
    net = Net()
    with pytest.raises(ValueError, match="conv.weight"):
        sgd_step(list(net.named_parameters()), 0.1)


def test_sgd_momentum_matches_heavy_ball():
    p = Linear(2, 1, bias=False)
    p.weight.data[...] = [[1.0, -1.0]]
    opt = SGD(p.named_parameters(), lr=0.1, momentum=0.5)
    v = np.zeros((1, 2))
    w = p.weight.data.copy()
    for g in ([1.0, 2.0], [0.5, -1.0], [0.0, 3.0]):
        p.weight.grad = np.array([g])
        opt.step()
        v = 0.5 * v + np.array([g])
        w = w - 0.1 * v
        np.testing.assert_allclose(p.weight.data, w, rtol=0, atol=1e-15)


def test_frozen_blocks_updates_and_running_moments_but_not_flow():
    net = init_parameters(Net(), 4)
    x = Tensor(np.random.default_rng(2).normal(size=(4, 1, 4, 4)), requires_grad=True)
    rm = net.bn.running_mean.copy()
    with frozen(net):
        ad.backward(ad.tsum(net(x)))
    assert all(p.grad is None for p in net.parameters())
    assert net.bn.running_mean.tobytes() == rm.tobytes()
    assert x.grad is not None and np.abs(x.grad).sum() > 0
    assert all(p.requires_grad for p in net.parameters())
    net(x)
    assert net.bn.running_mean.tobytes() != rm.tobytes()


def test_sgd_scalar_examples():
    from disentangle.nn import Parameter
    p = Parameter(np.array([1.0]), "w")
    p.grad = np.array([0.5])
    sgd_step([p], 0.1)
    assert p.data[0] == pytest.approx(0.95, abs=1e-15)
    p.grad = np.array([3.0])
    sgd_step([p], 0.0)
    assert p.data[0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_descends_quadratic_bowl():
    from disentangle.nn import Parameter
    p = Parameter(np.array([3.0, -2.0]), "w")
    for _ in range(200):
        loss = ad.tsum(p * p)
        loss.backward()
        sgd_step([p], 0.1)
    assert float(np.sum(p.data ** 2)) < 1e-6


def test_lookup_examples_and_sparse_gradient():
    t = LookupTable(2, 4)
    t.table.data[...] = np.arange(8.0).reshape(2, 4)
    np.testing.assert_array_equal(lookup_forward(t, 1).data, [4, 5, 6, 7])
    big = init_parameters(LookupTable(10, 3), seed=1)
    ad.tsum(lookup_forward(big, 3)).backward()
    g = big.table.grad
    np.testing.assert_array_equal(g[3], np.ones(3))
    assert np.count_nonzero(np.delete(g, 3, axis=0)) == 0


def test_init_std_on_large_tensor():
    lin = init_parameters(Linear(100, 100), seed=4)
    assert abs(lin.weight.data.std() - 0.02) < 0.05 * 0.02
