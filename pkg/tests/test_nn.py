import numpy as np
import pytest

import lidarseg.autodiff as ad
from lidarseg.autodiff import Tensor
from lidarseg.nn import (
    BatchNorm,
    Conv2d,
    ConvBNAct,
    Module,
    MultiDilationSeparableConv,
    SeparableConv,
    load_checkpoint,
    save_checkpoint,
)


class Small(Module):
    def __init__(self):
        super().__init__()
        self.conv = Conv2d(2, 3, 3, padding=1)
        self.bn = BatchNorm(3)
        self.blocks = [ConvBNAct(3, 3, 1), ConvBNAct(3, 4, 1)]

    def forward(self, x):
        h = self.bn(self.conv(x))
        for b in self.blocks:
            h = b(h)
        return h


def test_named_parameters_are_deterministic_and_hierarchical():
    names = [n for n, _ in Small().named_parameters()]
    assert names == [
        "conv.weight",
        "conv.bias",
        "bn.gamma",
        "bn.beta",
        "blocks.0.conv.weight",
        "blocks.0.bn.gamma",
        "blocks.0.bn.beta",
        "blocks.1.conv.weight",
        "blocks.1.bn.gamma",
        "blocks.1.bn.beta",
    ]
    assert names == [n for n, _ in Small().named_parameters()]


def test_count_parameters():
    m = Small()
    # conv 3*2*3*3 + 3 bias, bn 3+3, block0 3*3+3+3, block1 3*4+4+4
    assert m.count_parameters() == 54 + 3 + 6 + 15 + 20


def test_train_eval_propagates():
    m = Small()
    m.eval()
    assert all(not mod.training for mod in m.modules())
    m.train()
    assert all(mod.training for mod in m.modules())


def test_zero_grad():
    m = Small()
    for p in m.parameters():
        p.grad = np.ones_like(p.data)
    m.zero_grad()
    assert all(p.grad is None for p in m.parameters())


def test_batch_norm_updates_running_stats_only_in_train():
    bn = BatchNorm(2, momentum=0.5)
    x = Tensor(np.random.default_rng(0).normal(loc=4.0, size=(8, 2, 3, 3)))
    bn.train()
    bn(x)
    assert not np.allclose(bn.running_mean, 0.0)
    frozen = bn.running_mean.copy()
    bn.eval()
    bn(x)
    np.testing.assert_array_equal(bn.running_mean, frozen)


def test_batch_norm_channel_mismatch():
    with pytest.raises(ValueError):
        BatchNorm(3)(Tensor(np.zeros((1, 2, 4, 4))))


def test_separable_conv_shapes():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 8, 8)).astype(np.float32))
    assert SeparableConv(4, 6).forward(x).data.shape == (2, 6, 8, 8)
    assert SeparableConv(4, 6, stride=2).forward(x).data.shape == (2, 6, 4, 4)
    assert MultiDilationSeparableConv(4, 6, dilation=2).forward(x).data.shape == (2, 6, 8, 8)


def test_init_scale_follows_fan_in():
    conv = Conv2d(8, 8, 3, rng=np.random.default_rng(0))
    bound = 1.0 / np.sqrt(8 * 9)
    w = conv.weight.data
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.5 * bound  # actually spread over the interval


def test_checkpoint_round_trip(tmp_path):
    src = Small()
    # make buffers non-trivial
    src.bn.running_mean[:] = [1.0, 2.0, 3.0]
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, src, epoch=7)
    dst = Small()
    epoch = load_checkpoint(path, dst)
    assert epoch == 7
    for (n1, p1), (n2, p2) in zip(src.named_parameters(), dst.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    np.testing.assert_array_equal(dst.bn.running_mean, [1.0, 2.0, 3.0])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path, Small())


def test_load_state_dict_validates():
    m = Small()
    state = m.state_dict()
    state.pop("conv.weight")
    with pytest.raises(ValueError, match="missing"):
        m.load_state_dict(state)
    state = m.state_dict()
    state["conv.weight"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(ValueError, match="shape mismatch"):
        m.load_state_dict(state)


def test_forward_backward_through_modules():
    m = Small()
    x = Tensor(np.random.default_rng(2).normal(size=(2, 2, 6, 6)).astype(np.float32))
    out = m.forward(x)
    ad.sum_(ad.mul(out, out)).backward()
    assert all(p.grad is not None and p.grad.shape == p.data.shape for p in m.parameters())
