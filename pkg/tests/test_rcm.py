import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rcdet.cafm import ConfigError
from rcdet.rcm import RCM, axial_context
from fdcheck import fd_relative_errors, projected_loss


def test_axial_context_arithmetic():
    x = torch.tensor([[1.0, 3.0], [5.0, 7.0]]).view(1, 1, 2, 2)
    assert axial_context(x)[0, 0].tolist() == [[5.0, 7.0], [9.0, 11.0]]


def test_axial_context_constant():
    x = torch.full((2, 3, 4, 5), 1.5)
    assert torch.equal(axial_context(x), torch.full((2, 3, 4, 5), 3.0))


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=40, deadline=None)
def test_axial_context_linear_and_mean_doubles(seed, a, b):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 2, 4, 7, generator=g, dtype=torch.float64)
    z = torch.randn(1, 2, 4, 7, generator=g, dtype=torch.float64)
    lhs = axial_context(a * x + b * z)
    rhs = a * axial_context(x) + b * axial_context(z)
    assert torch.allclose(lhs, rhs, atol=1e-6)
    assert abs(axial_context(x).mean().item() - 2 * x.mean().item()) < 1e-12


def test_even_kernel_rejected():
    with pytest.raises(ConfigError, match="odd"):
        RCM(4, k=4)


def test_calibration_bounds_and_half_at_zero():
    m = RCM(3, k=5).double()
    out = m.shape_calibration(torch.randn(2, 3, 6, 6, dtype=torch.float64) * 5)
    assert ((out > 0) & (out < 1)).all()
    m = RCM(3, k=5).double()
    with torch.no_grad():
        m.strip_h.bias.zero_()
        m.strip_v.bias.zero_()
    m.eval()  # fresh running stats: identity normalization
    zero = m.shape_calibration(torch.zeros(1, 3, 6, 6, dtype=torch.float64))
    assert torch.equal(zero, torch.full_like(zero, 0.5))


def _conv1d_same(row, k):
    r = len(k) // 2
    pad = np.concatenate([np.zeros(r), row, np.zeros(r)])
    return np.array([(pad[i:i + len(k)] * k).sum() for i in range(len(row))])


def test_calibration_hand_computed_on_1x5_map():
    m = RCM(1, k=3).double().eval()
    kh = np.array([0.5, -1.0, 2.0])
    kv = np.array([1.0, 3.0, -2.0])
    with torch.no_grad():
        m.strip_h.weight.copy_(torch.tensor(kh).view(1, 1, 1, 3))
        m.strip_h.bias.fill_(0.25)
        m.strip_v.weight.copy_(torch.tensor(kv).view(1, 1, 3, 1))
        m.strip_v.bias.fill_(-0.1)
    ybar = np.array([1.0, -2.0, 0.5, 3.0, -1.0])
    eps = m.norm_act[0].eps
    h = _conv1d_same(ybar, kh) + 0.25
    h = np.maximum(h / np.sqrt(1 + eps), 0)  # eval-mode BN with mean 0, var 1
    v = 3.0 * h - 0.1  # only the centre tap of the vertical strip sees a 1-row map
    expected = 1 / (1 + np.exp(-v))
    out = m.shape_calibration(torch.tensor(ybar).view(1, 1, 1, 5))
    np.testing.assert_allclose(out[0, 0, 0].detach().numpy(), expected, rtol=1e-12)


def test_fuse_identity_annihilator_contraction():
    m = RCM(4, k=3).double()
    x = torch.randn(2, 4, 5, 6, dtype=torch.float64)
    local = m.dw3(x)
    assert torch.equal(m.fuse_local_global(x, torch.ones_like(x)), local)
    assert torch.equal(m.fuse_local_global(x, torch.zeros_like(x)), torch.zeros_like(x))
    y = torch.rand_like(x).clamp(1e-6, 1 - 1e-6)
    assert (m.fuse_local_global(x, y).abs() <= local.abs()).all()
    with pytest.raises(ValueError):
        m.fuse_local_global(x, y[:, :2])


def test_forward_shape_and_residual_identity():
    m = RCM(16).double()
    x = torch.randn(2, 16, 20, 20, dtype=torch.float64)
    assert m(x).shape == x.shape
    with torch.no_grad():
        m.mlp[-1].weight.zero_()
        m.mlp[-1].bias.zero_()
    assert torch.equal(m(x), x)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_block_gradient_check(seed):
    torch.manual_seed(seed)
    m = RCM(4, k=3).double()
    x = torch.randn(1, 4, 5, 7, dtype=torch.float64, generator=torch.Generator().manual_seed(seed), requires_grad=True)
    loss = projected_loss(lambda: m(x), (1, 4, 5, 7), seed=seed)
    errs = fd_relative_errors(loss, [x, *m.parameters()])
    assert max(errs) < 1e-4
