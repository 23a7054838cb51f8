"""Analytic gradients vs central finite differences, float64, tiny shapes."""

import pytest
import torch

from progtok.nn_blocks import AdaNorm, CausalConv3d, EfficientUpsample, MFGroupNorm

H = 1e-5
TOL = 1e-4


def central_diff_check(f, tensors):
    """Compare autograd gradients of scalar f() against central differences
    for every element of every tensor in `tensors`."""
    for t in tensors:
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    loss = f()
    loss.backward()
    for t in tensors:
        analytic = t.grad.detach().clone()
        numeric = torch.zeros_like(analytic)
        flat = t.detach().reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + H
                up = f().item()
                flat[i] = orig - H
                down = f().item()
                flat[i] = orig
            num_flat[i] = (up - down) / (2 * H)
        scale = max(1e-6, numeric.abs().max().item())
        err = (analytic - numeric).abs().max().item() / scale
        assert err < TOL, f"gradient mismatch: relative error {err:.3e}"


def weighted_sum(y, seed=987654321):
    # probe weights come from their own seed so they never collide with the
    # inputs (w == x makes the loss stationary and the true gradient ~eps)
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(y.shape, generator=gen, dtype=torch.float64)
    return (y * w).sum()


def test_mf_group_norm_gradients():
    torch.manual_seed(0)
    norm = MFGroupNorm(4, num_groups=2).double()
    x = torch.randn(1, 4, 3, 4, 4, dtype=torch.float64)
    central_diff_check(lambda: weighted_sum(norm(x)), [x, norm.gamma])


def test_ada_norm_gradients():
    torch.manual_seed(1)
    ada = AdaNorm(4, 3, num_groups=2).double()
    with torch.no_grad():
        ada.proj.weight.normal_(0, 0.3)
        ada.proj.bias.normal_(0, 0.3)
    x = torch.randn(1, 4, 5, 3, 3, dtype=torch.float64)
    cond = torch.randn(1, 3, 3, 3, 3, dtype=torch.float64)
    central_diff_check(
        lambda: weighted_sum(ada(x, cond)),
        [x, cond, ada.proj.weight, ada.proj.bias, ada.norm.gamma],
    )


def test_causal_conv3d_gradients():
    torch.manual_seed(2)
    conv = CausalConv3d(3, 2, kernel=3, stride=(2, 1, 1)).double()
    x = torch.randn(1, 3, 4, 5, 5, dtype=torch.float64)
    central_diff_check(
        lambda: weighted_sum(conv(x)), [x, conv.conv.weight, conv.conv.bias]
    )


def test_efficient_upsample_gradients():
    torch.manual_seed(3)
    up = EfficientUpsample(3, 2, temporal=True, spatial=True).double()
    x = torch.randn(1, 3, 2, 4, 4, dtype=torch.float64)
    central_diff_check(
        lambda: weighted_sum(up(x)), [x, up.conv.conv.weight, up.conv.conv.bias]
    )
