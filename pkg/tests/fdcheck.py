"""Central finite-difference gradient oracle, independent of autograd's own checker."""
import torch


def fd_relative_errors(loss_fn, tensors, eps=1e-5, zero_tol=1e-6):
    """Relative error ||g_fd - g_ad|| / max(||g_fd||, ||g_ad||) per tensor.

    A tensor whose two gradients both have norm below ``zero_tol`` counts as
    agreeing (error 0): e.g. a conv bias cancelled by the batch norm after it,
    where the FD quotient is pure rounding noise.

    ``loss_fn`` must return a scalar and read ``tensors`` (leaf tensors with
    requires_grad) afresh on every call.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad.detach().clone() for t in tensors]
    errs = []
    with torch.no_grad():
        for t, ga in zip(tensors, analytic):
            flat = t.view(-1)
            gf = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                gf[i] = (up - down) / (2 * eps)
            gf = gf.view_as(t)
            denom = max(gf.norm().item(), ga.norm().item())
            errs.append(0.0 if denom < zero_tol else (gf - ga).norm().item() / denom)
    return errs


def projected_loss(fn, out_shape, seed=0, dtype=torch.float64):
    """Scalar loss <fn(), W> with a fixed random W, so every output entry matters."""
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(out_shape, generator=g, dtype=dtype)
    return lambda: (fn() * w).sum()
