"""Image-space and gradient-space augmentations used by the attack loop.

Every randomized function takes an explicit ``torch.Generator`` and is a pure
function of its inputs and that stream.
"""

import math

import torch
import torch.nn.functional as F


def di_transform(x, prob, rng, max_pad_ratio=1.1):
    """Diverse-input transform: random nearest resize then random zero pad.

    With probability ``prob`` (one draw per batch) the batch is resized to a
    random side in ``[H, floor(max_pad_ratio * H)]`` and zero padded at a
    random offset to ``floor(max_pad_ratio * H)``. Otherwise ``x`` is
    returned unchanged.
    """
    if not 0 <= prob <= 1:
        raise ValueError(f"prob must lie in [0, 1], got {prob}")
    apply = torch.rand(1, generator=rng).item() < prob
    return _resize_pad(x, rng, max_pad_ratio) if apply else x


def _resize_pad(x, rng, max_pad_ratio):
    h, w = x.shape[-2:]
    h_max = int(math.floor(max_pad_ratio * h))
    w_max = int(math.floor(max_pad_ratio * w))
    rnd = int(torch.randint(h, h_max + 1, (1,), generator=rng))
    rnd_w = w if h_max == h else int(round(rnd * w / h))
    rnd_w = min(max(rnd_w, w), w_max)
    top = int(torch.randint(0, h_max - rnd + 1, (1,), generator=rng))
    left = int(torch.randint(0, w_max - rnd_w + 1, (1,), generator=rng))
    if (rnd, rnd_w) != (h, w):
        x = F.interpolate(x, size=(rnd, rnd_w), mode="nearest")
    return F.pad(x, (left, w_max - rnd_w - left, top, h_max - rnd - top))


def rdi_transform(x, rng, max_pad_ratio=1.1):
    """Resized diverse input: DI with probability one, resized back to H x W."""
    h, w = x.shape[-2:]
    out = _resize_pad(x, rng, max_pad_ratio)
    if out.shape[-2:] == (h, w):
        return out
    return F.interpolate(out, size=(h, w), mode="bilinear", align_corners=False)


def gaussian_kernel(kernel_size, sigma):
    """2-D Gaussian with standard deviation ``sigma`` pixels, normalized to sum 1."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    r = kernel_size // 2
    d = torch.arange(-r, r + 1, dtype=torch.float64)
    g = torch.exp(-(d**2) / (2 * sigma**2))
    k = torch.outer(g, g)
    return k / k.sum()


def ti_smooth(g, kernel_size=5, sigma=3.0):
    """Translation-invariant gradient smoothing (depthwise Gaussian, same padding)."""
    kernel = gaussian_kernel(kernel_size, sigma)
    if kernel_size == 1:
        return g
    c = g.shape[1]
    weight = kernel.to(device=g.device, dtype=g.dtype).expand(c, 1, kernel_size, kernel_size).contiguous()
    return F.conv2d(g, weight, padding=kernel_size // 2, groups=c)


def si_copies(x, m):
    """Scale copies ``x / 2**i`` for ``i`` in ``0..m-1``."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    return [x / (2**i) for i in range(m)]


def admix_copies(x, pool, w, m2, m1, rng):
    """Admix copies ``(x + w * x_mix) / 2**i``, ``m2 * m1`` of them.

    ``x_mix`` is drawn per image from ``pool`` (detached); the returned
    list is ordered scale-major.
    """
    if pool is None or len(pool) == 0:
        raise ValueError("admix pool is empty")
    if m2 < 1 or m1 < 1:
        raise ValueError("admix_count and admix_scales must be >= 1")
    mixed = []
    for _ in range(m2):
        idx = torch.randint(0, len(pool), (x.shape[0],), generator=rng)
        mixed.append(x + w * pool[idx].detach())
    return [m / (2**i) for i in range(m1) for m in mixed]


def vt_gradient(loss_grad_fn, x, n, bound, v_prev, rng, grad_x=None):
    """Variance-tuned gradient.

    Returns ``(g(x) + v_prev, v_new)`` with ``v_new`` the mean gradient at
    ``n`` uniform neighbours in ``[-bound, bound]`` minus ``g(x)``. Pass
    ``grad_x`` when the caller already holds ``g(x)``; the neighbours cost
    exactly ``n`` extra calls of ``loss_grad_fn``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if grad_x is None:
        grad_x = loss_grad_fn(x)
    acc = torch.zeros_like(grad_x)
    for _ in range(n):
        noise = ((torch.rand(x.shape, generator=rng, dtype=x.dtype) * 2 - 1) * bound).to(x.device)
        acc = acc + loss_grad_fn(x.detach() + noise)
    v_new = acc / n - grad_x
    return grad_x + v_prev, v_new


def expand_copies(x, kinds, params, rng, pool=None):
    """Apply the image-space part of a pipeline in listed order.

    Returns ``(batch, n_copies)`` where ``batch`` stacks ``n_copies``
    versions of ``x`` along the batch dimension (copy-major). TI and VT are
    gradient-space and skipped here.
    """
    copies = 1
    for kind in kinds:
        if kind == "DI":
            x = di_transform(x, params.di_prob, rng, params.max_pad_ratio)
        elif kind == "RDI":
            x = rdi_transform(x, rng, params.max_pad_ratio)
        elif kind == "SI":
            x = torch.cat(si_copies(x, params.si_copies))
            copies *= params.si_copies
        elif kind == "Admix":
            src = x if pool is None else pool
            x = torch.cat(admix_copies(x, src, params.admix_weight, params.admix_count, params.admix_scales, rng))
            copies *= params.admix_count * params.admix_scales
        elif kind in ("TI", "VT", "Identity"):
            continue
        else:
            raise ValueError(f"unknown transform {kind!r}")
    return x, copies
