"""Input validation helpers shared by the attack estimators and the harness."""

import numbers

import numpy as np
import torch


def check_images(x, name="x"):
    """Return ``x`` as a float tensor of shape [B, C, H, W] with values in [0, 1].

    Accepts numpy arrays or tensors. Raises ``ValueError`` on wrong rank,
    empty batches, non-finite entries or values outside the unit box.
    """
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    if not isinstance(x, torch.Tensor):
        raise TypeError(f"{name} must be a tensor or ndarray, got {type(x).__name__}")
    if x.ndim != 4:
        raise ValueError(f"{name} must have shape [B, C, H, W], got {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise ValueError(f"{name} is an empty batch")
    if not x.is_floating_point():
        x = x.float()
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    if x.min() < 0 or x.max() > 1:
        raise ValueError(f"{name} must lie in [0, 1] pixel space")
    return x


def check_target_labels(y, n_samples, num_classes=None, name="y_target"):
    """Return integer labels as a long tensor of length ``n_samples``."""
    if isinstance(y, np.ndarray):
        y = torch.from_numpy(y)
    elif not isinstance(y, torch.Tensor):
        y = torch.as_tensor(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"{name} must be a vector of length {n_samples}, got shape {tuple(y.shape)}")
    if y.is_floating_point() or y.dtype == torch.bool:
        raise ValueError(f"{name} must hold integer class indices")
    y = y.long()
    if num_classes is not None:
        bad = ((y < 0) | (y >= num_classes)).nonzero().flatten()
        if len(bad):
            i = int(bad[0])
            raise ValueError(
                f"{name}[{i}]={int(y[i])} is outside [0, {num_classes})"
            )
    return y


def check_scalar(value, name, *, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    """Validate a scalar hyperparameter against an interval and return it."""
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise TypeError(f"{name} must be {'an int' if integer else 'a real number'}, got {value!r}")
    if lo is not None and (value <= lo if lo_open else value < lo):
        raise ValueError(f"{name}={value} violates lower bound {'>' if lo_open else '>='} {lo}")
    if hi is not None and (value >= hi if hi_open else value > hi):
        raise ValueError(f"{name}={value} violates upper bound {'<' if hi_open else '<='} {hi}")
    return value
