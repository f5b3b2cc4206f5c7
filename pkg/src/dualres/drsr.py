"""Dual-resolution transforms.

``group`` folds ``k`` consecutive speech-token embeddings into one backbone
frame (temporal concatenation then a linear map); ``ungroup`` projects one
backbone hidden state and splits it into ``k`` contiguous conditioning
segments for the speech head.
"""

from __future__ import annotations

import math

import torch
from torch import nn


class ShapeError(ValueError):
    pass


def fan_in_uniform_(weight: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    bound = 1.0 / math.sqrt(weight.shape[-1])
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
    return weight


def group(x: torch.Tensor, weight: torch.Tensor, k: int) -> torch.Tensor:
    """(..., n*k, d_s) -> (..., n, d_text); token ``i*k`` comes first in each concat."""
    x = torch.as_tensor(x)
    if k < 1:
        raise ShapeError(f"grouping factor must be >= 1, got {k}")
    *lead, length, d_s = x.shape
    if length % k:
        raise ShapeError(f"sequence length {length} is not a multiple of k={k}")
    if weight.shape[-1] != k * d_s:
        raise ShapeError(f"weight expects {weight.shape[-1]} inputs, concat gives {k * d_s}")
    concat = x.reshape(*lead, length // k, k * d_s)
    return concat @ weight.T


def ungroup(hidden: torch.Tensor, weight: torch.Tensor, k: int) -> torch.Tensor:
    """(..., d_h) -> (..., k, d_g/k) contiguous slices of ``weight @ hidden``."""
    hidden = torch.as_tensor(hidden)
    d_g, d_h = weight.shape
    if d_g % k:
        raise ShapeError(f"d_g={d_g} is not divisible by k={k}")
    if hidden.shape[-1] != d_h:
        raise ShapeError(f"hidden width {hidden.shape[-1]} != projector input {d_h}")
    h_ug = hidden @ weight.T
    return h_ug.reshape(*h_ug.shape[:-1], k, d_g // k)


class GroupProjector(nn.Module):
    def __init__(self, k: int = 5, d_s: int = 16, d_text: int = 64, generator=None):
        super().__init__()
        if k < 1:
            raise ShapeError(f"grouping factor must be >= 1, got {k}")
        self.k, self.d_s, self.d_text = k, d_s, d_text
        self.weight = nn.Parameter(fan_in_uniform_(torch.empty(d_text, k * d_s), generator))

    def forward(self, x):
        return group(x, self.weight, self.k)


class UngroupProjector(nn.Module):
    def __init__(self, d_h: int = 64, d_g: int = 80, k: int = 5, generator=None):
        super().__init__()
        if d_g % k:
            raise ShapeError(f"d_g={d_g} is not divisible by k={k}")
        self.k, self.d_h, self.d_g = k, d_h, d_g
        self.weight = nn.Parameter(fan_in_uniform_(torch.empty(d_g, d_h), generator))

    @property
    def segment_width(self) -> int:
        return self.d_g // self.k

    def forward(self, hidden):
        return ungroup(hidden, self.weight, self.k)
