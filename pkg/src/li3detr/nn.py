"""Small layer helpers on top of numcore ops."""

from __future__ import annotations

from .numcore import Tensor, ops
from .params import Params


def linear(p: Params, name: str, x: Tensor) -> Tensor:
    return x @ p[name + ".w"] + p[name + ".b"]


def norm(p: Params, name: str, x: Tensor) -> Tensor:
    return ops.layer_norm(x, p[name + ".g"], p[name + ".b"])


def mlp(p: Params, name: str, x: Tensor) -> Tensor:
    return linear(p, name + ".fc2", ops.relu(linear(p, name + ".fc1", x)))


def conv(p: Params, name: str, x: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    return ops.conv2d(x, p[name + ".w"], p[name + ".b"], stride=stride, pad=pad)
