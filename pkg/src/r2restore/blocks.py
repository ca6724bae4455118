"""Composite building blocks of the restoration network.

Each block is a pure function over (input, params). The enhancement
attention module (EAM) chains four stages at constant width C:

  merge-and-run unit (MRU): two parallel branches of two dilated 3x3 convs
  (dilations 1,2 and 3,4), concatenated and fused by another 3x3 conv;
  residual block (RB): two 3x3 convs with an identity shortcut;
  enhanced residual block (ERB): two 3x3 convs plus a flattening 1x1 conv,
  with an identity shortcut;
  feature attention (FA): global average pool, squeeze 1x1 conv,
  soft-shrinkage, excite 1x1 conv, sigmoid, then per-channel rescaling.

The EAM output is added back onto its input. The in-block shortcuts and
that trailing addition together form the "local connection" ablation
toggle; the attention gate is its own toggle (off means scale 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .conv import conv2d
from .errors import ParameterError
from .tensor import (Tensor, add, channel_scale, concat_channels,
                     global_avg_pool, relu, sigmoid, softshrink)

__all__ = [
    "ConvParams",
    "MRUParams",
    "RBParams",
    "ERBParams",
    "FAParams",
    "EAMParams",
    "init_conv",
    "init_eam",
    "mru_forward",
    "rb_forward",
    "erb_forward",
    "fa_forward",
    "eam_forward",
]


@dataclass
class ConvParams:
    """One convolution layer: weight (cout, cin, k, k), bias (1, cout, 1, 1).

    3x3 kernels carry padding = dilation so spatial size is preserved;
    1x1 kernels use padding 0.
    """

    weight: Tensor
    bias: Tensor
    dilation: int = 1

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        return self.dilation if self.kernel == 3 else 0

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, dilation=self.dilation, padding=self.padding)

    def param_count(self) -> int:
        return self.weight.data.size + self.bias.data.size

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


def init_conv(cin: int, cout: int, k: int, rng: np.random.Generator,
              dtype, dilation: int = 1, name: str = "conv") -> ConvParams:
    """Fan-in scaled uniform weights (bound sqrt(6/fan_in)), zero biases."""
    fan_in = cin * k * k
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
    b = np.zeros((1, cout, 1, 1), dtype=dtype)
    return ConvParams(
        weight=Tensor(w, requires_grad=True, name=f"{name}.weight"),
        bias=Tensor(b, requires_grad=True, name=f"{name}.bias"),
        dilation=dilation,
    )


@dataclass
class MRUParams:
    kind = "MRU"
    branch_a1: ConvParams
    branch_a2: ConvParams
    branch_b1: ConvParams
    branch_b2: ConvParams
    merge: ConvParams

    def convs(self):
        return [self.branch_a1, self.branch_a2, self.branch_b1, self.branch_b2, self.merge]


@dataclass
class RBParams:
    kind = "RB"
    conv1: ConvParams
    conv2: ConvParams

    def convs(self):
        return [self.conv1, self.conv2]


@dataclass
class ERBParams:
    kind = "ERB"
    conv1: ConvParams
    conv2: ConvParams
    flatten: ConvParams

    def convs(self):
        return [self.conv1, self.conv2, self.flatten]


@dataclass
class FAParams:
    kind = "FA"
    squeeze: ConvParams
    excite: ConvParams
    shrink_lambda: float = 0.5

    def convs(self):
        return [self.squeeze, self.excite]


@dataclass
class EAMParams:
    kind = "EAM"
    width: int
    reduction: int
    mru: MRUParams
    rb: RBParams
    erb: ERBParams
    fa: FAParams

    def convs(self):
        return self.mru.convs() + self.rb.convs() + self.erb.convs() + self.fa.convs()

    def param_count(self) -> int:
        return sum(c.param_count() for c in self.convs())

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        groups = [("mru", self.mru, ["branch_a1", "branch_a2", "branch_b1", "branch_b2", "merge"]),
                  ("rb", self.rb, ["conv1", "conv2"]),
                  ("erb", self.erb, ["conv1", "conv2", "flatten"]),
                  ("fa", self.fa, ["squeeze", "excite"])]
        for gname, group, members in groups:
            for member in members:
                yield from getattr(group, member).named_tensors(f"{prefix}.{gname}.{member}")


def init_eam(width: int, reduction: int, rng: np.random.Generator, dtype,
             shrink_lambda: float = 0.5, name: str = "eam") -> EAMParams:
    if width % reduction != 0:
        raise ParameterError(f"width {width} not divisible by reduction {reduction}")
    c = width
    mk = lambda cin, cout, k, dil, nm: init_conv(cin, cout, k, rng, dtype, dil, f"{name}.{nm}")
    return EAMParams(
        width=width,
        reduction=reduction,
        mru=MRUParams(
            branch_a1=mk(c, c, 3, 1, "mru.branch_a1"),
            branch_a2=mk(c, c, 3, 2, "mru.branch_a2"),
            branch_b1=mk(c, c, 3, 3, "mru.branch_b1"),
            branch_b2=mk(c, c, 3, 4, "mru.branch_b2"),
            merge=mk(2 * c, c, 3, 1, "mru.merge"),
        ),
        rb=RBParams(
            conv1=mk(c, c, 3, 1, "rb.conv1"),
            conv2=mk(c, c, 3, 1, "rb.conv2"),
        ),
        erb=ERBParams(
            conv1=mk(c, c, 3, 1, "erb.conv1"),
            conv2=mk(c, c, 3, 1, "erb.conv2"),
            flatten=mk(c, c, 1, 1, "erb.flatten"),
        ),
        fa=FAParams(
            squeeze=mk(c, c // reduction, 1, 1, "fa.squeeze"),
            excite=mk(c // reduction, c, 1, 1, "fa.excite"),
            shrink_lambda=shrink_lambda,
        ),
    )


def _check_width(x: Tensor, p, width_attr: str = "weight") -> None:
    expected = getattr(p, "convs", lambda: [p])()[0].weight.shape[1]
    if x.shape[1] != expected:
        raise ParameterError(f"block expects {expected} channels, got {x.shape[1]}")


def mru_forward(x: Tensor, p: MRUParams) -> Tensor:
    """Two dilated branches, concatenated and fused by one more conv."""
    _check_width(x, p)
    a = relu(p.branch_a2(relu(p.branch_a1(x))))
    b = relu(p.branch_b2(relu(p.branch_b1(x))))
    return relu(p.merge(concat_channels(a, b)))


def rb_forward(x: Tensor, p: RBParams, local_connection: bool = True) -> Tensor:
    y = p.conv2(relu(p.conv1(x)))
    return add(x, y) if local_connection else y


def erb_forward(x: Tensor, p: ERBParams, local_connection: bool = True) -> Tensor:
    y = p.flatten(relu(p.conv2(relu(p.conv1(x)))))
    return add(x, y) if local_connection else y


def fa_forward(f: Tensor, p: FAParams, enabled: bool = True) -> Tensor:
    """Rescale each channel by a gate in (0, 1) derived from its global mean."""
    if not enabled:
        return f
    pooled = global_avg_pool(f)
    gate = sigmoid(p.excite(softshrink(p.squeeze(pooled), p.shrink_lambda)))
    return channel_scale(f, gate)


def eam_forward(x: Tensor, p: EAMParams,
                local_connection: bool = True, feature_attention: bool = True) -> Tensor:
    y = mru_forward(x, p.mru)
    y = rb_forward(y, p.rb, local_connection)
    y = erb_forward(y, p.erb, local_connection)
    y = fa_forward(y, p.fa, feature_attention)
    return add(x, y) if local_connection else y
