"""Parameterized building blocks: registry base class, linear/MLP, conv."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

GROUP_CNN = "cnn"
GROUP_TRANS = "trans"


@dataclass
class ParamInfo:
    tensor: Tensor
    group: str          # GROUP_CNN or GROUP_TRANS (learning-rate group)
    decay: bool = True  # weight-decay eligible


class Layer:
    """Base with explicit parameter/child registration and stable names."""

    def __init__(self):
        self._params: dict[str, ParamInfo] = {}
        self._children: dict[str, "Layer"] = {}

    def param(self, name: str, data: np.ndarray, group: str, decay: bool = True) -> Tensor:
        t = Tensor(np.ascontiguousarray(data), requires_grad=True)
        self._params[name] = ParamInfo(t, group, decay)
        return t

    def child(self, name: str, layer: "Layer"):
        self._children[name] = layer
        return layer

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, ParamInfo]]:
        for name, info in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), info
        for cname, c in self._children.items():
            yield from c.named_parameters(f"{prefix}.{cname}" if prefix else cname)

    def parameters(self) -> list[Tensor]:
        return [info.tensor for _, info in self.named_parameters()]

    def zero_grads(self) -> None:
        for t in self.parameters():
            t.grad = None


class Linear(Layer):
    """x @ W + b for row-major token matrices (N, d_in) -> (N, d_out)."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 group: str = GROUP_TRANS, zero_init: bool = False,
                 dtype=np.float32):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)
        self.w = self.param("weight", w.astype(dtype), group)
        self.b = self.param("bias", np.zeros(d_out, dtype=dtype), group, decay=False)

    def forward(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w)
        return T.add(out, T.broadcast_to(T.reshape(self.b, (1, self.b.shape[0])),
                                         out.shape))


class MLP(Layer):
    """Two-layer gelu MLP; hidden width defaults to the input width."""

    def __init__(self, rng, d_in: int, d_out: int, d_hidden: int | None = None,
                 group: str = GROUP_TRANS, zero_init_last: bool = False,
                 dtype=np.float32):
        super().__init__()
        d_hidden = d_in if d_hidden is None else d_hidden
        self.fc1 = self.child("fc1", Linear(rng, d_in, d_hidden, group, dtype=dtype))
        self.fc2 = self.child("fc2", Linear(rng, d_hidden, d_out, group,
                                            zero_init=zero_init_last, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2.forward(T.gelu(self.fc1.forward(x)))


class LayerNorm(Layer):
    def __init__(self, width: int, group: str = GROUP_TRANS, dtype=np.float32):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(width, dtype=dtype), group, decay=False)
        self.beta = self.param("beta", np.zeros(width, dtype=dtype), group, decay=False)

    def forward(self, x: Tensor, axis: int = -1) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, axis)


class Conv3d(Layer):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 3,
                 stride: int = 1, padding: int | None = None,
                 group: str = GROUP_CNN, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = c_in * kernel ** 3
        w = rng.standard_normal((c_out, c_in, kernel, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.w = self.param("weight", w.astype(dtype), group)
        self.b = self.param("bias", np.zeros(c_out, dtype=dtype), group, decay=False)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ConvBlock(Layer):
    """conv3x3x3 -> per-channel instance norm -> relu."""

    def __init__(self, rng, c_in: int, c_out: int, stride: int = 1,
                 group: str = GROUP_CNN, dtype=np.float32):
        super().__init__()
        self.conv = self.child("conv", Conv3d(rng, c_in, c_out, 3, stride, group=group,
                                              dtype=dtype))
        self.gamma = self.param("norm_gamma", np.ones(c_out, dtype=dtype), group,
                                decay=False)
        self.beta = self.param("norm_beta", np.zeros(c_out, dtype=dtype), group,
                               decay=False)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(T.instance_norm3d(self.conv.forward(x), self.gamma, self.beta))
