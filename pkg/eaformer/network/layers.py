"""
Parameterised layers on top of the tensor tape
线性层、LayerNorm、前馈网络；参数以 Tensor 形式持有
"""
from collections import OrderedDict
from typing import Dict

import numpy as np

from eaformer.utils import tensor as T
from eaformer.utils.tensor import Tensor


class Layer:
    """Base class: subclasses list their parameters and child layers."""

    def parameters(self) -> Dict[str, Tensor]:
        raise NotImplementedError

    def named(self, prefix: str) -> Dict[str, Tensor]:
        return OrderedDict((f"{prefix}.{k}", v) for k, v in self.parameters().items())


class Linear(Layer):
    """y = x W (+ b). ``zero=True`` initialises W to zeros."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        scale = 0.0 if zero else 1.0 / np.sqrt(d_in)
        self.weight = Tensor(rng.standard_normal((d_in, d_out)) * scale, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add_rowvec(y, self.bias)

    def parameters(self) -> Dict[str, Tensor]:
        params = OrderedDict(weight=self.weight)
        if self.bias is not None:
            params["bias"] = self.bias
        return params


class LayerNorm(Layer):
    """Row-wise normalisation with learned gain and shift."""

    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.shift = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_rowvec(T.mul_rowvec(T.layer_norm_rows(x, self.eps), self.gain), self.shift)

    def parameters(self) -> Dict[str, Tensor]:
        return OrderedDict(gain=self.gain, shift=self.shift)


class FeedForward(Layer):
    """Two-layer GELU MLP."""

    def __init__(self, d_model: int, width: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, width, rng)
        self.fc2 = Linear(width, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def zero_(self) -> None:
        """Zero every weight (the block then reduces to its attention path)."""
        for p in self.parameters().values():
            p.data[...] = 0.0

    def parameters(self) -> Dict[str, Tensor]:
        params = OrderedDict()
        params.update(self.fc1.named("fc1"))
        params.update(self.fc2.named("fc2"))
        return params
