"""Parameter containers built on the tensor kernel."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def named_tensors(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        """Every tensor attribute, trainable or not, in attribute order."""
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_tensors(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_tensors(f"{name}.{i}."))
        return out

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.named_tensors(prefix) if t.requires_grad]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_tensors())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing tensors: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()

    def set_trainable(self, flag: bool) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, x, frozen: bool = False):
        return self.forward(x, frozen=frozen)

    def forward(self, x, frozen: bool = False):  # pragma: no cover - abstract
        raise NotImplementedError


def _p(t: Tensor, frozen: bool):
    # a frozen module passes gradients through to its input but not to its weights
    return Tensor(t.data) if frozen else t


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, rng=None, bias=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.pad = stride, pad
        self.weight = Tensor(_he(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def forward(self, x, frozen=False):
        b = _p(self.bias, frozen) if self.bias is not None else None
        return T.conv2d(x, _p(self.weight, frozen), b, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, output_padding=0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.pad, self.output_padding = stride, pad, output_padding
        self.weight = Tensor(_he(rng, (cin, cout, k, k), cin * k * k / (stride * stride)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def forward(self, x, frozen=False):
        return T.conv_transpose2d(x, _p(self.weight, frozen), _p(self.bias, frozen),
                                  self.stride, self.pad, self.output_padding)


class Linear(Module):
    def __init__(self, din, dout, rng=None, bias=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / din), size=(din, dout)), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True) if bias else None

    def forward(self, x, frozen=False):
        y = T.matmul(x, _p(self.weight, frozen))
        if self.bias is not None:
            y = T.add(y, _p(self.bias, frozen))
        return y


class ResBlock(Module):
    """x + conv(relu(conv(x))), 3x3 same-padding, channel-preserving."""

    def __init__(self, channels, rng=None, k=3):
        self.conv1 = Conv2d(channels, channels, k, 1, k // 2, rng)
        self.conv2 = Conv2d(channels, channels, k, 1, k // 2, rng)
        self.conv2.weight.data *= 0.1

    def forward(self, x, frozen=False):
        h = T.relu(self.conv1(x, frozen=frozen))
        return T.add(x, self.conv2(h, frozen=frozen))
