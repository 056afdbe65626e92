"""Parameter-holding layers on top of the autodiff primitives."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, ShapeError, Tensor

__all__ = [
    "Module",
    "Linear",
    "Conv2d",
    "ConvTranspose2d",
    "BatchNorm",
    "Elu",
    "LeakyRelu",
    "Sigmoid",
    "Flatten",
    "Sequential",
    "kaiming_uniform",
]


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Module:
    """Minimal module: registers parameters/buffers/children by attribute."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, "Module"] = {}
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def register_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def register_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        arr = np.asarray(data, dtype=DTYPE)
        self._buffers[name] = arr
        return arr

    # -- traversal ----------------------------------------------------------
    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    # -- state --------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data.copy() for n, p in self.named_parameters()}
        out.update({n: b.copy() for n, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"load_state_dict: missing entries {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.data.shape:
                raise ShapeError(f"load_state_dict: {name} has shape "
                                 f"{arr.shape}, expected {p.data.shape}")
            p.data = arr.copy()
        for name, b in bufs.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != b.shape:
                raise ShapeError(f"load_state_dict: {name} has shape "
                                 f"{arr.shape}, expected {b.shape}")
            b[...] = arr

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, x):
        return self.forward(x)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator):
        super().__init__()
        self.weight = self.register_param(
            "weight", kaiming_uniform(rng, (in_features, out_features),
                                      in_features))
        self.bias = self.register_param(
            "bias", np.zeros(out_features, dtype=DTYPE))

    def forward(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        self.weight = self.register_param(
            "weight", kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel),
                                      fan_in))
        self.bias = self.register_param("bias", np.zeros(out_ch, dtype=DTYPE))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        y = ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return ad.add(y, ad.reshape(self.bias, (1, -1, 1, 1)))


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 output_padding: int = 0):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        self.weight = self.register_param(
            "weight", kaiming_uniform(rng, (in_ch, out_ch, kernel, kernel),
                                      fan_in))
        self.bias = self.register_param("bias", np.zeros(out_ch, dtype=DTYPE))
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def forward(self, x):
        y = ad.conv_transpose2d(x, self.weight, stride=self.stride,
                                padding=self.padding,
                                output_padding=self.output_padding)
        return ad.add(y, ad.reshape(self.bias, (1, -1, 1, 1)))


class BatchNorm(Module):
    """Batch normalization over axis 1; running stats with momentum 0.1."""

    def __init__(self, num_features: int, momentum: float = 0.1,
                 eps: float = 1e-5):
        super().__init__()
        self.gamma = self.register_param(
            "gamma", np.ones(num_features, dtype=DTYPE))
        self.beta = self.register_param(
            "beta", np.zeros(num_features, dtype=DTYPE))
        self.running_mean = self.register_buffer(
            "running_mean", np.zeros(num_features, dtype=DTYPE))
        self.running_var = self.register_buffer(
            "running_var", np.ones(num_features, dtype=DTYPE))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        if self.training:
            out = ad.batch_norm(x, self.gamma, self.beta, eps=self.eps)
            mean, var = ad.batch_moments(x)
            n = x.size // x.shape[1]
            unbiased = var * (n / max(n - 1, 1))
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * unbiased
            return out
        return ad.batch_norm(x, self.gamma, self.beta,
                             mean=self.running_mean, var=self.running_var,
                             eps=self.eps)


class Elu(Module):
    def forward(self, x):
        return ad.elu(x)


class LeakyRelu(Module):
    def __init__(self, negative_slope: float = 0.01):
        super().__init__()
        self.negative_slope = negative_slope

    def forward(self, x):
        return ad.leaky_relu(x, self.negative_slope)


class Sigmoid(Module):
    def forward(self, x):
        return ad.sigmoid(x)


class Flatten(Module):
    def forward(self, x):
        return ad.reshape(x, (x.shape[0], -1))


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            self._children[str(i)] = layer

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
