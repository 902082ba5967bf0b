"""Parameter containers and basic layers on top of the autodiff engine."""
import numpy as np

from cocktail import autodiff as ad
from cocktail.autodiff import Tensor


def make_rng(seed):
    """Counter-based generator used for every stochastic choice in the package."""
    return np.random.Generator(np.random.Philox(int(seed)))


class Module:
    def named_parameters(self, prefix=""):
        for key, val in self.__dict__.items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.name == "param":
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def state_dict(self, prefix=""):
        return {k: v.data for k, v in self.named_parameters(prefix)}

    def load_state_dict(self, state, prefix="", strict=True):
        params = dict(self.named_parameters(prefix))
        if strict:
            missing = sorted(set(params) - set(state))
            if missing:
                raise KeyError(f"missing tensors: {missing[:5]}")
        for k, p in params.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param(arr):
    return Tensor(np.ascontiguousarray(arr, dtype=np.float32), requires_grad=True, name="param")


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, din, dout, rng, bias=True, zero=False):
        bound = 1.0 / np.sqrt(din)
        if zero:
            self.weight = param(np.zeros((din, dout)))
            self.bias = param(np.zeros(dout)) if bias else None
        else:
            self.weight = param(_uniform(rng, bound, (din, dout)))
            self.bias = param(_uniform(rng, bound, dout)) if bias else None

    def __call__(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    """Conv layer; ``zero=True`` gives the zero-initialized layer Z(.)."""

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, zero=False, bias=True):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        if zero:
            self.weight = param(np.zeros((cout, cin, k, k)))
            self.bias = param(np.zeros(cout)) if bias else None
        else:
            bound = 1.0 / np.sqrt(cin * k * k)
            self.weight = param(_uniform(rng, bound, (cout, cin, k, k)))
            self.bias = param(_uniform(rng, bound, cout)) if bias else None

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


def zero_conv(cin, cout, k=1, bias=True):
    return Conv2d(cin, cout, k, rng=None, zero=True, bias=bias)
