"""Parameter containers and the small layers every branch is built from."""
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from app.errors import DimensionError
from brain import functional as F
from brain.tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data, name: Optional[str] = None):
        super().__init__(np.asarray(data, dtype=np.float32) if not isinstance(data, np.ndarray) else data,
                         requires_grad=True, name=name)


class Module:
    """Attribute-registered tree of parameters, buffers and sub-modules."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        """Register under a name that need not be a valid identifier (``global``, ``1``)."""
        self._modules[name] = module

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # --- traversal ----------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        for prefix, module in self.named_modules():
            for name, param in module._parameters.items():
                yield (f"{prefix}.{name}" if prefix else name), param

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for prefix, module in self.named_modules():
            for name, buf in module._buffers.items():
                yield (f"{prefix}.{name}" if prefix else name), buf

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    # --- state --------------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (the gradient harness runs at 64-bit)."""
        for param in self.parameters():
            param.data = param.data.astype(dtype)
            param.grad = None
        for _, module in self.named_modules():
            for name, buf in list(module._buffers.items()):
                module.register_buffer(name, buf.astype(dtype))
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = {}
        for prefix, module in self.named_modules():
            for name in module._buffers:
                buffers[f"{prefix}.{name}" if prefix else name] = (module, name)
        missing = (set(own) | set(buffers)) - set(state)
        if missing:
            raise DimensionError(f"state is missing {sorted(missing)[:5]} ({len(missing)} tensors)")
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != model shape {param.shape}")
            param.data = value.astype(param.dtype).copy()
        for name, (module, attr) in buffers.items():
            value = np.asarray(state[name])
            if value.shape != module._buffers[attr].shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != buffer shape")
            module.register_buffer(attr, value.astype(module._buffers[attr].dtype).copy())


class ModuleList(Module):
    def __init__(self, modules=(), start: int = 0):
        super().__init__()
        object.__setattr__(self, "_start", start)
        object.__setattr__(self, "_items", [])
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        self.add_module(str(self._start + len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.padding = (kernel - 1) // 2
        self.weight = Parameter(kaiming(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class CBRBlock(Module):
    """3x3 convolution, BatchNorm, ReLU; spatial extents preserved."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))
