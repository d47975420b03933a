import logging
from typing import Dict, Iterable, Tuple

import numpy as np

from app.errors import DimensionError
from brain.nn import Parameter

logger = logging.getLogger(__name__)


class Adam:
    """Adaptive-moment optimizer with bias correction; moments are keyed by parameter name."""

    def __init__(
        self,
        named_params: Iterable[Tuple[str, Parameter]],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params: Dict[str, Parameter] = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for name, param in self.params.items():
            if param.grad is None:
                continue
            g = param.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + self.eps)
            param.data = (param.data - update).astype(param.dtype)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"m.{name}": m for name, m in self.m.items()}
        state.update({f"v.{name}": v for name, v in self.v.items()})
        state["step"] = np.array(self.step_count, dtype=np.int64)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, param in self.params.items():
            for kind, store in (("m", self.m), ("v", self.v)):
                key = f"{kind}.{name}"
                if key not in state:
                    raise DimensionError(f"optimizer state has no {key}")
                value = np.asarray(state[key])
                if value.shape != param.shape:
                    raise DimensionError(f"{key}: stored shape {value.shape} != parameter shape {param.shape}")
                store[name] = value.astype(param.dtype).copy()
        self.step_count = int(np.asarray(state.get("step", 0)))
        logger.debug("restored optimizer moments at step %d", self.step_count)
