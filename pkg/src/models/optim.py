from typing import Any, Dict, Iterable, Mapping, Optional

import numpy as np

from src.models.params import ParamSet
from src.utils.config import OptimizerSettings
from src.utils.exceptions import UsageError


class Optimizer:
    """In-place descent over a chosen subset of a ParamSet.

    State is keyed by parameter name so a parameter stepped by several
    sub-updates keeps a single set of moments. ``lr`` overrides the
    configured rate for one call.
    """

    def __init__(self, settings: OptimizerSettings):
        self.settings = settings

    def step(
        self,
        params: ParamSet,
        grads: Mapping[str, np.ndarray],
        names: Optional[Iterable[str]] = None,
        lr: Optional[float] = None,
    ) -> None:
        lr = self.settings.lr if lr is None else lr
        if lr <= 0.0:
            raise UsageError(f"learning rate must be positive, got {lr}")
        names = list(params.names() if names is None else names)
        missing = [n for n in names if n not in grads]
        if missing:
            raise UsageError(f"missing gradient for stepped parameters: {missing}")
        for name in names:
            param = params[name]
            param.data = param.data - self._update(name, np.asarray(grads[name], dtype=np.float64), lr)

    def _update(self, name: str, grad: np.ndarray, lr: float) -> np.ndarray:
        raise NotImplementedError

    def state_dict(self) -> Dict[str, Any]:
        return {}

    def load_state_dict(self, state: Mapping[str, Any]) -> None:
        pass


class SGD(Optimizer):
    def _update(self, name, grad, lr):
        return lr * grad


class Adam(Optimizer):
    def __init__(self, settings: OptimizerSettings):
        super().__init__(settings)
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def _update(self, name, grad, lr):
        s = self.settings
        m = s.beta1 * self.m.get(name, 0.0) + (1.0 - s.beta1) * grad
        v = s.beta2 * self.v.get(name, 0.0) + (1.0 - s.beta2) * grad * grad
        t = self.t.get(name, 0) + 1
        self.m[name], self.v[name], self.t[name] = m, v, t
        m_hat = m / (1.0 - s.beta1**t)
        v_hat = v / (1.0 - s.beta2**t)
        return lr * m_hat / (np.sqrt(v_hat) + s.eps)

    def state_dict(self):
        return {
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
            "t": dict(self.t),
        }

    def load_state_dict(self, state):
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}
        self.t = dict(state["t"])


def build_optimizer(settings: OptimizerSettings) -> Optimizer:
    if settings.name == "adam":
        return Adam(settings)
    if settings.name == "sgd":
        return SGD(settings)
    raise UsageError(f"unknown optimizer {settings.name!r}")


def optimizer_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    optimizer: Optimizer,
    names: Optional[Iterable[str]] = None,
    lr: Optional[float] = None,
) -> ParamSet:
    optimizer.step(params, grads, names, lr=lr)
    return params
