import hashlib
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence

import numpy as np

from src.models.tensor import Tensor
from src.utils.exceptions import UsageError


class ParamSet(Mapping[str, Tensor]):
    """Named parameter tensors, iterated in insertion order.

    Names are dotted, the first segment being the owning component
    (``"E_s.trunk.W1"``), so a prefix selects a component or a block.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name {name!r}")
        tensor = Tensor(value, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    @property
    def components(self) -> List[str]:
        seen: Dict[str, None] = {}
        for name in self._params:
            seen.setdefault(name.split(".", 1)[0], None)
        return list(seen)

    def names(self, prefixes: Optional[Iterable[str]] = None) -> List[str]:
        if prefixes is None:
            return list(self._params)
        prefixes = tuple(prefixes)
        return [
            name
            for name in self._params
            if any(name == p or name.startswith(p + ".") for p in prefixes)
        ]

    def subset(self, prefixes: Iterable[str]) -> Dict[str, Tensor]:
        return {name: self._params[name] for name in self.names(prefixes)}

    def checksum(self, prefixes: Optional[Sequence[str]] = None) -> str:
        digest = hashlib.sha256()
        for name in self.names(prefixes):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self._params[name].data, dtype="<f8").tobytes())
        return digest.hexdigest()

    def component_checksums(self) -> Dict[str, str]:
        return {component: self.checksum([component]) for component in self.components}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        unexpected = set(state) - set(self._params)
        if missing or unexpected:
            raise UsageError(
                f"state does not match parameters (missing={sorted(missing)}, unexpected={sorted(unexpected)})"
            )
        for name, value in state.items():
            param = self._params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != param.shape:
                raise UsageError(f"{name}: shape {value.shape} does not match {param.shape}")
            param.data = value.copy()

    def copy_component(self, source: str, target: str) -> None:
        """Overwrite ``target``'s values with ``source``'s (same architecture)."""
        for name in self.names([source]):
            other = target + name[len(source):]
            if other not in self._params:
                raise UsageError(f"{target} has no parameter matching {name}")
            self._params[other].data = self._params[name].data.copy()

    def blend_component(self, source: str, target: str, rate: float) -> None:
        """Move ``target`` a ``rate`` fraction of the way towards ``source``."""
        if not 0.0 <= rate <= 1.0:
            raise UsageError(f"blend rate must lie in [0, 1], got {rate}")
        for name in self.names([source]):
            other = target + name[len(source):]
            if other not in self._params:
                raise UsageError(f"{target} has no parameter matching {name}")
            current = self._params[other].data
            self._params[other].data = current + rate * (self._params[name].data - current)
