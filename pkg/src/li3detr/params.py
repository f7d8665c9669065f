"""Named parameter container and the initialisers used by the model."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .numcore import Tensor


class Params:
    """Ordered name -> leaf Tensor map; ``Params`` are the model weights."""

    def __init__(self, rng: np.random.Generator | None = None):
        self._t: OrderedDict[str, Tensor] = OrderedDict()
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def add(self, name: str, value) -> Tensor:
        if name in self._t:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._t[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def numel(self) -> int:
        return sum(t.size for t in self._t.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._t.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self._t.items():
            if k not in state:
                raise KeyError(f"missing tensor {k!r}")
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"tensor {k!r}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.copy()

    # initialisers --------------------------------------------------------

    def linear(self, name: str, fan_in: int, fan_out: int, w_std: float | None = None,
               bias: float | np.ndarray = 0.0) -> None:
        if w_std is None:
            a = np.sqrt(6.0 / (fan_in + fan_out))
            w = self.rng.uniform(-a, a, size=(fan_in, fan_out))
        else:
            w = self.rng.normal(0.0, w_std, size=(fan_in, fan_out))
        self.add(name + ".w", w)
        self.add(name + ".b", np.broadcast_to(np.asarray(bias, dtype=np.float64), (fan_out,)))

    def conv(self, name: str, k: int, cin: int, cout: int) -> None:
        std = np.sqrt(2.0 / (k * k * cin))
        self.add(name + ".w", self.rng.normal(0.0, std, size=(k, k, cin, cout)))
        self.add(name + ".b", np.zeros(cout))

    def norm(self, name: str, dim: int) -> None:
        self.add(name + ".g", np.ones(dim))
        self.add(name + ".b", np.zeros(dim))
