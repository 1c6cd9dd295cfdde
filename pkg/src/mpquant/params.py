"""Named parameter collections.

A :class:`ParamVector` is an ordered set of named float64 tensors (row-major
numpy arrays). All training state (weights, multipliers, gradients, probe
vectors) shares this structure, so structural arithmetic lives here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class ParamVector:
    names: tuple[str, ...]
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigError("duplicate tensor names in ParamVector")
        for name in self.names:
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            self.tensors[name] = arr

    @property
    def total_count(self) -> int:
        return sum(self.tensors[n].size for n in self.names)

    def items(self):
        for name in self.names:
            yield name, self.tensors[name]

    def clone(self) -> "ParamVector":
        return ParamVector(self.names, {n: self.tensors[n].copy() for n in self.names})

    def zeros_like(self) -> "ParamVector":
        return ParamVector(
            self.names, {n: np.zeros_like(self.tensors[n]) for n in self.names}
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].ravel() for n in self.names])

    def unflatten(self, flat: np.ndarray) -> "ParamVector":
        """Inverse of :meth:`flatten` against this vector's shapes."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.total_count:
            raise ConfigError(
                f"flat size {flat.size} != parameter count {self.total_count}"
            )
        out = {}
        pos = 0
        for name in self.names:
            shape = self.tensors[name].shape
            size = self.tensors[name].size
            out[name] = flat[pos : pos + size].reshape(shape).copy()
            pos += size
        return ParamVector(self.names, out)

    def same_structure(self, other: "ParamVector") -> bool:
        return self.names == other.names and all(
            self.tensors[n].shape == other.tensors[n].shape for n in self.names
        )

    def require_same_structure(self, other: "ParamVector", what: str = "operand"):
        if not self.same_structure(other):
            raise ConfigError(f"{what} does not match ParamVector structure")

    # -- arithmetic -------------------------------------------------------

    def add(self, other: "ParamVector") -> "ParamVector":
        self.require_same_structure(other)
        return ParamVector(
            self.names, {n: self.tensors[n] + other.tensors[n] for n in self.names}
        )

    def sub(self, other: "ParamVector") -> "ParamVector":
        self.require_same_structure(other)
        return ParamVector(
            self.names, {n: self.tensors[n] - other.tensors[n] for n in self.names}
        )

    def scale(self, c: float) -> "ParamVector":
        return ParamVector(self.names, {n: self.tensors[n] * c for n in self.names})

    def add_scaled(self, other: "ParamVector", c: float) -> "ParamVector":
        """self + c * other."""
        self.require_same_structure(other)
        return ParamVector(
            self.names,
            {n: self.tensors[n] + c * other.tensors[n] for n in self.names},
        )

    def dot(self, other: "ParamVector") -> float:
        self.require_same_structure(other)
        return float(
            sum(
                np.dot(self.tensors[n].ravel(), other.tensors[n].ravel())
                for n in self.names
            )
        )

    def norm2(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def sq_norm(self) -> float:
        return self.dot(self)

    def inf_norm(self) -> float:
        return max(
            (float(np.max(np.abs(self.tensors[n]))) for n in self.names if self.tensors[n].size),
            default=0.0,
        )
