"""Model weights as named layer vectors, plus the arithmetic the federation performs on them.

A ParameterSet is the unit exchanged between server and clients: an ordered,
named collection of float64 vectors. Layer order is fixed at construction and
treated as canonical; every reduction walks layers and elements in that order,
which keeps results bit-reproducible. Instances are immutable, so they can be
shared freely across threads; mutation is expressed by building a new set.
"""

from __future__ import annotations

import math
from typing import Iterable, Iterator

import numpy as np

__all__ = [
    "ParameterSet",
    "ShapeMismatchError",
    "require_compatible",
    "zeros_like",
    "add_scaled",
    "l2_distance",
]


class ShapeMismatchError(ValueError):
    """Two parameter sets (or a parameter set and an input) disagree structurally."""


class ParameterSet:
    """Ordered, named collection of float64 weight vectors."""

    __slots__ = ("_names", "_arrays")

    def __init__(self, layers: Iterable[tuple[str, "np.ndarray | Iterable[float]"]]):
        names: list[str] = []
        arrays: list[np.ndarray] = []
        seen: set[str] = set()
        for name, values in layers:
            if not isinstance(name, str) or not name:
                raise ValueError(f"layer name must be a non-empty string, got {name!r}")
            if name in seen:
                raise ValueError(f"duplicate layer name: {name!r}")
            seen.add(name)
            arr = np.array(values, dtype=np.float64).reshape(-1)
            arr.flags.writeable = False
            names.append(name)
            arrays.append(arr)
        self._names = tuple(names)
        self._arrays = tuple(arrays)

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def arrays(self) -> tuple[np.ndarray, ...]:
        return self._arrays

    @property
    def layers(self) -> tuple[tuple[str, np.ndarray], ...]:
        return tuple(zip(self._names, self._arrays))

    @property
    def total_size(self) -> int:
        return sum(a.size for a in self._arrays)

    def shape_signature(self) -> tuple[tuple[str, int], ...]:
        """Canonical (name, length) sequence; equal signatures = shape-compatible."""
        return tuple((n, a.size) for n, a in zip(self._names, self._arrays))

    def shape_compatible(self, other: "ParameterSet") -> bool:
        return self.shape_signature() == other.shape_signature()

    def validate(self) -> "ParameterSet":
        """Check every value is finite. Applied at module boundaries, not per call."""
        for name, arr in zip(self._names, self._arrays):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite value in layer {name!r}")
        return self

    def as_vector(self) -> np.ndarray:
        """All values concatenated in canonical layer order."""
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate(self._arrays)

    def with_vector(self, vector: np.ndarray) -> "ParameterSet":
        """New set with the same layout but values taken from a flat vector."""
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.size != self.total_size:
            raise ShapeMismatchError(
                f"vector has {vector.size} elements, parameter set has {self.total_size}"
            )
        out = []
        pos = 0
        for name, arr in zip(self._names, self._arrays):
            out.append((name, vector[pos : pos + arr.size]))
            pos += arr.size
        return ParameterSet(out)

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.layers)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterSet):
            return NotImplemented
        return self._names == other._names and all(
            np.array_equal(a, b) for a, b in zip(self._arrays, other._arrays)
        )

    __hash__ = None  # type: ignore[assignment]  # array-valued, not hashable

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}[{a.size}]" for n, a in zip(self._names, self._arrays))
        return f"ParameterSet({inner})"


def require_compatible(a: ParameterSet, b: ParameterSet) -> None:
    if a.names != b.names:
        for i, (na, nb) in enumerate(zip(a.names, b.names)):
            if na != nb:
                raise ShapeMismatchError(f"layer {i} named {na!r} on one side, {nb!r} on the other")
        raise ShapeMismatchError(f"layer count differs: {len(a.names)} vs {len(b.names)}")
    for name, xa, xb in zip(a.names, a.arrays, b.arrays):
        if xa.size != xb.size:
            raise ShapeMismatchError(f"layer {name!r} has {xa.size} elements vs {xb.size}")


def zeros_like(p: ParameterSet) -> ParameterSet:
    return ParameterSet((name, np.zeros(arr.size)) for name, arr in p)


def add_scaled(a: ParameterSet, b: ParameterSet, c: float) -> ParameterSet:
    """Element-wise a + c*b."""
    require_compatible(a, b)
    c = float(c)
    return ParameterSet((name, xa + c * xb) for (name, xa), (_, xb) in zip(a, b))


def l2_distance(a: ParameterSet, b: ParameterSet) -> float:
    """Euclidean distance over the concatenation of all layers."""
    require_compatible(a, b)
    total = 0.0
    for (_, xa), (_, xb) in zip(a, b):
        d = xa - xb
        total += float(np.dot(d, d))
    return math.sqrt(total)
