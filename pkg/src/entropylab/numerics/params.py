"""Named parameter segments with flat-vector algebra."""

from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np


class ShapeMismatch(ValueError):
    pass


class ParamVector(Mapping[str, np.ndarray]):
    """An ordered set of named float64 arrays that behaves like one flat vector.

    Segments are stored read-only; arithmetic always returns a new instance.
    """

    __slots__ = ("_segments",)

    def __init__(self, segments: Mapping[str, np.ndarray] | None = None):
        store: dict[str, np.ndarray] = {}
        for name, value in (segments or {}).items():
            arr = np.array(value, dtype=np.float64, copy=True)
            arr.setflags(write=False)
            store[name] = arr
        self._segments = store

    def __getitem__(self, name: str) -> np.ndarray:
        return self._segments[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._segments)

    def __len__(self) -> int:
        return len(self._segments)

    def __eq__(self, other) -> bool:
        return isinstance(other, ParamVector) and self.bit_equal(other)

    __hash__ = None

    def __repr__(self) -> str:
        body = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._segments.items())
        return f"ParamVector({body})"

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._segments.items()}

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self._segments.values()))

    def flatten(self) -> np.ndarray:
        if not self._segments:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._segments.values()])

    @classmethod
    def unflatten(cls, shapes: Mapping[str, tuple[int, ...]], flat: np.ndarray) -> ParamVector:
        flat = np.asarray(flat, dtype=np.float64)
        total = int(sum(int(np.prod(s)) for s in shapes.values()))
        if flat.shape != (total,):
            raise ShapeMismatch(f"expected flat vector of length {total}, got shape {flat.shape}")
        out, offset = {}, 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            out[name] = flat[offset:offset + n].reshape(shape)
            offset += n
        return cls(out)

    def _check_compatible(self, other: ParamVector) -> None:
        if self.shapes != other.shapes:
            raise ShapeMismatch(f"segment layouts differ: {self.shapes} vs {other.shapes}")

    def inner(self, other: ParamVector) -> float:
        """Sum over segments of elementwise products."""
        self._check_compatible(other)
        return float(sum(np.vdot(a, other[k]) for k, a in self._segments.items()))

    def norm(self) -> float:
        return float(np.sqrt(self.inner(self)))

    def map(self, fn) -> ParamVector:
        return ParamVector({k: fn(v) for k, v in self._segments.items()})

    def zip_map(self, other: ParamVector, fn) -> ParamVector:
        self._check_compatible(other)
        return ParamVector({k: fn(v, other[k]) for k, v in self._segments.items()})

    def __add__(self, other: ParamVector) -> ParamVector:
        return self.zip_map(other, np.add)

    def __sub__(self, other: ParamVector) -> ParamVector:
        return self.zip_map(other, np.subtract)

    def __mul__(self, c: float) -> ParamVector:
        return self.map(lambda v: v * c)

    __rmul__ = __mul__

    def __neg__(self) -> ParamVector:
        return self.map(np.negative)

    def zeros_like(self) -> ParamVector:
        return self.map(np.zeros_like)

    def select(self, names) -> ParamVector:
        return ParamVector({k: self._segments[k] for k in names})

    def without(self, names) -> ParamVector:
        drop = set(names)
        return ParamVector({k: v for k, v in self._segments.items() if k not in drop})

    def merged(self, other: ParamVector) -> ParamVector:
        """Concatenate segment sets; names must be disjoint."""
        clash = set(self) & set(other)
        if clash:
            raise ShapeMismatch(f"duplicate segment names: {sorted(clash)}")
        return ParamVector({**self._segments, **dict(other.items())})

    def allfinite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._segments.values())

    def bit_equal(self, other: ParamVector) -> bool:
        if self.shapes != other.shapes:
            return False
        return all(a.tobytes() == other[k].tobytes() for k, a in self._segments.items())


def inner(a: ParamVector, b: ParamVector) -> float:
    return a.inner(b)
