"""Named parameter collections and the elementwise arithmetic defined on them."""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Callable, Iterable, Iterator, Mapping

import numpy as np

from fedtune.errors import UsageError

log = logging.getLogger(__name__)

HALF_MAX = 65504.0


def _frozen_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True)
    if arr.ndim not in (1, 2):
        raise UsageError(f"tensors must be rank 1 or 2, got shape {arr.shape}")
    if arr.size == 0:
        raise UsageError("tensors must be non-empty")
    arr.flags.writeable = False
    return arr


class ParamTree(Mapping):
    """Immutable, name-sorted mapping of float64 tensors.

    Arrays are copied on construction and marked read-only, so a tree handed
    to another component can never be mutated behind its owner's back.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        d: dict[str, np.ndarray] = {}
        for name, value in items:
            if name in d:
                raise UsageError(f"duplicate parameter name {name!r}")
            d[name] = value if _is_frozen(value) else _frozen_array(value)
        self._entries = {k: d[k] for k in sorted(d)}

    @classmethod
    def _trusted(cls, entries: dict[str, np.ndarray]) -> ParamTree:
        tree = cls.__new__(cls)
        for v in entries.values():
            v.flags.writeable = False
        tree._entries = {k: entries[k] for k in sorted(entries)}
        return tree

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}{list(v.shape)}" for k, v in self._entries.items())
        return f"ParamTree({body})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamTree):
            return NotImplemented
        return self.congruent(other) and all(
            np.array_equal(self[k], other[k]) for k in self
        )

    __hash__ = None

    @property
    def names(self) -> list[str]:
        return list(self._entries)

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self._entries.items()]

    def congruent(self, other: ParamTree) -> bool:
        return self.shapes() == other.shapes()

    def num_params(self) -> int:
        return int(sum(v.size for v in self._entries.values()))

    def subset(self, names: Iterable[str]) -> ParamTree:
        return ParamTree._trusted({n: self._entries[n] for n in names})

    def merged(self, other: Mapping[str, np.ndarray]) -> ParamTree:
        """Entries of ``other`` replace or extend this tree's entries."""
        d = dict(self._entries)
        for k, v in other.items():
            d[k] = v if _is_frozen(v) else _frozen_array(v)
        return ParamTree._trusted(d)

    def replace(self, name: str, value) -> ParamTree:
        if name not in self._entries:
            raise UsageError(f"unknown parameter {name!r}")
        arr = _frozen_array(value)
        if arr.shape != self._entries[name].shape:
            raise UsageError(f"shape mismatch for {name!r}")
        return self.merged({name: arr})

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> ParamTree:
        return ParamTree._trusted({k: np.asarray(fn(v), dtype=np.float64) for k, v in self._entries.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self._entries.items():
            h.update(k.encode())
            h.update(np.asarray(v.shape, dtype="<u4").tobytes())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._entries.values())


def _is_frozen(value) -> bool:
    return (
        isinstance(value, np.ndarray)
        and value.dtype == np.float64
        and not value.flags.writeable
        and value.ndim in (1, 2)
        and value.flags.c_contiguous
    )


def require_congruent(a: ParamTree, b: ParamTree, what: str = "trees") -> None:
    if not a.congruent(b):
        raise UsageError(f"incongruent {what}: {a.shapes()} vs {b.shapes()}")


def zip_map(fn, *trees: ParamTree) -> ParamTree:
    first = trees[0]
    for t in trees[1:]:
        require_congruent(first, t)
    return ParamTree._trusted({k: np.asarray(fn(*(t[k] for t in trees)), dtype=np.float64) for k in first})


def add(a: ParamTree, b: ParamTree) -> ParamTree:
    return zip_map(np.add, a, b)


def sub(a: ParamTree, b: ParamTree) -> ParamTree:
    return zip_map(np.subtract, a, b)


def scale(a: ParamTree, c: float) -> ParamTree:
    return a.map(lambda v: v * c)


def zeros_like(a: ParamTree) -> ParamTree:
    return a.map(np.zeros_like)


def sgd_step(params: ParamTree, grads: ParamTree, lr: float) -> ParamTree:
    """Plain SGD: ``theta - lr * g``. Inputs are left untouched."""
    if lr < 0:
        raise UsageError("learning rate must be non-negative")
    require_congruent(params, grads, "params/grads")
    if lr == 0:
        return params
    return zip_map(lambda p, g: p - lr * g, params, grads)


def round_half(params: ParamTree, warnings: list[str] | None = None) -> ParamTree:
    """Round every value to the nearest IEEE binary16 value, kept at float64.

    Out-of-range values clamp to +-65504; each clamped tensor adds a warning.
    """

    def _round(name: str, v: np.ndarray) -> np.ndarray:
        over = np.abs(v) > HALF_MAX
        if over.any():
            msg = f"round_half: {int(over.sum())} value(s) of {name!r} clamped to +-{HALF_MAX:g}"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            v = np.clip(v, -HALF_MAX, HALF_MAX)
        return v.astype(np.float16).astype(np.float64)

    return ParamTree._trusted({k: _round(k, v) for k, v in params.items()})


def round_single(params: ParamTree) -> ParamTree:
    return params.map(lambda v: v.astype(np.float32).astype(np.float64))
