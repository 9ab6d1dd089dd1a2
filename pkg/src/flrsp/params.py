"""Ordered parameter collections and their binary file format.

A :class:`ParamSet` maps tensor names to float64 arrays in a fixed order.
Layer ``k`` of the federated-learning notation is the k-th tensor; index
``i`` runs over its flattened (row-major) scalars.
"""

from __future__ import annotations

import struct
from collections.abc import Iterator, Mapping
from pathlib import Path

import numpy as np

MAGIC = b"FLPS"
VERSION = 1


class ParamSet(Mapping):
    """Ordered name -> ndarray mapping with flat-vector views."""

    def __init__(self, tensors=None, *, copy: bool = True):
        self._tensors: dict[str, np.ndarray] = {}
        if tensors is None:
            return
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        for name, value in items:
            arr = np.array(value, copy=copy)
            if not np.iscomplexobj(arr):
                arr = arr.astype(np.float64, copy=False)
            self._tensors[str(name)] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value) -> None:
        if name in self._tensors and np.shape(value) != self._tensors[name].shape:
            raise ValueError(
                f"shape mismatch for {name!r}: {np.shape(value)} vs {self._tensors[name].shape}"
            )
        arr = np.array(value)
        if not np.iscomplexobj(arr):
            arr = arr.astype(np.float64, copy=False)
        self._tensors[name] = arr

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{v.shape}" for k, v in self._tensors.items())
        return f"ParamSet({inner})"

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._tensors.items()}

    @property
    def size(self) -> int:
        """Total number of scalars."""
        return int(sum(v.size for v in self._tensors.values()))

    def copy(self) -> ParamSet:
        return ParamSet(self._tensors, copy=True)

    def flat(self) -> np.ndarray:
        """Concatenate every tensor into one vector, in tensor order."""
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._tensors.values()])

    def with_flat(self, vector) -> ParamSet:
        """New ParamSet with this layout, filled from ``vector``."""
        vector = np.asarray(vector)
        if vector.shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}, got {vector.shape}")
        out, offset = {}, 0
        for name, arr in self._tensors.items():
            out[name] = vector[offset : offset + arr.size].reshape(arr.shape)
            offset += arr.size
        return ParamSet(out)

    def zeros_like(self) -> ParamSet:
        return ParamSet({k: np.zeros(v.shape) for k, v in self._tensors.items()}, copy=False)

    def map(self, fn) -> ParamSet:
        return ParamSet({k: fn(v) for k, v in self._tensors.items()}, copy=False)

    def same_layout(self, other: Mapping) -> bool:
        if list(self.keys()) != list(other.keys()):
            return False
        return all(self[k].shape == np.shape(other[k]) for k in self)

    def check_layout(self, other: Mapping) -> None:
        if not self.same_layout(other):
            raise ValueError(
                f"layout mismatch: {self.shapes} vs "
                f"{ {k: np.shape(v) for k, v in other.items()} }"
            )

    def allclose(self, other: Mapping, **kw) -> bool:
        return self.same_layout(other) and all(
            np.allclose(self[k], other[k], **kw) for k in self
        )

    def equal(self, other: Mapping) -> bool:
        """Bitwise equality of every tensor."""
        return self.same_layout(other) and all(
            np.array_equal(self[k], other[k]) for k in self
        )

    def locate(self, flat_index: int) -> tuple[str, tuple[int, ...]]:
        """Map a flat scalar index to (tensor name, array index)."""
        offset = 0
        for name, arr in self._tensors.items():
            if flat_index < offset + arr.size:
                return name, np.unravel_index(flat_index - offset, arr.shape)
            offset += arr.size
        raise IndexError(flat_index)

    # -- serialization -------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self._tensors))]
        for name, arr in self._tensors.items():
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<I", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<I", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> ParamSet:
        view = memoryview(blob)
        if bytes(view[:4]) != MAGIC:
            raise ValueError("not a ParamSet file (bad magic)")
        version, count = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise ValueError(f"unsupported ParamSet version {version}")
        pos = 12
        tensors = {}
        try:
            for _ in range(count):
                (name_len,) = struct.unpack_from("<I", view, pos)
                pos += 4
                name = bytes(view[pos : pos + name_len]).decode("utf-8")
                pos += name_len
                (rank,) = struct.unpack_from("<I", view, pos)
                pos += 4
                shape = struct.unpack_from(f"<{rank}Q", view, pos)
                pos += 8 * rank
                n = int(np.prod(shape, dtype=np.int64))
                if pos + 8 * n > len(view):
                    raise ValueError(f"truncated tensor data for {name!r} at byte {pos}")
                data = np.frombuffer(view, dtype="<f8", count=n, offset=pos)
                tensors[name] = data.reshape(shape).astype(np.float64)
                pos += 8 * n
        except struct.error as exc:
            raise ValueError(f"truncated ParamSet file at byte {pos}") from exc
        if pos != len(view):
            raise ValueError(f"trailing bytes after ParamSet at byte {pos}")
        return cls(tensors, copy=False)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> ParamSet:
        return cls.from_bytes(Path(path).read_bytes())
