"""Parameter trees: ordered path->tensor maps with partition tags.

A tree entry's ``partition`` says what kind of parameter it is (backbone
convolution, head/transformer, or normalization gain/bias). Backbone
batch-norm entries are tagged ``NORMALIZATION`` and owe their backbone
lineage to their ``backbone.`` path prefix; aggregation strategies filter by
tag, the phi/omega split filters by prefix.

The module also implements the checkpoint container (magic ``FDTR``): a
little-endian binary encoding whose round-trip is bit-exact.
"""

from __future__ import annotations

import struct
from enum import IntEnum
from typing import Iterator

import numpy as np

from .errors import DataError, StructureError
from .tensor import Tensor

__all__ = ["Partition", "ParamTree", "BACKBONE_PREFIX",
           "encode_entries", "decode_entries", "save_checkpoint", "load_checkpoint"]

BACKBONE_PREFIX = "backbone."

MAGIC = b"FDTR"
FORMAT_VERSION = 1


class Partition(IntEnum):
    BACKBONE = 0
    HEAD = 1
    NORMALIZATION = 2


class ParamTree:
    """Ordered map from hierarchical parameter path to tensor + partition."""

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, Partition]] = {}

    def add(self, path: str, tensor: Tensor, partition: Partition) -> None:
        if path in self._entries:
            raise StructureError(f"duplicate parameter path {path!r}")
        self._entries[path] = (tensor, Partition(partition))

    def __contains__(self, path: str) -> bool:
        return path in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def tensor(self, path: str) -> Tensor:
        try:
            return self._entries[path][0]
        except KeyError:
            raise StructureError(f"missing parameter path {path!r}") from None

    def partition(self, path: str) -> Partition:
        try:
            return self._entries[path][1]
        except KeyError:
            raise StructureError(f"missing parameter path {path!r}") from None

    def paths(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor, Partition]]:
        """Entries in deterministic lexicographic path order."""
        for path in self.paths():
            tensor, part = self._entries[path]
            yield path, tensor, part

    def scalar_count(self) -> int:
        return sum(t.size for _, t, _ in self.items())

    def clone(self) -> "ParamTree":
        out = ParamTree()
        for path, tensor, part in self.items():
            out.add(path, Tensor(tensor.data.copy(), tensor.requires_grad), part)
        return out

    def load_values(self, other: "ParamTree") -> None:
        """Copy value arrays in from a structurally identical tree."""
        if other.paths() != self.paths():
            raise StructureError("parameter trees differ structurally")
        for path, tensor, _ in other.items():
            mine = self.tensor(path)
            if mine.shape != tensor.shape:
                raise StructureError(f"shape mismatch at {path!r}")
            mine.data[...] = tensor.data

    def subtree(self, paths) -> "ParamTree":
        """View (shared tensors) restricted to the given paths."""
        out = ParamTree()
        for path in sorted(paths):
            tensor, part = self._entries[path]
            out.add(path, tensor, part)
        return out

    def zero_grads(self) -> None:
        for _, tensor, _ in self.items():
            tensor.zero_grad()

    def allclose(self, other: "ParamTree") -> bool:
        return self.paths() == other.paths() and all(
            np.array_equal(self.tensor(p).data, other.tensor(p).data)
            for p in self.paths()
        )


def partition_params(params: ParamTree) -> tuple[ParamTree, ParamTree]:
    """Split into (phi, omega): backbone-lineage entries versus the rest.

    Backbone normalization entries belong to phi by path prefix even though
    they carry the NORMALIZATION tag. The two views share tensors with the
    input and cover it disjointly.
    """
    phi_paths = [p for p in params.paths() if p.startswith(BACKBONE_PREFIX)]
    omega_paths = [p for p in params.paths() if not p.startswith(BACKBONE_PREFIX)]
    return params.subtree(phi_paths), params.subtree(omega_paths)


# ---------------------------------------------------------------------------
# wire format

def _encode_entry(path: str, tensor: Tensor, partition: Partition) -> bytes:
    raw = path.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataError(f"path too long to encode: {path[:32]}...")
    if tensor.ndim > 0xFF:
        raise DataError(f"rank {tensor.ndim} exceeds format limit")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", int(partition), tensor.ndim)
    dims = struct.pack(f"<{tensor.ndim}I", *tensor.shape)
    values = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
    return head + dims + values


def encode_entries(tree: ParamTree) -> bytes:
    """Serialize a tree into the FDTR container (lexicographic entry order)."""
    out = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(tree))]
    for path, tensor, part in tree.items():
        out.append(_encode_entry(path, tensor, part))
    return b"".join(out)


def decode_entries(blob: bytes) -> ParamTree:
    if blob[:4] != MAGIC:
        raise DataError(f"bad checkpoint magic {blob[:4]!r}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = 10
    tree = ParamTree()
    for _ in range(count):
        (plen,) = struct.unpack_from("<H", blob, off)
        off += 2
        path = blob[off:off + plen].decode("utf-8")
        off += plen
        part, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        tree.add(path, Tensor(values.astype(np.float64)), Partition(part))
    if off != len(blob):
        raise DataError(f"{len(blob) - off} trailing bytes in checkpoint")
    return tree


def save_checkpoint(path, tree: ParamTree) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_entries(tree))


def load_checkpoint(path) -> ParamTree:
    with open(path, "rb") as fh:
        return decode_entries(fh.read())
