"""Reading and writing safetensors-style checkpoints.

A container file is laid out as::

    [8 bytes]  little-endian u64 N, the header length
    [N bytes]  UTF-8 JSON: {name: {"dtype", "shape", "data_offsets": [begin, end]}}
    [rest]     raw little-endian tensor bytes; offsets are relative to this section

Sharded checkpoints are a directory holding a ``*.index.json`` file whose
``"weight_map"`` maps tensor names to shard filenames.

Opening only parses headers; tensor bytes are read on demand by
:func:`load_tensor`, each call with its own file handle so concurrent loads of
distinct tensors are safe.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "CheckpointError",
    "MalformedHeaderError",
    "TensorLoadError",
    "TruncatedTensorError",
    "TensorRecord",
    "TensorEntry",
    "CheckpointManifest",
    "open_checkpoint",
    "load_tensor",
    "write_fixture",
    "write_sharded_fixture",
    "decode_float16",
    "decode_bfloat16",
]

# dtype tag -> (canonical name, bytes per element)
DTYPES = {
    "F32": ("float32", 4),
    "F16": ("float16", 2),
    "BF16": ("bfloat16", 2),
}
_TAG_FOR_DTYPE = {name: tag for tag, (name, _) in DTYPES.items()}

# Guards against absurd header lengths before allocating.
MAX_HEADER_BYTES = 100 * 1024 * 1024


class CheckpointError(Exception):
    """Checkpoint cannot be opened or is structurally invalid."""


class MalformedHeaderError(CheckpointError):
    pass


class TensorLoadError(Exception):
    """A single tensor cannot be decoded; the rest of the checkpoint may be fine."""


class TruncatedTensorError(TensorLoadError):
    pass


@dataclass(frozen=True)
class TensorRecord:
    """One decoded tensor.

    ``values`` is a flat float32 array in row-major order. ``nonfinite_count``
    flags NaN/inf entries; such records are loaded, never silently dropped,
    and it is up to the caller to decide what to do with them.
    """

    name: str
    shape: tuple[int, ...]
    dtype: str
    values: np.ndarray
    nonfinite_count: int = 0

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("tensor name must be non-empty")
        if self.dtype not in _TAG_FOR_DTYPE:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if math.prod(self.shape) != self.values.size:
            raise ValueError(
                f"{self.name}: shape {list(self.shape)} does not match {self.values.size} values"
            )

    @classmethod
    def from_array(cls, name: str, array, dtype: str = "float32") -> "TensorRecord":
        """Build a record from any array-like, rounding to ``dtype`` storage precision."""
        arr = np.asarray(array)
        flat = encode(np.asarray(arr, dtype=np.float32).ravel(), dtype)
        values = decode(flat.tobytes(), dtype)
        return cls(name, tuple(int(d) for d in arr.shape), dtype, values, _count_nonfinite(values))

    @property
    def flagged(self) -> bool:
        return self.nonfinite_count > 0

    def matrix(self) -> np.ndarray:
        return self.values.reshape(self.shape)


@dataclass(frozen=True)
class TensorEntry:
    shard: Path
    dtype: str
    shape: tuple[int, ...]
    # absolute byte offsets into the shard file, [begin, end)
    begin: int
    end: int

    @property
    def ndim(self) -> int:
        return len(self.shape)


@dataclass(frozen=True)
class CheckpointManifest:
    path: Path
    shards: tuple[tuple[Path, int], ...]
    tensors: Mapping[str, TensorEntry] = field(default_factory=dict)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return sorted(self.tensors)


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------


def decode_float16(raw: bytes | np.ndarray) -> np.ndarray:
    """IEEE half -> float32. Exact: every half value is representable in float32."""
    return np.frombuffer(raw, dtype="<f2").astype(np.float32)


def decode_bfloat16(raw: bytes | np.ndarray) -> np.ndarray:
    """bfloat16 is the top half of a float32, so widening is a 16-bit shift."""
    bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << np.uint32(16)
    return bits.view(np.float32)


def decode(raw: bytes, dtype: str) -> np.ndarray:
    if dtype == "float32":
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if dtype == "float16":
        return decode_float16(raw)
    if dtype == "bfloat16":
        return decode_bfloat16(raw)
    raise TensorLoadError(f"unsupported dtype {dtype!r}")


def encode(values: np.ndarray, dtype: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float32)
    if dtype == "float32":
        return values.astype("<f4")
    if dtype == "float16":
        return values.astype("<f2")
    if dtype == "bfloat16":
        # round-to-nearest-even on the dropped 16 bits; NaN kept quiet
        bits = values.view(np.uint32).astype(np.uint64)
        rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
        nan = np.isnan(values)
        rounded[nan] = (bits[nan] >> 16) | 0x40
        return rounded.astype("<u2")
    raise ValueError(f"unsupported dtype {dtype!r}")


def _count_nonfinite(values: np.ndarray) -> int:
    return int(values.size - np.count_nonzero(np.isfinite(values)))


# --------------------------------------------------------------------------
# reading
# --------------------------------------------------------------------------


def _read_header(path: Path) -> tuple[dict, int, int]:
    """Return (header dict, data section start, file size)."""
    size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise MalformedHeaderError(f"{path}: file shorter than the 8-byte header length")
        (n,) = struct.unpack("<Q", prefix)
        if n > size - 8 or n > MAX_HEADER_BYTES:
            raise MalformedHeaderError(
                f"{path}: header length {n} exceeds file size {size}"
            )
        blob = fh.read(n)
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid UTF-8 JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header must be a JSON object")
    return header, 8 + n, size


def _parse_entries(path: Path) -> tuple[dict[str, TensorEntry], int]:
    header, data_start, size = _read_header(path)
    entries: dict[str, TensorEntry] = {}
    for name, info in header.items():
        if name == "__metadata__":
            continue
        try:
            tag = info["dtype"]
            shape = tuple(int(d) for d in info["shape"])
            begin, end = (int(x) for x in info["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedHeaderError(f"{path}: bad header entry for {name!r}") from exc
        if any(d < 0 for d in shape) or begin < 0 or end < begin:
            raise MalformedHeaderError(f"{path}: {name!r} has an invalid shape or byte range")
        # unknown dtypes are kept in the manifest and rejected at load time
        dtype, itemsize = DTYPES.get(tag, (tag, None))
        if itemsize is not None and end - begin != math.prod(shape) * itemsize:
            raise MalformedHeaderError(
                f"{path}: {name!r} byte range length {end - begin} does not match "
                f"shape {list(shape)} of {dtype}"
            )
        entries[name] = TensorEntry(path, dtype, shape, data_start + begin, data_start + end)

    spans = sorted((e.begin, e.end, n) for n, e in entries.items() if e.end > e.begin)
    for (b0, e0, n0), (b1, _, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise MalformedHeaderError(f"{path}: byte ranges of {n0!r} and {n1!r} overlap")
    return entries, size


def _find_index(directory: Path) -> Path | None:
    candidates = sorted(directory.glob("*.index.json"))
    return candidates[0] if candidates else None


def open_checkpoint(path: str | os.PathLike) -> CheckpointManifest:
    """Parse the header(s) of a checkpoint without touching tensor data.

    ``path`` is a single container file, or a directory with a shard index
    (``*.index.json``) or, failing that, exactly one ``*.safetensors`` file.

    Byte ranges that run past the end of a shard are not an open-time error:
    the damage is confined to those tensors, which fail in :func:`load_tensor`.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")

    if path.is_dir():
        index = _find_index(path)
        if index is not None:
            try:
                weight_map = json.loads(index.read_text(encoding="utf-8"))["weight_map"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise MalformedHeaderError(f"{index}: not a valid shard index") from exc
            shard_files = [path / f for f in sorted(set(weight_map.values()))]
        else:
            shard_files = sorted(path.glob("*.safetensors"))
            if len(shard_files) != 1:
                raise CheckpointError(
                    f"{path}: expected a shard index or a single .safetensors file, "
                    f"found {len(shard_files)} container files"
                )
    else:
        shard_files = [path]

    tensors: dict[str, TensorEntry] = {}
    shards = []
    for shard in shard_files:
        if not shard.is_file():
            raise CheckpointError(f"shard not found: {shard}")
        entries, size = _parse_entries(shard)
        for name, entry in entries.items():
            if name in tensors:
                raise CheckpointError(
                    f"tensor {name!r} appears in both {tensors[name].shard.name} and {shard.name}"
                )
            tensors[name] = entry
        shards.append((shard, size))

    return CheckpointManifest(path, tuple(shards), MappingProxyType(dict(sorted(tensors.items()))))


def load_tensor(manifest: CheckpointManifest, name: str) -> TensorRecord:
    try:
        entry = manifest.tensors[name]
    except KeyError:
        raise KeyError(f"no tensor named {name!r} in {manifest.path}") from None
    if entry.dtype not in _TAG_FOR_DTYPE:
        raise TensorLoadError(f"{name}: unsupported dtype {entry.dtype!r}")

    length = entry.end - entry.begin
    with open(entry.shard, "rb") as fh:
        fh.seek(entry.begin)
        raw = fh.read(length)
    if len(raw) != length:
        raise TruncatedTensorError(
            f"{name}: expected {length} bytes at offset {entry.begin} of "
            f"{entry.shard.name}, got {len(raw)}"
        )
    values = decode(raw, entry.dtype)
    return TensorRecord(name, entry.shape, entry.dtype, values, _count_nonfinite(values))


# --------------------------------------------------------------------------
# writing (fixtures and synthetic models)
# --------------------------------------------------------------------------


def _check_unique(tensors: Sequence[TensorRecord]) -> None:
    seen = set()
    for t in tensors:
        if t.name in seen:
            raise ValueError(f"duplicate tensor name {t.name!r}")
        seen.add(t.name)


def write_fixture(tensors: Iterable[TensorRecord], path: str | os.PathLike) -> None:
    """Write ``tensors`` as a single container file.

    Header keys are sorted and data is laid out contiguously in that order,
    so identical inputs always produce identical bytes.
    """
    tensors = sorted(tensors, key=lambda t: t.name)
    _check_unique(tensors)

    header: dict[str, dict] = {}
    chunks = []
    offset = 0
    for t in tensors:
        data = encode(t.values, t.dtype).tobytes()
        header[t.name] = {
            "dtype": _TAG_FOR_DTYPE[t.dtype],
            "shape": list(t.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        chunks.append(data)
        offset += len(data)

    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    # pad with spaces so the data section starts 8-byte aligned
    blob += b" " * (-(8 + len(blob)) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def write_sharded_fixture(
    shards: Mapping[str, Sequence[TensorRecord]],
    directory: str | os.PathLike,
    index_name: str = "model.safetensors.index.json",
) -> Path:
    """Write one container per shard filename plus a ``weight_map`` index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _check_unique([t for ts in shards.values() for t in ts])

    weight_map = {}
    total = 0
    for filename, tensors in sorted(shards.items()):
        write_fixture(tensors, directory / filename)
        for t in tensors:
            weight_map[t.name] = filename
            total += t.values.size * DTYPES[_TAG_FOR_DTYPE[t.dtype]][1]

    index_path = directory / index_name
    index = {"metadata": {"total_size": total}, "weight_map": dict(sorted(weight_map.items()))}
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return index_path
