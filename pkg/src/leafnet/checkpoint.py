"""Binary named-tensor checkpoints and pretrained-weight import.

Layout (all integers little-endian)::

    magic      4 bytes  b"LFNT"
    version    u32      1
    count      u32      number of entries
    entry * count:
        name_len u32, name (UTF-8, name_len bytes)
        dtype    u8     0 = float32
        ndim     u32, dims u32 * ndim
        values   float32 * prod(dims)
    checksum   u64      first 8 bytes of BLAKE2b over everything before it

Entries are the model's parameters followed by its batch-norm running
statistics, in ``Module.state_dict`` order.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import atomic_write_bytes
from .errors import CheckpointCorruptError, CheckpointSchemaError, ShapeError, WeightImportError
from .nn import Module, ResNet

MAGIC = b"LFNT"
VERSION = 1
DTYPE_F32 = 0


def checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def encode(entries: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f4")
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + checksum(body)


def decode(payload: bytes, source: str = "<bytes>") -> "OrderedDict[str, np.ndarray]":
    if len(payload) < 20 or payload[:4] != MAGIC:
        raise CheckpointCorruptError(f"{source}: not a leafnet checkpoint (bad magic or too short)")
    body, tail = payload[:-8], payload[-8:]
    if checksum(body) != tail:
        raise CheckpointCorruptError(f"{source}: checksum mismatch (file truncated or corrupted)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointCorruptError(f"{source}: unsupported format version {version}")
    pos = 12
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + name_len].decode("utf-8")
            pos += name_len
            dtype, ndim = struct.unpack_from("<BI", body, pos)
            pos += 5
            if dtype != DTYPE_F32:
                raise CheckpointCorruptError(f"{source}: entry {name!r} has unknown dtype tag {dtype}")
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(body):
                raise CheckpointCorruptError(f"{source}: entry {name!r} runs past end of file")
            arr = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
            pos += nbytes
            if name in entries:
                raise CheckpointCorruptError(f"{source}: duplicate entry name {name!r}")
            entries[name] = arr.astype(np.float32)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointCorruptError(f"{source}: malformed entry table ({exc})") from None
    if pos != len(body):
        raise CheckpointCorruptError(f"{source}: {len(body) - pos} trailing bytes after entry table")
    return entries


def read_entries(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return decode(fh.read(), str(path))


def write_entries(path, entries: Dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(OrderedDict(entries)))


def save(model: Module, path) -> None:
    """Write every parameter and running statistic; the file appears atomically."""
    write_entries(path, model.state_dict())


def _check_shapes(model_state: Dict[str, np.ndarray], entries: Dict[str, np.ndarray]) -> None:
    for name, value in entries.items():
        expected = model_state[name].shape
        if tuple(value.shape) != tuple(expected):
            raise ShapeError(f"shape mismatch for {name}: checkpoint {tuple(value.shape)}, model {tuple(expected)}")


def load(model: Module, path) -> None:
    """Restore a checkpoint written by :func:`save`.

    Every check runs before anything is written, so on error the model is unchanged.
    """
    entries = read_entries(path)
    state = model.state_tensors()
    missing = [n for n in state if n not in entries]
    unknown = [n for n in entries if n not in state]
    if missing or unknown:
        parts = []
        if missing:
            parts.append(f"missing: {', '.join(missing)}")
        if unknown:
            parts.append(f"unknown: {', '.join(unknown)}")
        raise CheckpointSchemaError(f"{path}: checkpoint does not match model ({'; '.join(parts)})",
                                    missing + unknown)
    _check_shapes(state, entries)
    model.assign_state(entries)
    if hasattr(model, "weights_source"):
        model.weights_source = str(path)


# pretrained import


@dataclass
class NameMap:
    """Ordered ``external -> internal`` name pairs plus the head policy (``skip`` or ``import``).

    Text form: one ``external internal`` pair per line, ``#`` comments, and an
    optional ``@head skip|import`` directive.
    """

    pairs: List[Tuple[str, str]] = field(default_factory=list)
    head_policy: str = "skip"

    @classmethod
    def identity(cls, names: Sequence[str], head_policy: str = "skip") -> "NameMap":
        return cls([(n, n) for n in names], head_policy)

    @classmethod
    def parse(cls, text: str) -> "NameMap":
        pairs, policy = [], "skip"
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "@head":
                if len(parts) != 2 or parts[1] not in ("skip", "import"):
                    raise WeightImportError(f"name map line {line_no}: expected '@head skip|import'")
                policy = parts[1]
                continue
            if len(parts) != 2:
                raise WeightImportError(f"name map line {line_no}: expected 'external internal'")
            pairs.append((parts[0], parts[1]))
        internal = [i for _, i in pairs]
        dupes = sorted({i for i in internal if internal.count(i) > 1})
        if dupes:
            raise WeightImportError(f"name map targets {', '.join(dupes)} more than once", dupes)
        return cls(pairs, policy)

    @classmethod
    def load(cls, path) -> "NameMap":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def to_text(self) -> str:
        lines = [f"@head {self.head_policy}"] + [f"{e} {i}" for e, i in self.pairs]
        return "\n".join(lines) + "\n"


@dataclass
class ImportSummary:
    imported: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    unmatched: List[str] = field(default_factory=list)
    ignored: List[str] = field(default_factory=list)

    def to_text(self) -> str:
        return (
            f"imported {len(self.imported)}, skipped {len(self.skipped)} (head), "
            f"unmatched {len(self.unmatched)}, ignored dump entries {len(self.ignored)}"
            + "".join(f"\n  unmatched: {n}" for n in self.unmatched)
        )


def _is_head(name: str) -> bool:
    return name.startswith("head.")


def import_pretrained(path, model: Module, name_map: Optional[NameMap] = None,
                      strict: bool = True) -> ImportSummary:
    """Overwrite backbone weights from a flat named-tensor dump.

    ``unmatched`` lists internal backbone names that the dump (through the map)
    did not provide; in strict mode any such name is an error. ``ignored``
    lists dump entries the map does not mention. Nothing is written unless
    every check passes.
    """
    entries = read_entries(path)
    state = model.state_tensors()
    if name_map is None:
        name_map = NameMap.identity(list(state))
    summary = ImportSummary()
    updates: "OrderedDict[str, np.ndarray]" = OrderedDict()
    mapped_external = set()
    bad_targets = []
    for external, internal in name_map.pairs:
        mapped_external.add(external)
        if internal not in state:
            bad_targets.append(internal)
            continue
        if _is_head(internal) and name_map.head_policy == "skip":
            summary.skipped.append(internal)
            continue
        if external not in entries:
            continue
        updates[internal] = entries[external]
    if bad_targets:
        raise WeightImportError(f"name map targets unknown parameter(s): {', '.join(bad_targets)}", bad_targets)
    summary.ignored = [n for n in entries if n not in mapped_external]
    wanted = [n for n in state if not (_is_head(n) and name_map.head_policy == "skip")]
    summary.unmatched = [n for n in wanted if n not in updates]
    if strict and summary.unmatched:
        sources = {i: e for e, i in name_map.pairs}
        detail = ", ".join(f"{n} (dump name {sources[n]!r})" if n in sources else n for n in summary.unmatched)
        raise WeightImportError(f"{path}: dump does not cover {detail}", summary.unmatched)
    _check_shapes(state, updates)
    model.assign_state(updates)
    summary.imported = list(updates)
    if hasattr(model, "weights_source"):
        model.weights_source = str(path)
    return summary


def torchvision_resnet_namemap(blocks: Sequence[int] = (3, 4, 6, 3), head_policy: str = "skip") -> NameMap:
    """Map torchvision ResNet state-dict names onto leafnet names."""
    pairs = [("conv1.weight", "stem.conv.weight")]
    for suffix in ("weight", "bias", "running_mean", "running_var"):
        pairs.append((f"bn1.{suffix}", f"stem.bn.{suffix}"))
    for s, count in enumerate(blocks, start=1):
        for b in range(count):
            ext, own = f"layer{s}.{b}", f"stage{s}.block{b + 1}"
            for conv, bn in (("conv1", "bn1"), ("conv2", "bn2")):
                pairs.append((f"{ext}.{conv}.weight", f"{own}.{conv}.weight"))
                for suffix in ("weight", "bias", "running_mean", "running_var"):
                    pairs.append((f"{ext}.{bn}.{suffix}", f"{own}.{bn}.{suffix}"))
            if b == 0 and s > 1:
                pairs.append((f"{ext}.downsample.0.weight", f"{own}.downsample.conv.weight"))
                for suffix in ("weight", "bias", "running_mean", "running_var"):
                    pairs.append((f"{ext}.downsample.1.{suffix}", f"{own}.downsample.bn.{suffix}"))
    pairs += [("fc.weight", "head.weight"), ("fc.bias", "head.bias")]
    return NameMap(pairs, head_policy)


def model_from_entries(entries: Dict[str, np.ndarray]) -> ResNet:
    """Rebuild the ResNet layout a checkpoint was saved from (weights not loaded)."""
    try:
        stem = entries["stem.conv.weight"]
        head = entries["head.weight"]
    except KeyError as exc:
        raise CheckpointSchemaError(f"checkpoint has no {exc.args[0]!r}; not a ResNet", [exc.args[0]]) from None
    layout = "imagenet" if stem.shape[-1] == 7 else "compact"
    blocks, widths = [], []
    s = 1
    while f"stage{s}.block1.conv1.weight" in entries:
        count = 0
        while f"stage{s}.block{count + 1}.conv1.weight" in entries:
            count += 1
        blocks.append(count)
        widths.append(entries[f"stage{s}.block1.conv1.weight"].shape[0])
        s += 1
    return ResNet(blocks, widths, head.shape[0], stem=layout, in_channels=stem.shape[1], rng=0)


def load_model(path) -> ResNet:
    """Build the matching ResNet for a checkpoint file and load it."""
    entries = read_entries(path)
    model = model_from_entries(entries)
    load(model, path)
    return model
