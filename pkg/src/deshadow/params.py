"""Named parameter collections, binary checkpoints, and gradient checks.

Checkpoint layout (all integers little-endian):

    magic  b"CDSH"
    u32    version (currently 1)
    u32    tensor count
    per tensor:
        u16    name length, then UTF-8 name
        u8     rank, then u32 per dimension
        u8     dtype code (0 = float32)
        raw little-endian payload
    u32    CRC32 of every preceding byte

Entries are written in lexicographic name order, which is also the store's
iteration order, so a save/load round trip is bitwise exact.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from collections.abc import Callable, Iterator, Mapping
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"CDSH"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    """Malformed, truncated, or corrupted checkpoint file."""


class ParamStore:
    """Ordered name -> float32 tensor map with lexicographic iteration."""

    def __init__(self, entries: Mapping[str, torch.Tensor]):
        items = sorted(entries.items())
        names = [n for n, _ in items]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self._entries: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, t in items:
            if t.dtype != torch.float32:
                raise ValueError(f"{name}: expected float32, got {t.dtype}")
            self._entries[name] = t

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls(dict(module.named_parameters()))

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self._entries.items())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def numel(self) -> int:
        return sum(t.numel() for t in self._entries.values())


def save_checkpoint(params: ParamStore, path: str | Path) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(params))
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += struct.pack("<B", DTYPE_F32)
        blob += arr.tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> ParamStore:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError(f"truncated checkpoint: {path}")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint file (bad magic): {path}")
    body, (crc_stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"checksum mismatch: {path}")

    offset = 4

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(body):
            raise CheckpointError(f"truncated checkpoint: {path}")
        vals = struct.unpack_from(fmt, body, offset)
        offset += size
        return vals

    (version, count) = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    entries: OrderedDict[str, torch.Tensor] = OrderedDict()
    for _ in range(count):
        (name_len,) = take("<H")
        if offset + name_len > len(body):
            raise CheckpointError(f"truncated checkpoint: {path}")
        name = body[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = take("<B")
        shape = tuple(take(f"<{rank}I")) if rank else ()
        (dtype_code,) = take("<B")
        if dtype_code != DTYPE_F32:
            raise CheckpointError(f"unknown dtype code {dtype_code} for {name!r}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 4 * n
        if offset + nbytes > len(body):
            raise CheckpointError(f"truncated checkpoint: {path}")
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += nbytes
        if name in entries:
            raise CheckpointError(f"duplicate tensor name {name!r}: {path}")
        entries[name] = torch.from_numpy(arr.copy())
    if offset != len(body):
        raise CheckpointError(f"trailing bytes after last tensor: {path}")
    return ParamStore(entries)


def grad_check(
    f: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    params: ParamStore | Mapping[str, torch.Tensor],
    h: float = 1e-3,
    num_coords: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``f`` maps a name -> tensor dict to a scalar. The check evaluates in
    float64 (parameters upcast from their stored values) so the difference
    quotient at step ``h`` is not drowned by rounding noise; the relative
    error per sampled coordinate is |g_fd - g| / max(|g_fd|, |g|, 1e-8).
    """
    source = dict(params.items()) if isinstance(params, ParamStore) else dict(params)
    work = {
        name: t.detach().double().clone().requires_grad_(True)
        for name, t in sorted(source.items())
    }
    loss = f(work)
    if not torch.isfinite(loss):
        raise ValueError(f"function value is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, list(work.values()), allow_unused=True)
    analytic = {
        name: (g if g is not None else torch.zeros_like(t))
        for (name, t), g in zip(work.items(), grads)
    }

    flat_sizes = [(name, t.numel()) for name, t in work.items()]
    total = sum(n for _, n in flat_sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(num_coords, total), replace=False)

    worst = 0.0
    with torch.no_grad():
        for flat in sorted(int(p) for p in picks):
            # locate (tensor, index) for the global flat coordinate
            for name, n in flat_sizes:
                if flat < n:
                    break
                flat -= n
            view = work[name].view(-1)
            original = view[flat].item()
            view[flat] = original + h
            f_plus = float(f(work))
            view[flat] = original - h
            f_minus = float(f(work))
            view[flat] = original
            g_fd = (f_plus - f_minus) / (2.0 * h)
            g = analytic[name].view(-1)[flat].item()
            rel = abs(g_fd - g) / max(abs(g_fd), abs(g), 1e-8)
            worst = max(worst, rel)
    return worst
