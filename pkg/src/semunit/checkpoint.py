"""Versioned checkpoint files: a text header followed by raw float32 arrays.

Layout::

    semunit-ckpt 1
    meta {"config": {...}, "step": 120, ...}
    array <name> <d0>x<d1>...
    ...
    end
    <little-endian float32 data of every array, in header order>
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = "semunit-ckpt 1"
OPTIM_PREFIX = "optim."


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith(OPTIM_PREFIX)}

    def optim(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith(OPTIM_PREFIX)}


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    lines = [MAGIC, "meta " + json.dumps(ckpt.meta, sort_keys=True)]
    blobs = []
    for name, arr in ckpt.arrays.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"bad array name {name!r}")
        a = np.ascontiguousarray(arr, dtype="<f4")
        shape = "x".join(str(s) for s in a.shape) if a.ndim else "-"
        lines.append(f"array {name} {shape}")
        blobs.append(a.tobytes())
    lines.append("end")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    pos = 0
    header = []
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = data[pos:nl].decode("utf-8")
        pos = nl + 1
        if line == "end":
            break
        header.append(line)
    if not header or header[0] != MAGIC:
        raise CheckpointError(f"{path}: not a {MAGIC!r} file")
    meta = {}
    specs = []
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "array":
            name, shape = rest.split(" ")
            dims = () if shape == "-" else tuple(int(s) for s in shape.split("x"))
            specs.append((name, dims))
        else:
            raise CheckpointError(f"{path}: unknown header line {line!r}")
    arrays = {}
    for name, dims in specs:
        n = int(np.prod(dims, dtype=np.int64))
        end = pos + 4 * n
        if end > len(data):
            raise CheckpointError(f"{path}: truncated data for {name}")
        arrays[name] = np.frombuffer(data[pos:end], dtype="<f4").reshape(dims).astype(np.float32)
        pos = end
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return Checkpoint(meta, arrays)


def average_checkpoints(paths: Sequence[str | Path | Checkpoint]) -> Checkpoint:
    """Arithmetic mean of every model parameter; optimizer state is dropped.

    Accepts file paths or loaded checkpoints. Metadata (config, step) is
    taken from the last one.
    """
    if not paths:
        raise CheckpointError("no checkpoints to average")
    ckpts = [p if isinstance(p, Checkpoint) else load_checkpoint(p) for p in paths]
    ref = ckpts[-1]
    names = list(ref.params())
    for c in ckpts:
        if c.meta.get("config") != ref.meta.get("config"):
            raise CheckpointError("checkpoint configs differ")
        params = c.params()
        if list(params) != names:
            raise CheckpointError("checkpoint parameter names differ")
        for k in names:
            if params[k].shape != ref.arrays[k].shape:
                raise CheckpointError(f"checkpoint shapes of {k} differ")
    out = {}
    for k in names:
        # sorting first makes the float64 sum independent of checkpoint order
        stack = np.sort(np.stack([c.arrays[k].astype(np.float64) for c in ckpts]), axis=0)
        out[k] = (stack.sum(axis=0) / len(ckpts)).astype(np.float32)
    meta = dict(ref.meta)
    meta["averaged"] = len(ckpts)
    return Checkpoint(meta, out)
