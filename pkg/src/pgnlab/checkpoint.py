"""Binary checkpoint format.

Layout::

    b"PGNCKPT1"                      8-byte magic
    uint64 little-endian             header length in bytes
    UTF-8 JSON header                config, vocab hash, seed, step, manifest, extra
    float64 little-endian arrays     in manifest order

Each manifest entry is ``{"name", "shape", "offset"}`` with ``offset`` counted
in bytes from the start of the array section. Optimiser moments are stored
as ordinary entries under ``adam.m.<name>`` / ``adam.v.<name>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autograd import Tensor
from .optim import AdamState
from .transformer import ModelConfig

MAGIC = b"PGNCKPT1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab_hash: str = ""
    seed: int = 0
    step: int = 0
    adam: Optional[AdamState] = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor], *, vocab_hash: str = "",
                    seed: int = 0, step: int = 0, adam: Optional[AdamState] = None,
                    extra: Optional[dict] = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(k, p.data) for k, p in params.items()]
    adam_meta = None
    if adam is not None:
        adam_meta = {"step": adam.step, "learning_rate": adam.learning_rate, "beta1": adam.beta1,
                     "beta2": adam.beta2, "epsilon": adam.epsilon}
        arrays += [(f"adam.m.{k}", v) for k, v in adam.m.items()]
        arrays += [(f"adam.v.{k}", v) for k, v in adam.v.items()]
    manifest, offset = [], 0
    for name, arr in arrays:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "config": config.to_dict(), "vocab_hash": vocab_hash, "seed": seed, "step": step,
        "adam": adam_meta, "manifest": manifest, "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    body = memoryview(raw)[16 + hlen:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 8 * n > len(body):
            raise CheckpointError(f"{path}: array {entry['name']!r} runs past end of file")
        arr = np.frombuffer(body[start:start + 8 * n], dtype="<f8").astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    adam = None
    if header.get("adam"):
        meta = header["adam"]
        adam = AdamState(learning_rate=meta["learning_rate"], beta1=meta["beta1"],
                         beta2=meta["beta2"], epsilon=meta["epsilon"], step=meta["step"])
        for name in list(arrays):
            if name.startswith("adam.m."):
                adam.m[name[7:]] = arrays.pop(name)
            elif name.startswith("adam.v."):
                adam.v[name[7:]] = arrays.pop(name)
    return Checkpoint(config=ModelConfig.from_dict(header["config"]), params=arrays,
                      vocab_hash=header.get("vocab_hash", ""), seed=header.get("seed", 0),
                      step=header.get("step", 0), adam=adam, extra=header.get("extra", {}))


def params_to_tensors(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
