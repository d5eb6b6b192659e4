"""Checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic b"LRFLOWCK"
    bytes 8..11   uint32 format version (1)
    bytes 12..15  uint32 header length H
    next H bytes  UTF-8 JSON header
    rest          tensor payload, float32 little-endian, C order

The header holds ``model_config`` (echo of :class:`ModelConfig`),
``step``, ``seed`` and ``tensors``: a list of ``{"name", "shape",
"offset", "nbytes"}`` entries addressing the payload. Model weights use
their module names; Adam moments are stored as extra tensors named
``optim.exp_avg/<param>`` and ``optim.exp_avg_sq/<param>``, with per-tensor
step counts under ``header["optimizer"]["steps"]``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import FormatError, TruncationError
from .model import ModelConfig

MAGIC = b"LRFLOWCK"
VERSION = 1
EXP_AVG = "optim.exp_avg/"
EXP_AVG_SQ = "optim.exp_avg_sq/"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    optimizer: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def save(self, path) -> Path:
        tensors = dict(self.params)
        steps = {}
        for name, state in self.optimizer.items():
            tensors[EXP_AVG + name] = state["exp_avg"]
            tensors[EXP_AVG_SQ + name] = state["exp_avg_sq"]
            steps[name] = int(state["step"])
        table, chunks, offset = [], [], 0
        for name, value in tensors.items():
            data = np.ascontiguousarray(value, dtype="<f4").tobytes()
            table.append({"name": name, "shape": list(np.shape(value)), "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
        header = {
            "model_config": self.model_config.to_dict(),
            "step": int(self.step),
            "seed": int(self.seed),
            "optimizer": {"type": "adam", "steps": steps},
            "extra": self.extra,
            "tensors": table,
        }
        blob = json.dumps(header, sort_keys=True).encode()
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)
            for chunk in chunks:
                fh.write(chunk)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        if len(raw) < 16:
            raise TruncationError(f"{path}: header truncated")
        version, hlen = struct.unpack("<II", raw[8:16])
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(raw[16:16 + hlen].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: malformed header: {exc}") from None
        payload = raw[16 + hlen:]
        tensors = {}
        for entry in header["tensors"]:
            start, size = entry["offset"], entry["nbytes"]
            if start + size > len(payload):
                raise TruncationError(
                    f"{path}: tensor {entry['name']} needs bytes up to {start + size}, payload has {len(payload)}"
                )
            tensors[entry["name"]] = (
                np.frombuffer(payload[start:start + size], dtype="<f4").astype(np.float32).reshape(entry["shape"])
            )
        optimizer = {}
        for name, step in header["optimizer"]["steps"].items():
            optimizer[name] = {
                "exp_avg": tensors.pop(EXP_AVG + name),
                "exp_avg_sq": tensors.pop(EXP_AVG_SQ + name),
                "step": step,
            }
        return cls(
            model_config=ModelConfig(**header["model_config"]),
            params=tensors,
            step=header["step"],
            seed=header["seed"],
            optimizer=optimizer,
            extra=header.get("extra", {}),
        )
