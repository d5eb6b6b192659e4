"""Synthetic chirp datasets, IQ file I/O and the fine-tuning mixture sampler.

IQ dataset files come in pairs::

    capture.iq        raw payload: count * 2**sf complex samples stored as
                      interleaved little-endian float32 (I0, Q0, I1, Q1, ...)
    capture.iq.json   sidecar: {"version": 1, "sf": 7, "bw": 125000.0,
                                "direction": "up", "count": 256,
                                "labels": [0, 1, ...]}

One file holds a single (sf, bw, direction) configuration.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .exceptions import FormatError, ParameterError, TruncationError
from .modem import SF_MAX, SF_MIN, LoRaParams, modulate_symbol

FORMAT_VERSION = 1
DATA_DIR_ENV = "LORAFLOW_DATA_DIR"


@dataclass
class SampleRecord:
    iq: np.ndarray
    label: int
    sf: int
    direction: str = "up"
    source: str = "synthetic"

    def __post_init__(self):
        n = 1 << self.sf
        if self.iq.shape != (n,):
            raise ParameterError(f"iq must have shape ({n},), got {self.iq.shape}")
        if not 0 <= self.label < n:
            raise ParameterError(f"label {self.label} out of range for sf={self.sf}")
        if self.source not in ("synthetic", "real"):
            raise ParameterError(f"unknown source {self.source!r}")

    @property
    def key(self) -> tuple:
        return (self.sf, self.direction, self.label)


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "."))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def generate_synthetic(sf_set: Iterable[int], bw: float = 125_000.0,
                       directions: Sequence[str] = ("up", "down")) -> list[SampleRecord]:
    """One clean record per symbol for every (sf, direction)."""
    records = []
    for sf in sorted(set(sf_set)):
        if not SF_MIN <= sf <= SF_MAX:
            raise ParameterError(f"sf {sf} outside [{SF_MIN}, {SF_MAX}]")
        for direction in directions:
            params = LoRaParams(sf, bw, direction)
            chirps = modulate_symbol(params, np.arange(params.n_samples))
            records.extend(
                SampleRecord(chirps[m], m, sf, direction, "synthetic") for m in range(params.n_samples)
            )
    return records


def save_dataset(records: Sequence[SampleRecord], path, bw: float = 125_000.0) -> Path:
    """Write records sharing one (sf, direction) to ``path`` and its sidecar."""
    if not records:
        raise ParameterError("nothing to save")
    configs = {(r.sf, r.direction) for r in records}
    if len(configs) != 1:
        raise ParameterError(f"records mix configurations {sorted(configs)}; save one file per (sf, direction)")
    (sf, direction), = configs
    path = Path(path)
    payload = np.stack([r.iq for r in records]).astype(np.complex64)
    interleaved = payload.view(np.float32).astype("<f4")
    path.write_bytes(interleaved.tobytes())
    header = {
        "version": FORMAT_VERSION,
        "sf": sf,
        "bw": float(bw),
        "direction": direction,
        "count": len(records),
        "labels": [int(r.label) for r in records],
    }
    sidecar_path(path).write_text(json.dumps(header, indent=1))
    return path


def read_header(path) -> dict:
    side = sidecar_path(path)
    try:
        header = json.loads(side.read_text())
    except FileNotFoundError:
        raise FormatError(f"missing sidecar {side}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed header {side}: {exc}") from None
    required = {"version": int, "sf": int, "bw": (int, float), "direction": str, "count": int, "labels": list}
    if not isinstance(header, dict):
        raise FormatError(f"malformed header {side}: expected an object")
    for key, kind in required.items():
        if key not in header or not isinstance(header[key], kind):
            raise FormatError(f"malformed header {side}: field {key!r} missing or wrong type")
    if header["version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported version {header['version']} in {side}")
    if header["direction"] not in ("up", "down") or not SF_MIN <= header["sf"] <= SF_MAX:
        raise FormatError(f"malformed header {side}: bad sf/direction")
    if len(header["labels"]) != header["count"]:
        raise FormatError(f"header {side}: {len(header['labels'])} labels for count {header['count']}")
    return header


def read_iq_file(path, source: str = "real") -> list[SampleRecord]:
    """Load an IQ dataset file exactly as stored (no normalization)."""
    path = Path(path)
    header = read_header(path)
    sf, count = header["sf"], header["count"]
    n = 1 << sf
    expected = count * n * 2 * 4
    raw = path.read_bytes()
    if len(raw) < expected:
        raise TruncationError(f"{path}: payload truncated, expected {expected} bytes, got {len(raw)}")
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload has {len(raw)} bytes but header (sf={sf}, count={count}) implies {expected}"
        )
    labels = np.asarray(header["labels"])
    bad = np.flatnonzero((labels < 0) | (labels >= n))
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} at index {bad[0]} out of range [0, {n})")
    iq = np.frombuffer(raw, dtype="<f4").astype(np.float32).view(np.complex64).reshape(count, n)
    return [
        SampleRecord(iq[i].astype(np.complex128), int(labels[i]), sf, header["direction"], source)
        for i in range(count)
    ]


def load_real(path, normalize: bool = True) -> list[SampleRecord]:
    """Load captured symbols tagged ``source="real"``, scaled to unit average power."""
    records = read_iq_file(path, source="real")
    if normalize:
        for r in records:
            power = np.mean(np.abs(r.iq) ** 2)
            if power > 0:
                r.iq = r.iq / np.sqrt(power)
    return records


def select_one_shot(records: Sequence[SampleRecord], seed=0) -> tuple[list[SampleRecord], list[int]]:
    """First record of each class after a seeded shuffle, plus the chosen indices."""
    order = np.random.default_rng(seed).permutation(len(records))
    chosen = {}
    for i in order:
        chosen.setdefault(records[i].key, int(i))
    return [records[i] for i in sorted(chosen.values())], sorted(chosen.values())


def write_manifest(path, records: Sequence[SampleRecord], indices: Sequence[int], source_file=None) -> None:
    entries = [
        {"index": int(i), "sf": r.sf, "direction": r.direction, "label": int(r.label)}
        for i, r in zip(indices, records)
    ]
    Path(path).write_text(json.dumps({"source": None if source_file is None else str(source_file),
                                      "selected": entries}, indent=1))


class MixtureSampler:
    """Endless seeded stream mixing real and synthetic records.

    Each draw picks a class uniformly over the synthetic classes. A class
    with real coverage is served from the real pool with probability
    ``p_real``; otherwise (and always for uncovered classes) the synthetic
    record is used.
    """

    def __init__(self, real: Sequence[SampleRecord], synth: Sequence[SampleRecord],
                 p_real: float = 0.95, seed=None):
        if not synth:
            raise ParameterError("synthetic set is empty")
        if not 0.0 <= p_real <= 1.0:
            raise ParameterError(f"p_real must be in [0, 1], got {p_real}")
        self.p_real = p_real
        self._seed = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
        self._rng = np.random.default_rng(self._seed)
        self._synth: dict[tuple, list[SampleRecord]] = {}
        for r in synth:
            self._synth.setdefault(r.key, []).append(r)
        self._real: dict[tuple, list[SampleRecord]] = {}
        for r in real:
            self._real.setdefault(r.key, []).append(r)
        self._classes = sorted(self._synth)

    def __iter__(self) -> Iterator[SampleRecord]:
        return self

    def __next__(self) -> SampleRecord:
        rng = self._rng
        key = self._classes[rng.integers(len(self._classes))]
        pool = self._real.get(key)
        if pool and rng.random() < self.p_real:
            return pool[rng.integers(len(pool))]
        pool = self._synth[key]
        return pool[rng.integers(len(pool))]

    def spawn(self, n: int) -> list["MixtureSampler"]:
        """Independent child streams for parallel workers."""
        real = [r for rs in self._real.values() for r in rs]
        synth = [r for rs in self._synth.values() for r in rs]
        return [MixtureSampler(real, synth, self.p_real, child) for child in self._seed.spawn(n)]


def mixture_sampler(real, synth, p_real: float = 0.95, seed=None) -> MixtureSampler:
    return MixtureSampler(real, synth, p_real, seed)
