"""Spike-tensor file format, synthetic spike generation, dataset plumbing.

The ``.spkt`` container stores a dense binary spike tensor of shape
(batch, neuron, time): magic ``SPKT``, then three little-endian u32 header
words after a u32 version, then the payload with each (batch, neuron) row
bit-packed 8 steps per byte, LSB first (t ascending), rows in (b, n)
row-major order, last byte of each row zero-padded.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SPKT"
SPKT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class SpktFormatError(ValueError):
    """Malformed .spkt data; ``offset`` points at the offending byte."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def write_spkt(tensor) -> bytes:
    """Serialize a binary (B, N, T) tensor to bytes."""
    tensor = np.asarray(tensor)
    if tensor.ndim != 3:
        raise ValueError("spike tensor must have shape (batch, neuron, time)")
    if not np.isin(tensor, (0, 1)).all():
        raise ValueError("spike tensor must be binary")
    B, N, T = tensor.shape
    header = _HEADER.pack(MAGIC, SPKT_VERSION, B, N, T)
    bits = tensor.astype(np.uint8).reshape(B * N, T)
    payload = np.packbits(bits, axis=-1, bitorder="little")
    return header + payload.tobytes()


def read_spkt(data: bytes) -> np.ndarray:
    """Parse bytes produced by :func:`write_spkt`. Exact inverse."""
    if len(data) < _HEADER.size:
        raise SpktFormatError("truncated header", len(data))
    magic, version, B, N, T = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SpktFormatError(f"bad magic {magic!r}", 0)
    if version != SPKT_VERSION:
        raise SpktFormatError(f"unsupported version {version}", 4)
    row_bytes = (T + 7) // 8
    expected = B * N * row_bytes
    if len(data) - _HEADER.size != expected:
        raise SpktFormatError(
            f"payload has {len(data) - _HEADER.size} bytes, expected {expected}",
            _HEADER.size + min(len(data) - _HEADER.size, expected),
        )
    payload = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    if T == 0:
        return np.zeros((B, N, 0), dtype=np.uint8)
    rows = np.unpackbits(payload.reshape(B * N, row_bytes), axis=-1, bitorder="little")
    return rows[:, :T].reshape(B, N, T)


def save_spkt(path, tensor) -> None:
    Path(path).write_bytes(write_spkt(tensor))


def load_spkt(path) -> np.ndarray:
    return read_spkt(Path(path).read_bytes())


@dataclass
class PoissonSpec:
    """Homogeneous Poisson spike tensor: one rate per batch row, sampled
    uniformly from [rate_min_hz, rate_max_hz]. One step is dt_ms of real
    time (1 ms by default)."""

    b: int
    n: int
    t: int
    rate_min_hz: float = 0.0
    rate_max_hz: float = 200.0
    dt_ms: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.b, self.n, self.t) < 1:
            raise ValueError("dims must be >= 1")
        if not 0 <= self.rate_min_hz <= self.rate_max_hz:
            raise ValueError("need 0 <= rate_min_hz <= rate_max_hz")
        if self.rate_max_hz * self.dt_ms / 1000.0 > 1.0:
            raise ValueError("rate * dt exceeds one spike per step")


def gen_poisson(spec: PoissonSpec) -> np.ndarray:
    """Generate a (B, N, T) uint8 spike tensor, reproducible by seed."""
    rng = np.random.default_rng(spec.seed)
    rates = rng.uniform(spec.rate_min_hz, spec.rate_max_hz, size=spec.b)
    p = rates * spec.dt_ms / 1000.0
    u = rng.random((spec.b, spec.n, spec.t))
    return (u < p[:, None, None]).astype(np.uint8)


def gen_two_rate_dataset(
    out_dir,
    n_samples,
    n_neurons,
    t_steps,
    rates_hz=(20.0, 100.0),
    dt_ms=1.0,
    seed=0,
):
    """Write a labeled two-class dataset: class k rows spike at rates_hz[k].

    Produces ``sample_....spkt`` files plus ``labels.csv`` in the layout
    that :func:`load_label_dataset` reads. Returns the list of pairs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    pairs = []
    for k in range(n_samples):
        label = int(rng.integers(0, len(rates_hz)))
        rate = rates_hz[label]
        spec = PoissonSpec(
            b=1, n=n_neurons, t=t_steps,
            rate_min_hz=rate, rate_max_hz=rate,
            dt_ms=dt_ms, seed=int(rng.integers(0, 2**31 - 1)),
        )
        tensor = gen_poisson(spec)
        name = f"sample_{k:05d}.spkt"
        save_spkt(out_dir / name, tensor)
        rows.append((name, label))
        pairs.append((tensor, label))
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        writer.writerows(rows)
    return pairs


def load_label_dataset(directory):
    """Read (tensor, label) pairs listed in labels.csv, in lexicographic
    filename order."""
    directory = Path(directory)
    labels_path = directory / "labels.csv"
    if not labels_path.exists():
        raise SpktFormatError(f"missing labels.csv in {directory}", 0)
    labels = {}
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["filename", "label"]:
            raise SpktFormatError("labels.csv must start with 'filename,label'", 0)
        for row in reader:
            if len(row) < 2:
                raise SpktFormatError(f"short row in labels.csv: {row!r}", 0)
            labels[row[0]] = int(row[1])
    pairs = []
    for name in sorted(labels):
        path = directory / name
        if not path.exists():
            raise SpktFormatError(f"labels.csv references missing file {name}", 0)
        pairs.append((load_spkt(path), labels[name]))
    return pairs
