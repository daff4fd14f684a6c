"""Reproducible weight generation and the on-disk tensor store.

Random weights come from a xorshift64* generator so that identical seeds give
identical tensors on every platform:

    x ^= x >> 12;  x ^= x << 25;  x ^= x >> 27
    output = (x * 2685821657736338717) mod 2**64

Uniform doubles take the top 53 output bits: u = (output >> 11) * 2**-53.

Tensor files are a pair: a JSON manifest listing {name, shape, offset, count}
per tensor plus a little-endian float32 blob. The manifest's ``blob`` field
names the binary file, resolved relative to the manifest.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_MASK64 = (1 << 64) - 1
_MULT = 2685821657736338717
_SEED_PAD = 0x9E3779B97F4A7C15  # substituted when the seed maps to the forbidden zero state


class Xorshift64Star:
    """Deterministic 64-bit xorshift* generator (see module docstring)."""

    def __init__(self, seed: int):
        state = seed & _MASK64
        if state == 0:
            state = _SEED_PAD
        self._state = state

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self._state = x
        return (x * _MULT) & _MASK64

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray | float:
        """Uniform doubles in [low, high) drawn one at a time from the stream."""
        if size is None:
            u = (self.next_u64() >> 11) * 2.0 ** -53
            return low + (high - low) * u
        n = int(np.prod(size))
        vals = np.array([(self.next_u64() >> 11) * 2.0 ** -53 for _ in range(n)])
        return (low + (high - low) * vals).reshape(size)

    def matrix(self, rows: int, cols: int) -> np.ndarray:
        """Dense init with scale 1/sqrt(fan_in)."""
        bound = 1.0 / np.sqrt(cols)
        return self.uniform(-bound, bound, size=(rows, cols))

    def vector(self, n: int, bound: float | None = None) -> np.ndarray:
        if bound is None:
            bound = 1.0 / np.sqrt(n)
        return self.uniform(-bound, bound, size=(n,))


def save_tensors(manifest_path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write a weight manifest plus float32 blob next to it."""
    manifest_path = Path(manifest_path)
    blob_name = manifest_path.stem + ".bin"
    entries = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({
            "name": name,
            "shape": list(data.shape),
            "offset": offset,
            "count": int(data.size),
        })
        chunks.append(data.tobytes())
        offset += data.size * 4
    manifest = {"format": "vecmap-weights", "version": 1, "blob": blob_name, "tensors": entries}
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    (manifest_path.parent / blob_name).write_bytes(b"".join(chunks))


def load_tensors(manifest_path: str | Path) -> dict[str, np.ndarray]:
    """Read a weight manifest; tensors come back as float64 arrays."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != "vecmap-weights":
        raise ValueError(f"{manifest_path}: not a weight manifest")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    out: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        count = entry["count"]
        raw = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        out[entry["name"]] = raw.astype(np.float64).reshape(entry["shape"])
    return out
