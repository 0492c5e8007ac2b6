"""Depolarizing noise sampling and the binary dataset format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from toricmoe.lattice import ToricCode, build_toric_code, logical_effect, syndrome_of

MAGIC = b"TQDS"
FORMAT_VERSION = 1
# magic, version, L, n, m, k, n_rates, count, master seed
_HEADER = struct.Struct("<4sHHIIIIQQ")


@dataclass(frozen=True)
class DepolarizingChannel:
    """Independent depolarizing noise: X, Y, Z each with probability p/3."""

    p: float

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"error rate must lie in [0, 1), got {self.p}")


def record_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for record ``index`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def sample_error(ch: DepolarizingChannel, code: ToricCode, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw a ``(z | x)`` depolarizing error, or ``size`` of them stacked."""
    shape = (code.n,) if size is None else (size, code.n)
    u = rng.random(shape)
    third = ch.p / 3.0
    x_part = u < 2 * third  # X or Y
    z_part = (u >= third) & (u < ch.p)  # Y or Z
    return np.concatenate([z_part, x_part], axis=-1).astype(np.uint8)


@dataclass
class Dataset:
    """Labelled decoding samples for one code.

    ``p_index[i]`` points into ``p_list``; ``seed_id[i]`` is the record index
    fed to :func:`record_rng` together with ``seed``.
    """

    L: int
    p_list: np.ndarray
    seed: int
    p_index: np.ndarray
    seed_id: np.ndarray
    syndromes: np.ndarray
    errors: np.ndarray
    logicals: np.ndarray

    def __len__(self) -> int:
        return len(self.seed_id)

    @property
    def p(self) -> np.ndarray:
        return self.p_list[self.p_index]

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.L, self.p_list, self.seed, self.p_index[idx], self.seed_id[idx],
            self.syndromes[idx], self.errors[idx], self.logicals[idx],
        )

    def validate(self, code: ToricCode | None = None) -> None:
        code = code or build_toric_code(self.L)
        if not np.array_equal(syndrome_of(code, self.errors), self.syndromes):
            bad = np.flatnonzero((syndrome_of(code, self.errors) != self.syndromes).any(axis=1))
            raise ValueError(f"syndrome mismatch in {len(bad)} records (first: {bad[0]})")
        if not np.array_equal(logical_effect(code, self.errors), self.logicals):
            bad = np.flatnonzero((logical_effect(code, self.errors) != self.logicals).any(axis=1))
            raise ValueError(f"logical label mismatch in {len(bad)} records (first: {bad[0]})")

    def summary(self) -> str:
        counts = np.bincount(self.p_index, minlength=len(self.p_list))
        lines = [f"L={self.L} records={len(self)} seed={self.seed}", "p\tcount"]
        lines += [f"{p:.6g}\t{c}" for p, c in zip(self.p_list, counts)]
        return "\n".join(lines) + "\n"


def generate_dataset(code: ToricCode, p_list, count_per_rate: int, seed: int, start: int = 0) -> Dataset:
    """Stratified dataset; rates are interleaved round-robin (record i uses p_list[i % len])."""
    p_list = np.asarray(p_list, dtype=np.float64)
    if p_list.ndim != 1 or len(p_list) == 0:
        raise ValueError("p_list must be a nonempty list of rates")
    if count_per_rate < 1:
        raise ValueError(f"count_per_rate must be >= 1, got {count_per_rate}")
    channels = [DepolarizingChannel(float(p)) for p in p_list]
    total = count_per_rate * len(p_list)
    seed_id = np.arange(start, start + total, dtype=np.uint64)
    p_index = (np.arange(total) % len(p_list)).astype(np.uint16)
    errors = np.empty((total, 2 * code.n), dtype=np.uint8)
    for i in range(total):
        errors[i] = sample_error(channels[p_index[i]], code, record_rng(seed, int(seed_id[i])))
    return Dataset(
        code.L, p_list, int(seed), p_index, seed_id,
        syndrome_of(code, errors), errors, logical_effect(code, errors),
    )


def _record_dtype(n: int, m: int, k: int) -> np.dtype:
    return np.dtype([
        ("p_index", "<u2"),
        ("seed_id", "<u8"),
        ("syndrome", "u1", ((m + 7) // 8,)),
        ("error", "u1", ((2 * n + 7) // 8,)),
        ("logical", "u1", ((2 * k + 7) // 8,)),
    ])


def dataset_bytes(ds: Dataset) -> bytes:
    code_n, code_m, code_k = 2 * ds.L * ds.L, 2 * ds.L * ds.L, ds.logicals.shape[1] // 2
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, ds.L, code_n, code_m, code_k, len(ds.p_list), len(ds), ds.seed)
    rates = np.asarray(ds.p_list, dtype="<f8").tobytes()
    rec = np.zeros(len(ds), dtype=_record_dtype(code_n, code_m, code_k))
    rec["p_index"] = ds.p_index
    rec["seed_id"] = ds.seed_id
    rec["syndrome"] = np.packbits(ds.syndromes, axis=1, bitorder="little")
    rec["error"] = np.packbits(ds.errors, axis=1, bitorder="little")
    rec["logical"] = np.packbits(ds.logicals, axis=1, bitorder="little")
    return header + rates + rec.tobytes()


def write_dataset(ds: Dataset, path: str | Path, config: dict | None = None) -> str:
    """Write ``ds`` plus a ``.summary.txt`` companion; returns the sha256 of the file.

    ``config`` (e.g. the resolved command line) is echoed into the summary.
    """
    path = Path(path)
    blob = dataset_bytes(ds)
    summary = ds.summary()
    if config is not None:
        summary = "# config " + json.dumps(config, sort_keys=True, default=str) + "\n" + summary
    try:
        path.write_bytes(blob)
        path.with_suffix(path.suffix + ".summary.txt").write_text(summary)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc
    return hashlib.sha256(blob).hexdigest()


def read_dataset(path: str | Path, validate: bool = True) -> Dataset:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    if len(blob) < _HEADER.size or blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    magic, version, L, n, m, k, n_rates, count, seed = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = _HEADER.size
    p_list = np.frombuffer(blob, dtype="<f8", count=n_rates, offset=off).copy()
    off += 8 * n_rates
    dtype = _record_dtype(n, m, k)
    if len(blob) - off != count * dtype.itemsize:
        raise ValueError(f"{path}: header declares {count} records but payload holds "
                         f"{(len(blob) - off) / dtype.itemsize:g}")
    rec = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
    ds = Dataset(
        L, p_list, seed,
        rec["p_index"].copy(), rec["seed_id"].copy(),
        np.unpackbits(rec["syndrome"], axis=1, count=m, bitorder="little"),
        np.unpackbits(rec["error"], axis=1, count=2 * n, bitorder="little"),
        np.unpackbits(rec["logical"], axis=1, count=2 * k, bitorder="little"),
    )
    if validate:
        ds.validate()
    return ds


def rate_grid(lo: float = 0.05, hi: float = 0.2, count: int = 9) -> np.ndarray:
    return np.linspace(lo, hi, count)
