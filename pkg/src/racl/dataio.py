"""Datasets, configuration files and serialization.

Everything a run reads or writes goes through here: the synthetic blob
generator and the IDX reader, TOML-style configs, genotype JSON, history and
result CSVs, and versioned ``.npz`` checkpoints.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .supernet import Genotype

__all__ = [
    "FormatError",
    "SchemaError",
    "DatasetSpec",
    "Dataset",
    "gen_synthetic",
    "load_dataset",
    "split_halves",
    "read_idx",
    "write_idx",
    "load_toml",
    "dump_toml",
    "config_from_dict",
    "load_config",
    "save_config",
    "genotype_to_dict",
    "genotype_from_dict",
    "save_genotype",
    "load_genotype",
    "HISTORY_COLUMNS",
    "RESULT_COLUMNS",
    "write_csv",
    "read_csv",
    "CHECKPOINT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "rng_state",
    "rng_from_state",
]


class FormatError(ValueError):
    """Malformed binary input."""


class SchemaError(ValueError):
    """Serialized object is missing required fields."""


# ----------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    D: int = 16
    M: int = 8
    n_train: int = 2048
    n_test: int = 1024
    seed: int = 0
    class_separation: float = 4.0
    path: str = ""


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]


def gen_synthetic(spec: DatasetSpec) -> Dataset:
    """Gaussian blobs around scaled unit directions, mapped into [0, 1]^D.

    Each split holds exactly ``n / M`` points per class. The map to the unit
    box is one global affine transform, so class geometry is preserved.
    """
    if spec.M < 2:
        raise ValueError("need at least two classes")
    for n in (spec.n_train, spec.n_test):
        if n % spec.M:
            raise ValueError(f"split size {n} is not a multiple of {spec.M} classes")
    rng = np.random.default_rng(spec.seed)
    dirs = rng.standard_normal((spec.M, spec.D))
    means = spec.class_separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def draw(n):
        y = np.repeat(np.arange(spec.M), n // spec.M)
        x = means[y] + rng.standard_normal((n, spec.D))
        perm = rng.permutation(n)
        return x[perm], y[perm]

    xtr, ytr = draw(spec.n_train)
    xte, yte = draw(spec.n_test)
    lo = min(xtr.min(), xte.min())
    hi = max(xtr.max(), xte.max())
    scale = 1.0 / (hi - lo)
    return Dataset((xtr - lo) * scale, ytr, (xte - lo) * scale, yte, spec.M)


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "synthetic":
        return gen_synthetic(spec)
    if spec.kind == "mnist-idx":
        root = Path(spec.path)
        xtr = read_idx(root / "train-images-idx3-ubyte")
        ytr = read_idx(root / "train-labels-idx1-ubyte")
        xte = read_idx(root / "t10k-images-idx3-ubyte")
        yte = read_idx(root / "t10k-labels-idx1-ubyte")
        take = lambda x, n: x[:n] if n else x
        return Dataset(
            take(xtr.reshape(len(xtr), -1), spec.n_train), take(ytr.astype(int), spec.n_train),
            take(xte.reshape(len(xte), -1), spec.n_test), take(yte.astype(int), spec.n_test), 10,
        )
    raise ValueError(f"unknown dataset kind {spec.kind!r}")


def split_halves(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, exhaustive halves of ``range(n)`` (weight half, arch half)."""
    perm = np.random.default_rng([seed, 7]).permutation(n)
    return np.sort(perm[: n // 2]), np.sort(perm[n // 2:])


_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def read_idx(path, scale: bool | None = None) -> np.ndarray:
    """Parse a big-endian IDX file.

    Unsigned-byte payloads of rank >= 2 (images) are scaled to [0, 1] unless
    ``scale`` says otherwise; label files stay integral.

    Raises:
        FormatError: on a bad magic number, zero rank or truncation.
    """
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(data)}")
    if data[0] != 0 or data[1] != 0:
        raise FormatError(f"{path}: bad magic at byte offset 0 (expected two zero bytes)")
    code, rank = data[2], data[3]
    if code not in _IDX_TYPES:
        raise FormatError(f"{path}: unknown dtype code 0x{code:02x} at byte offset 2")
    if rank == 0:
        raise FormatError(f"{path}: zero-dimensional IDX file (rank byte at offset 3)")
    header = 4 + 4 * rank
    if len(data) < header:
        raise FormatError(f"{path}: truncated dimension list at byte offset {len(data)}")
    dims = struct.unpack(f">{rank}I", data[4:header])
    dtype = _IDX_TYPES[code]
    need = header + int(np.prod(dims)) * dtype.itemsize
    if len(data) < need:
        raise FormatError(f"{path}: payload truncated at byte offset {len(data)} (expected {need} bytes)")
    arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)
    if scale is None:
        scale = code == 0x08 and rank >= 2
    if scale:
        return arr.astype(np.float64) / 255.0
    return arr.astype(dtype.newbyteorder("="))


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    key = arr.dtype.newbyteorder("=")
    if key not in _IDX_CODES:
        raise FormatError(f"dtype {arr.dtype} has no IDX code")
    code = _IDX_CODES[key]
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.astype(_IDX_TYPES[code]).tobytes())


# ----------------------------------------------------------------------
# config files


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to a config file")


def dump_toml(data: dict) -> str:
    lines = [f"{k} = {_toml_value(v)}" for k, v in data.items() if v is not None]
    return "\n".join(lines) + "\n"


def config_from_dict(cls, data: dict, source: str = "config"):
    """Build dataclass ``cls`` from ``data``; unknown keys only warn."""
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        warnings.warn(f"{source}: ignoring unknown keys {unknown}", stacklevel=2)
    kwargs = {}
    for k, v in data.items():
        if k not in names:
            continue
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def load_config(path, cls):
    return config_from_dict(cls, load_toml(path), source=str(path))


def save_config(path, config) -> None:
    Path(path).write_text(dump_toml(dataclasses.asdict(config)), encoding="utf-8")


# ----------------------------------------------------------------------
# genotypes


def genotype_to_dict(g: Genotype) -> dict:
    flat = lambda table: [[p, op] for pairs in table for p, op in pairs]
    meta = dict(g.meta)
    return {
        "normal": flat(g.normal),
        "reduce": flat(g.reduce),
        "widths": meta.pop("widths", {}),
        "meta": meta,
    }


def genotype_from_dict(d: dict) -> Genotype:
    missing = [k for k in ("normal", "reduce", "meta") if k not in d]
    if missing:
        raise SchemaError(f"genotype is missing keys {missing}")

    def nest(flat):
        if len(flat) % 2:
            raise SchemaError("genotype tables need two entries per node")
        pairs = [(int(p), str(op)) for p, op in flat]
        return tuple(tuple(pairs[n: n + 2]) for n in range(0, len(pairs), 2))

    meta = dict(d["meta"])
    meta["widths"] = d.get("widths", {})
    return Genotype(nest(d["normal"]), nest(d["reduce"]), meta=meta)


def save_genotype(path, g: Genotype) -> None:
    Path(path).write_text(json.dumps(genotype_to_dict(g), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_genotype(path) -> Genotype:
    return genotype_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ----------------------------------------------------------------------
# CSV

HISTORY_COLUMNS = ("epoch", "ce", "c", "theta", "mu", "var", "prob_bound_le_lambda")
RESULT_COLUMNS = ("attack", "epsilon", "steps", "seed", "clean_acc", "adv_acc")


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])


def read_csv(path, columns: Sequence[str] | None = None) -> list[dict]:
    """Rows as dicts; numeric-looking fields are converted back."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if columns is not None:
            missing = [c for c in columns if c not in (reader.fieldnames or [])]
            if missing:
                raise SchemaError(f"{path}: missing columns {missing}")
        rows = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                row[k] = _parse(v)
            rows.append(row)
    return rows


def _parse(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


# ----------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1
_REQUIRED_META = ("version", "kind", "epoch")


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``arrays`` and a JSON ``meta`` block into one ``.npz`` file."""
    meta = {"version": CHECKPOINT_VERSION, **meta}
    missing = [k for k in _REQUIRED_META if k not in meta]
    if missing:
        raise SchemaError(f"checkpoint meta is missing keys {missing}")
    payload = {f"a/{k}": np.asarray(v) for k, v in arrays.items()}
    payload["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)


def load_checkpoint(path, required: Sequence[str] = ()) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_checkpoint`.

    Raises:
        SchemaError: on an unknown version or missing meta/array keys.
    """
    with np.load(path, allow_pickle=False) as z:
        if "meta" not in z.files:
            raise SchemaError(f"{path}: no meta block")
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        arrays = {k[2:]: z[k] for k in z.files if k.startswith("a/")}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    missing = [k for k in _REQUIRED_META if k not in meta] + [k for k in required if k not in arrays]
    if missing:
        raise SchemaError(f"{path}: missing keys {missing}")
    return arrays, meta
