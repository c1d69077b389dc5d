"""Sub-cube extraction, masking, and train/test dataset assembly."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EdgeTooLarge, EmptyInput, InvalidSplit, MissingLabels
from .voxel import CoreLabels, Volume3D

DEFAULT_EDGE = 10


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent, reproducible sub-stream for ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


# stream tags, so different consumers of one seed never share a sub-stream
TAG_SAMPLE, TAG_MASK, TAG_SPLIT = 1, 2, 3


@dataclass(frozen=True)
class SubCube:
    values: np.ndarray  # edge**3, flat in (z, y, x) order
    origin: tuple[int, int, int]  # (x, y, z)
    edge: int = DEFAULT_EDGE
    core_id: int = 0


@dataclass(frozen=True)
class MaskSpec:
    rate: float = 0.2
    mode: str = "voxel"
    mask_value: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"mask rate {self.rate} outside [0, 1]")
        if not 0.0 <= self.mask_value <= 1.0:
            raise ValueError(f"mask value {self.mask_value} outside [0, 1]")
        if self.mode not in ("voxel", "patch"):
            raise ValueError(f"unknown mask mode {self.mode!r}")

    def quota(self, n_voxels: int) -> int:
        # round half up; Python's round() would send 0.5 to even
        return int(np.floor(self.rate * n_voxels + 0.5))


@dataclass(frozen=True)
class MaskedSample:
    input: np.ndarray
    target: np.ndarray
    mask: np.ndarray  # sorted masked voxel indices


@dataclass(frozen=True)
class SupervisedSample:
    input: np.ndarray
    target: tuple[float, float]  # (porosity fraction, permeability mD)
    core_id: int


def _origins(volume: Volume3D, count: int, edge: int, rng: np.random.Generator) -> np.ndarray:
    nx, ny, nz = volume.dims
    if edge > min(nx, ny, nz):
        raise EdgeTooLarge(f"edge {edge} exceeds smallest volume extent {min(nx, ny, nz)}")
    if count < 0:
        raise ValueError("count must be >= 0")
    hi = np.array([nx - edge + 1, ny - edge + 1, nz - edge + 1])
    return rng.integers(0, hi, size=(count, 3))


def _extract(volume: Volume3D, origins: np.ndarray, edge: int) -> np.ndarray:
    windows = sliding_window_view(volume.data, (edge, edge, edge))
    cubes = windows[origins[:, 2], origins[:, 1], origins[:, 0]]
    return np.ascontiguousarray(cubes.reshape(len(origins), edge**3), dtype=np.float32)


def sample_subcubes(volume: Volume3D, count: int, edge: int = DEFAULT_EDGE, seed: int = 0,
                    core_id: int = 0) -> list[SubCube]:
    """Uniformly placed sub-cubes (with replacement), deterministic per seed."""
    origins = _origins(volume, count, edge, np.random.default_rng(seed))
    values = _extract(volume, origins, edge)
    return [SubCube(values[i], tuple(int(o) for o in origins[i]), edge, core_id)
            for i in range(count)]


def _patch_mask(edge: int, quota: int, rng: np.random.Generator) -> np.ndarray:
    """Axis-aligned rectangles on random z-slices until ``quota`` voxels are hidden."""
    mask = np.zeros((edge, edge, edge), dtype=bool)
    count = 0
    if quota >= edge**3:
        mask[:] = True
        return mask.ravel()
    while count < quota:
        z = rng.integers(edge)
        h, w = rng.integers(1, edge + 1, size=2)
        y0 = rng.integers(0, edge - h + 1)
        x0 = rng.integers(0, edge - w + 1)
        rect = np.zeros((edge, edge), dtype=bool)
        rect[y0:y0 + h, x0:x0 + w] = True
        fresh = np.flatnonzero(rect & ~mask[z])
        take = fresh[: quota - count]
        mask[z].flat[take] = True
        count += len(take)
    return mask.ravel()


def _mask_rows(n: int, n_voxels: int, edge: int, spec: MaskSpec,
               rng: np.random.Generator) -> np.ndarray:
    quota = spec.quota(n_voxels)
    masks = np.zeros((n, n_voxels), dtype=bool)
    if quota == 0 or n == 0:
        return masks
    if spec.mode == "voxel":
        keys = rng.random((n, n_voxels))
        chosen = np.argpartition(keys, quota - 1, axis=1)[:, :quota] if quota < n_voxels \
            else np.broadcast_to(np.arange(n_voxels), (n, n_voxels))
        np.put_along_axis(masks, chosen, True, axis=1)
    else:
        for i in range(n):
            masks[i] = _patch_mask(edge, quota, rng)
    return masks


def apply_mask(sub: SubCube, spec: MaskSpec, rng: np.random.Generator | None = None) -> MaskedSample:
    """Hide exactly ``round(rate * edge**3)`` voxels behind ``mask_value``."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    target = np.asarray(sub.values, dtype=np.float32)
    mask = _mask_rows(1, target.size, sub.edge, spec, rng)[0]
    inp = np.where(mask, np.float32(spec.mask_value), target).astype(np.float32)
    return MaskedSample(inp, target.copy(), np.flatnonzero(mask))


# datasets

@dataclass
class SSLDataset:
    """Stacked masked samples; row ``i`` is one :class:`MaskedSample`."""

    inputs: np.ndarray  # (N, V) float32
    targets: np.ndarray  # (N, V) float32
    masks: np.ndarray  # (N, V) bool
    core_ids: np.ndarray  # (N,) int
    edge: int = DEFAULT_EDGE

    def __len__(self):
        return len(self.inputs)

    def __getitem__(self, i) -> MaskedSample:
        return MaskedSample(self.inputs[i], self.targets[i], np.flatnonzero(self.masks[i]))

    def subset(self, idx) -> "SSLDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SSLDataset(self.inputs[idx], self.targets[idx], self.masks[idx],
                          self.core_ids[idx], self.edge)


@dataclass
class SupervisedDataset:
    inputs: np.ndarray  # (N, V) float32
    targets: np.ndarray  # (N, 2) float64, original units
    core_ids: np.ndarray  # (N,) int
    edge: int = DEFAULT_EDGE

    def __len__(self):
        return len(self.inputs)

    def __getitem__(self, i) -> SupervisedSample:
        return SupervisedSample(self.inputs[i], tuple(float(t) for t in self.targets[i]),
                                int(self.core_ids[i]))

    def subset(self, idx) -> "SupervisedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SupervisedDataset(self.inputs[idx], self.targets[idx], self.core_ids[idx], self.edge)


def parse_split(split) -> tuple[str, float]:
    """``0.5`` / ``"random:0.5"`` -> ("random", 0.5); ``"first:6"`` -> ("first", 6)."""
    if isinstance(split, (int, float)) and not isinstance(split, bool):
        kind, value = "random", float(split)
    elif isinstance(split, str) and ":" in split:
        kind, raw = split.split(":", 1)
        value = float(raw)
    else:
        raise InvalidSplit(f"cannot parse split {split!r}")
    if kind == "random":
        if not 0.0 <= value <= 1.0:
            raise InvalidSplit(f"random split fraction {value} outside [0, 1]")
    elif kind == "first":
        if value != int(value) or value < 1:
            raise InvalidSplit(f"first-k split needs a positive integer, got {value}")
        value = int(value)
    else:
        raise InvalidSplit(f"unknown split kind {kind!r}")
    return kind, value


def _split_indices(core_ids: np.ndarray, n_cores: int, split, seed: int):
    kind, value = parse_split(split)
    n = len(core_ids)
    if kind == "first":
        if value >= n_cores:
            raise InvalidSplit(f"first:{value} leaves no test cores out of {n_cores}")
        train = core_ids < value
        return np.flatnonzero(train), np.flatnonzero(~train)
    perm = derive_rng(seed, TAG_SPLIT).permutation(n)
    n_train = int(np.floor(value * n + 0.5))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _sample_core(volume: Volume3D, count: int, edge: int, seed: int, core: int) -> np.ndarray:
    rng = derive_rng(seed, TAG_SAMPLE, core)
    return _extract(volume, _origins(volume, count, edge, rng), edge)


def build_ssl_dataset(volumes: Sequence[Volume3D], per_volume: int, spec: MaskSpec = MaskSpec(),
                      split=0.5, seed: int = 0, edge: int = DEFAULT_EDGE) -> tuple[SSLDataset, SSLDataset]:
    """Masked sub-cubes from every volume, split 50/50 at sample level by default."""
    if not volumes or per_volume < 1:
        raise EmptyInput("need at least one volume and per_volume >= 1")
    targets, masks, ids = [], [], []
    for c, vol in enumerate(volumes):
        cubes = _sample_core(vol, per_volume, edge, seed, c)
        masks.append(_mask_rows(per_volume, edge**3, edge, spec, derive_rng(seed, TAG_MASK, c)))
        targets.append(cubes)
        ids.append(np.full(per_volume, c, dtype=np.int64))
    targets = np.concatenate(targets)
    masks = np.concatenate(masks)
    inputs = np.where(masks, np.float32(spec.mask_value), targets).astype(np.float32)
    full = SSLDataset(inputs, targets, masks, np.concatenate(ids), edge)
    tr, te = _split_indices(full.core_ids, len(volumes), split, seed)
    return full.subset(tr), full.subset(te)


def build_supervised_dataset(cores: Sequence[tuple[Volume3D, CoreLabels | None]], per_core: int,
                             split="first:6", seed: int = 0, edge: int = DEFAULT_EDGE
                             ) -> tuple[SupervisedDataset, SupervisedDataset]:
    """Unmasked sub-cubes labelled with their core's (porosity, permeability)."""
    if not cores or per_core < 1:
        raise EmptyInput("need at least one core and per_core >= 1")
    for i, (_, labels) in enumerate(cores):
        if labels is None:
            raise MissingLabels(f"core {i} has no labels")
    inputs, targets, ids = [], [], []
    for c, (vol, labels) in enumerate(cores):
        inputs.append(_sample_core(vol, per_core, edge, seed, c))
        targets.append(np.tile(np.array(labels.as_tuple(), dtype=np.float64), (per_core, 1)))
        ids.append(np.full(per_core, c, dtype=np.int64))
    full = SupervisedDataset(np.concatenate(inputs), np.concatenate(targets),
                             np.concatenate(ids), edge)
    tr, te = _split_indices(full.core_ids, len(cores), split, seed)
    return full.subset(tr), full.subset(te)


# "CTDS" cache files

_CTDS_MAGIC = b"CTDS"
_CTDS_VERSION = 1
_KIND_SSL, _KIND_SUPERVISED = 0, 1
# magic, version u32, count u64, edge u32, kind u8, aux u32 (mask count or target count)
_CTDS_HEADER = struct.Struct("<4sIQIBI")


def save_dataset(dataset, path) -> None:
    n, v = len(dataset), dataset.edge**3
    if isinstance(dataset, SSLDataset):
        counts = dataset.masks.sum(axis=1)
        m = int(counts[0]) if n else 0
        if n and np.any(counts != m):
            raise ValueError("cache records need a constant mask count")
        rec = np.dtype([("input", "<f4", v), ("target", "<f4", v), ("mask", "<u4", m)])
        arr = np.zeros(n, dtype=rec)
        arr["input"], arr["target"] = dataset.inputs, dataset.targets
        if m:
            arr["mask"] = np.nonzero(dataset.masks)[1].reshape(n, m)
        header = _CTDS_HEADER.pack(_CTDS_MAGIC, _CTDS_VERSION, n, dataset.edge, _KIND_SSL, m)
    else:
        rec = np.dtype([("input", "<f4", v), ("target", "<f4", 2), ("core", "<u4")])
        arr = np.zeros(n, dtype=rec)
        arr["input"], arr["target"], arr["core"] = dataset.inputs, dataset.targets, dataset.core_ids
        header = _CTDS_HEADER.pack(_CTDS_MAGIC, _CTDS_VERSION, n, dataset.edge, _KIND_SUPERVISED, 2)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def load_dataset(path):
    """Read a cache written by :func:`save_dataset`.

    SSL records do not keep core ids, so they come back as 0. Supervised
    targets are stored as f32 and lose precision on the way through.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _CTDS_HEADER.size:
        raise ValueError(f"{path}: truncated dataset header")
    magic, version, n, edge, kind, aux = _CTDS_HEADER.unpack_from(blob)
    if magic != _CTDS_MAGIC:
        raise ValueError(f"{path}: not a CTDS file")
    if version != _CTDS_VERSION:
        raise ValueError(f"{path}: unsupported CTDS version {version}")
    v = edge**3
    if kind == _KIND_SSL:
        rec = np.dtype([("input", "<f4", v), ("target", "<f4", v), ("mask", "<u4", aux)])
    else:
        rec = np.dtype([("input", "<f4", v), ("target", "<f4", 2), ("core", "<u4")])
    if len(blob) != _CTDS_HEADER.size + n * rec.itemsize:
        raise ValueError(f"{path}: record block has the wrong length")
    arr = np.frombuffer(blob, dtype=rec, count=n, offset=_CTDS_HEADER.size)
    inputs = np.array(arr["input"], dtype=np.float32).reshape(n, v)
    if kind == _KIND_SSL:
        masks = np.zeros((n, v), dtype=bool)
        if aux:
            np.put_along_axis(masks, arr["mask"].reshape(n, aux).astype(np.int64), True, axis=1)
        targets = np.array(arr["target"], dtype=np.float32).reshape(n, v)
        return SSLDataset(inputs, targets, masks, np.zeros(n, dtype=np.int64), edge)
    return SupervisedDataset(inputs, np.array(arr["target"], dtype=np.float64).reshape(n, 2),
                             np.array(arr["core"], dtype=np.int64), edge)
