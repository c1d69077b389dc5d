"""Voxel volumes: raw-file ingestion, physical labels, synthetic porous media.

Convention throughout: 1.0 is pore (void), 0.0 is solid. Arrays are stored
as ``(nz, ny, nx)`` so that the flat order is x-fastest, which is how raw
micro-CT exports are usually laid out.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    FileSizeMismatch,
    InvalidPorosity,
    InvalidSpec,
    NotBinary,
    ZeroSurface,
)

PSEUDO_MD_SCALE = 1000.0


@dataclass(frozen=True)
class Volume3D:
    data: np.ndarray  # (nz, ny, nx), float32 in [0, 1]
    kind: str = "binary"
    voxel_size: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {data.shape}")
        if self.kind not in ("binary", "grayscale"):
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("voxel values must lie in [0, 1]")
        if self.kind == "binary" and not np.all((data == 0.0) | (data == 1.0)):
            raise NotBinary("binary volume holds values other than 0 and 1")
        if data.flags.writeable:
            data = data.copy() if data is self.data else data
            data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def n_voxels(self) -> int:
        return int(self.data.size)


@dataclass(frozen=True)
class CoreLabels:
    porosity: float  # fraction
    permeability: float  # mD

    def __post_init__(self):
        if not 0.0 <= self.porosity <= 1.0:
            raise InvalidPorosity(f"porosity {self.porosity} outside [0, 1]")
        if not self.permeability >= 0.0:
            raise ValueError(f"permeability {self.permeability} must be >= 0")

    def as_tuple(self) -> tuple[float, float]:
        return (self.porosity, self.permeability)


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    correlation_length: float = 2.0
    target_porosity: float = 0.25
    seed: int = 0
    kozeny_constant: float = 5.0

    def validate(self) -> None:
        if len(self.dims) != 3 or any(int(d) < 8 for d in self.dims):
            raise InvalidSpec(f"every dimension must be >= 8, got {self.dims}")
        if not 0.0 < self.target_porosity < 1.0:
            raise InvalidSpec("target_porosity must lie strictly inside (0, 1)")
        if self.correlation_length < 0:
            raise InvalidSpec("correlation_length must be >= 0")
        if self.kozeny_constant <= 0:
            raise InvalidSpec("kozeny_constant must be positive")


def _as_dims(dims) -> tuple[int, int, int]:
    if isinstance(dims, int):
        return (dims, dims, dims)
    dims = tuple(int(d) for d in dims)
    if len(dims) == 1:
        return dims * 3
    if len(dims) != 3:
        raise ValueError(f"dims must have 1 or 3 entries, got {dims}")
    return dims


def load_raw_volume(path, dims, encoding: str = "u8_binary", invert: bool = False) -> Volume3D:
    """Read a headerless unsigned 8-bit volume.

    ``u8_binary`` maps 0 to solid and any nonzero byte to pore; ``u8_grayscale``
    maps byte ``v`` to ``v / 255``. ``invert`` swaps the phases (or ``1 - v``)
    for datasets that store solid as the bright phase.
    """
    nx, ny, nz = _as_dims(dims)
    expected = nx * ny * nz
    size = os.path.getsize(path)
    if size != expected:
        raise FileSizeMismatch(f"{path}: {size} bytes, dims {nx}x{ny}x{nz} need {expected}")
    raw = np.fromfile(path, dtype=np.uint8).reshape(nz, ny, nx)
    if encoding == "u8_binary":
        data = (raw != 0).astype(np.float32)
        if invert:
            data = 1.0 - data
        return Volume3D(data, kind="binary")
    if encoding == "u8_grayscale":
        data = raw.astype(np.float32) / np.float32(255.0)
        if invert:
            data = 1.0 - data
        return Volume3D(data, kind="grayscale")
    raise ValueError(f"unknown encoding {encoding!r}")


def write_raw_volume(volume: Volume3D, path) -> None:
    """Inverse of :func:`load_raw_volume` (binary pore -> 255)."""
    if volume.kind == "binary":
        raw = np.where(volume.data == 1.0, 255, 0).astype(np.uint8)
    else:
        raw = np.rint(volume.data * 255.0).astype(np.uint8)
    raw.tofile(path)


def _require_binary(volume: Volume3D) -> None:
    if volume.kind != "binary":
        raise NotBinary("operation needs a segmented (binary) volume")


def porosity(volume: Volume3D) -> float:
    """Void fraction of the whole volume."""
    _require_binary(volume)
    return float(np.count_nonzero(volume.data == 1.0)) / volume.n_voxels


def specific_surface(volume: Volume3D) -> float:
    """Solid-pore faces (6-neighbourhood, periodic boundaries) per voxel.

    Each voxel is compared with its +x, +y and +z neighbour, wrapping at the
    far faces, so every face of the periodic lattice is seen exactly once.
    """
    _require_binary(volume)
    d = volume.data
    faces = sum(int(np.count_nonzero(d != np.roll(d, -1, axis=ax))) for ax in range(3))
    return faces / volume.n_voxels


def kozeny_carman(phi: float, surface: float, c: float = 5.0) -> float:
    """Kozeny-Carman permeability proxy in voxel^2: phi^3 / (c S^2 (1 - phi)^2)."""
    if not 0.0 <= phi < 1.0:
        raise InvalidPorosity(f"porosity {phi} outside [0, 1)")
    if surface <= 0:
        raise ZeroSurface("specific surface must be positive")
    if c <= 0:
        raise ValueError("Kozeny constant must be positive")
    return phi**3 / (c * surface**2 * (1.0 - phi) ** 2)


def label_volume(volume: Volume3D, c: float = 5.0) -> CoreLabels:
    """Porosity plus the Kozeny-Carman proxy scaled to pseudo-mD."""
    phi = porosity(volume)
    if phi == 0.0:
        return CoreLabels(0.0, 0.0)
    k = kozeny_carman(phi, specific_surface(volume), c)
    return CoreLabels(phi, PSEUDO_MD_SCALE * k)


def generate_synthetic(spec: SynthSpec) -> tuple[Volume3D, CoreLabels]:
    """Thresholded smoothed Gaussian noise with an exact pore count.

    The pore phase is the ``round(target * N)`` lowest values of the smoothed
    field (stable sort, so ties are broken by voxel index).
    """
    spec.validate()
    nx, ny, nz = _as_dims(spec.dims)
    rng = np.random.default_rng(spec.seed)
    field_ = rng.standard_normal((nz, ny, nx))
    if spec.correlation_length > 0:
        field_ = ndimage.gaussian_filter(field_, sigma=spec.correlation_length, mode="wrap")
    n = field_.size
    n_pore = int(np.floor(spec.target_porosity * n + 0.5))
    order = np.argsort(field_.ravel(), kind="stable")
    flat = np.zeros(n, dtype=np.float32)
    flat[order[:n_pore]] = 1.0
    volume = Volume3D(flat.reshape(nz, ny, nx), kind="binary")
    return volume, label_volume(volume, spec.kozeny_constant)


# raw + JSON sidecar pairs

def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


@dataclass
class VolumeRecord:
    """A volume loaded from disk together with whatever its sidecar carried."""

    volume: Volume3D
    labels: CoreLabels | None = None
    meta: dict = field(default_factory=dict)


def save_volume(prefix, volume: Volume3D, labels: CoreLabels | None = None,
                generator: SynthSpec | None = None) -> tuple[Path, Path]:
    prefix = Path(prefix)
    if prefix.suffix in (".raw", ".json"):
        prefix = prefix.with_suffix("")
    raw_path = prefix.with_name(prefix.name + ".raw")
    meta = {
        "dims": list(volume.dims),
        "kind": volume.kind,
        "voxel_size": volume.voxel_size,
        "encoding": "u8_binary" if volume.kind == "binary" else "u8_grayscale",
    }
    if labels is not None:
        meta["labels"] = {"porosity": labels.porosity, "permeability_mD": labels.permeability}
    if generator is not None:
        meta["generator"] = {
            "dims": list(generator.dims),
            "correlation_length": generator.correlation_length,
            "target_porosity": generator.target_porosity,
            "seed": generator.seed,
            "kozeny_constant": generator.kozeny_constant,
        }
    write_raw_volume(volume, raw_path)
    json_path = sidecar_path(raw_path)
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return raw_path, json_path


def load_volume(path, dims=None, encoding: str | None = None, invert: bool = False) -> VolumeRecord:
    """Load ``X.raw``, filling missing arguments from ``X.json`` when present."""
    path = Path(path)
    if path.suffix != ".raw":
        path = path.with_name(path.name + ".raw") if not path.suffix else path.with_suffix(".raw")
    meta: dict = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    if dims is None:
        if "dims" not in meta:
            raise ValueError(f"{path}: no dims given and no sidecar {side}")
        dims = meta["dims"]
    if encoding is None:
        encoding = meta.get("encoding", "u8_binary")
    volume = load_raw_volume(path, dims, encoding, invert=invert)
    if "voxel_size" in meta:
        volume = Volume3D(volume.data, kind=volume.kind, voxel_size=float(meta["voxel_size"]))
    labels = None
    if "labels" in meta:
        lab = meta["labels"]
        labels = CoreLabels(float(lab["porosity"]), float(lab["permeability_mD"]))
    return VolumeRecord(volume, labels, meta)
