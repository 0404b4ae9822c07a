"""Volume and label-map containers, the ``SVOL`` file format and dataset manifests."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sfuda3d.exceptions import ChecksumError, DataError, DimensionError, FormatError

VOLUME_MAGIC = b"SVOL"
VOLUME_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_HEADER = struct.Struct("<4sBB3I3f")

CLASS_NAMES = ("AA", "LAC", "LVC", "MYO")


@dataclass
class Volume:
    """Scalar field on a voxel grid; ``values`` is indexed ``[x, y, z]``."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise DimensionError(f"volume must be 3-D with positive dims, got {self.values.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class LabelMap:
    """Per-voxel class ids (0 = background)."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.uint8)
        if self.values.ndim != 3:
            raise DimensionError(f"label map must be 3-D, got {self.values.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def write_volume(path, vol: Volume | LabelMap) -> None:
    code = 1 if isinstance(vol, LabelMap) else 0
    payload = vol.values.astype(_DTYPE_CODES[code]).tobytes(order="C")
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, code, *vol.dims, *vol.spacing)
    Path(path).write_bytes(header + payload + struct.pack("<Q", _checksum(payload)))


def read_volume(path) -> Volume | LabelMap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 8:
        raise FormatError(f"{path}: file too short for an SVOL header")
    magic, version, code, w, h, d, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    expected = w * h * d * dtype.itemsize
    payload = raw[_HEADER.size:-8]
    if len(payload) != expected:
        raise FormatError(f"{path}: header dims {(w, h, d)} need {expected} payload bytes, found {len(payload)}")
    (stored,) = struct.unpack("<Q", raw[-8:])
    if stored != _checksum(payload):
        raise ChecksumError(f"{path}: checksum mismatch")
    values = np.frombuffer(payload, dtype=dtype).reshape(w, h, d)
    cls = LabelMap if code == 1 else Volume
    return cls(values.copy(), (sx, sy, sz))


@dataclass
class ManifestEntry:
    id: str
    modality: str
    image_path: Path
    label_path: Path
    split: str

    def to_json(self, root: Path) -> dict:
        return {
            "id": self.id,
            "modality": self.modality,
            "image_path": _relative(self.image_path, root),
            "label_path": _relative(self.label_path, root),
            "split": self.split,
        }


def _relative(path: Path, root: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(path)


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def select(self, modality: str | None = None, split: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries
                if (modality is None or e.modality == modality) and (split is None or e.split == split)]

    def write(self, path) -> None:
        path = Path(path)
        payload = [e.to_json(path.parent) for e in self.entries]
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        entries = []
        for item in payload:
            try:
                entries.append(ManifestEntry(
                    id=str(item["id"]),
                    modality=str(item["modality"]),
                    image_path=(path.parent / item["image_path"]),
                    label_path=(path.parent / item["label_path"]),
                    split=str(item["split"]),
                ))
            except (KeyError, TypeError) as exc:
                raise DataError(f"malformed manifest entry in {path}: {item!r}") from exc
        return cls(entries)


def load_images(entries: list[ManifestEntry]) -> list[np.ndarray]:
    """Read only the image side of each entry."""
    return [read_volume(e.image_path).values for e in entries]


def load_pairs(entries: list[ManifestEntry]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(read_volume(e.image_path).values, read_volume(e.label_path).values) for e in entries]
