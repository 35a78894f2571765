"""Volumetric data types, raw file formats, and the synthetic dataset generator.

File format: a raw little-endian payload (``<name>.f32``) in (z, y, x,
channel) order plus a JSON sidecar (``<name>.json``) carrying shape,
channel count, dtype tag, and voxel spacing. Image volumes use dtype
"f32le"; label volumes reuse the same container with "u16le".
Annotations travel as ``<name>.annos.json``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import GenerationError, SidecarMissingError, VolumeFormatError
from .geometry import BBox3D

_DTYPES = {"f32le": np.dtype("<f4"), "u16le": np.dtype("<u2")}


@dataclass
class Volume3D:
    """A dense (D, H, W, C) float32 scalar grid: raw image or feature map."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[..., None]
        if arr.ndim != 4:
            raise ValueError(f"volume data must be (D, H, W[, C]), got shape {arr.shape}")
        if min(arr.shape[:3]) < 1 or arr.shape[3] < 1:
            raise ValueError(f"volume dims must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass
class LabelVolume:
    """Per-voxel instance ids: 0 is background, k > 0 is instance k."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 3:
            raise ValueError(f"label volume must be (D, H, W), got shape {arr.shape}")
        if arr.size and arr.min() < 0:
            raise ValueError("labels must be non-negative")
        self.labels = np.ascontiguousarray(arr.astype(np.uint16))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def ids(self) -> list[int]:
        present = np.unique(self.labels)
        return [int(v) for v in present if v > 0]


@dataclass(frozen=True)
class InstanceAnnotation:
    """One ground-truth instance; the voxel mask (when present) lives in the
    paired LabelVolume under this annotation's id."""

    id: int
    object_class: int
    box: BBox3D
    has_mask: bool

    def __post_init__(self):
        if self.id <= 0:
            raise ValueError("annotation ids must be positive")
        if self.object_class < 1:
            raise ValueError("object_class must be >= 1 (0 is background)")


class StackRecord(NamedTuple):
    volume: Volume3D
    labels: LabelVolume | None
    annotations: list[InstanceAnnotation]


@dataclass
class Dataset:
    stacks: list[StackRecord]
    class_count: int = 2

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2 (background + objects)")
        for rec in self.stacks:
            for a in rec.annotations:
                if a.object_class >= self.class_count:
                    raise ValueError(
                        f"annotation class {a.object_class} out of range for c={self.class_count}"
                    )


# ---------------------------------------------------------------------------
# raw volume files


def _write_raw(arr: np.ndarray, dtype_tag: str, spacing, path: Path) -> None:
    path = Path(path)
    payload = np.ascontiguousarray(arr.astype(_DTYPES[dtype_tag], copy=False))
    path.write_bytes(payload.tobytes())
    sidecar = {
        "shape": [int(s) for s in arr.shape[:3]],
        "channels": int(arr.shape[3]) if arr.ndim == 4 else 1,
        "dtype": dtype_tag,
        "spacing": [float(s) for s in spacing],
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def _read_raw(path: Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise SidecarMissingError(f"no sidecar {sidecar_path} for payload {path}")
    sidecar = json.loads(sidecar_path.read_text())
    dtype_tag = sidecar.get("dtype")
    if dtype_tag not in _DTYPES:
        raise VolumeFormatError(f"{sidecar_path}: unknown dtype {dtype_tag!r}")
    dt = _DTYPES[dtype_tag]
    shape = tuple(int(s) for s in sidecar["shape"])
    channels = int(sidecar.get("channels", 1))
    expected = int(np.prod(shape)) * channels * dt.itemsize
    payload = path.read_bytes()
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: expected {expected} bytes for shape {list(shape)} x {channels} "
            f"({dtype_tag}), got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dt).reshape(shape + (channels,))
    return arr, sidecar


def save_volume(v: Volume3D, path) -> None:
    """Write the raw payload at ``path`` and its ``.json`` sidecar; bit-exact."""
    _write_raw(v.data, "f32le", v.spacing, Path(path))


def load_volume(path) -> Volume3D:
    arr, sidecar = _read_raw(Path(path))
    return Volume3D(data=arr.copy(), spacing=tuple(sidecar.get("spacing", (1.0, 1.0, 1.0))))


def save_labels(lv: LabelVolume, path) -> None:
    _write_raw(lv.labels[..., None], "u16le", (1.0, 1.0, 1.0), Path(path))


def load_labels(path) -> LabelVolume:
    arr, sidecar = _read_raw(Path(path))
    if sidecar["dtype"] != "u16le":
        raise VolumeFormatError(f"{path}: expected u16le label volume, got {sidecar['dtype']}")
    return LabelVolume(labels=arr[..., 0].copy())


# ---------------------------------------------------------------------------
# annotation files


def save_annotations(annos: Sequence[InstanceAnnotation], path, scores=None) -> None:
    """JSON interchange; ``scores`` (aligned list) is attached to predictions."""
    rows = []
    for i, a in enumerate(annos):
        row = {
            "id": a.id,
            "class": a.object_class,
            "box": {
                "cz": a.box.cz, "cy": a.box.cy, "cx": a.box.cx,
                "d": a.box.d, "h": a.box.h, "w": a.box.w,
            },
            "has_mask": a.has_mask,
        }
        if scores is not None and scores[i] is not None:
            row["score"] = float(scores[i])
        rows.append(row)
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")


def load_annotations(path) -> list[InstanceAnnotation]:
    rows = json.loads(Path(path).read_text())
    out = []
    for row in rows:
        b = row["box"]
        box = BBox3D(
            b["cz"], b["cy"], b["cx"], b["d"], b["h"], b["w"],
            object_class=int(row["class"]),
            score=row.get("score"),
        )
        out.append(
            InstanceAnnotation(
                id=int(row["id"]),
                object_class=int(row["class"]),
                box=box,
                has_mask=bool(row["has_mask"]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# synthetic ellipsoid stacks


@dataclass(frozen=True)
class SynthConfig:
    shape: tuple[int, int, int] = (48, 48, 48)
    count_range: tuple[int, int] = (3, 8)       # instances per stack, inclusive
    radius_range: tuple[float, float] = (3.0, 6.0)
    min_separation: float = 7.0                 # between ellipsoid centers
    fg_mean: float = 1.0
    bg_mean: float = 0.0
    noise_sigma: float = 0.05
    object_class: int = 1

    def __post_init__(self):
        if self.radius_range[0] < 1.0:
            raise ValueError("radius_range minimum must be >= 1 voxel")
        if self.min_separation <= 1.0:
            raise ValueError("min_separation must exceed 1 voxel")
        if self.count_range[0] < 0 or self.count_range[1] < self.count_range[0]:
            raise ValueError(f"bad count_range {self.count_range}")


def _tight_box(zz: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> BBox3D:
    """Tight box of a voxel index set: voxel i spans [i-0.5, i+0.5]."""
    z0, z1 = int(zz.min()), int(zz.max())
    y0, y1 = int(yy.min()), int(yy.max())
    x0, x1 = int(xx.min()), int(xx.max())
    return BBox3D(
        (z0 + z1) / 2.0, (y0 + y1) / 2.0, (x0 + x1) / 2.0,
        float(z1 - z0 + 1), float(y1 - y0 + 1), float(x1 - x0 + 1),
    )


def synth_generate(
    cfg: SynthConfig, seed: int
) -> tuple[Volume3D, LabelVolume, list[InstanceAnnotation]]:
    """Deterministically rasterize random solid ellipsoids into a stack.

    Voxels claimed by several ellipsoids go to the instance with the nearer
    center (ties to the lower id). Each annotation box is the tight bound of
    the instance's surviving voxels. Intensity is bg + (fg-bg)*mask plus
    Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    dz, dy, dx = cfg.shape
    count = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))

    centers: list[np.ndarray] = []
    radii: list[np.ndarray] = []
    budget = 10 * count
    for _ in range(budget):
        if len(centers) == count:
            break
        cand = rng.uniform([0.0, 0.0, 0.0], [dz - 1.0, dy - 1.0, dx - 1.0])
        if centers and min(np.linalg.norm(cand - c) for c in centers) < cfg.min_separation:
            continue
        centers.append(cand)
        radii.append(rng.uniform(cfg.radius_range[0], cfg.radius_range[1], size=3))
    if len(centers) < count:
        raise GenerationError(
            f"placed {len(centers)} of {count} instances within {budget} attempts; "
            "loosen min_separation or shrink counts"
        )

    labels = np.zeros(cfg.shape, dtype=np.uint16)
    best_d2 = np.full(cfg.shape, np.inf, dtype=np.float64)
    for idx, (c, r) in enumerate(zip(centers, radii), start=1):
        lo = np.maximum(np.ceil(c - r).astype(int), 0)
        hi = np.minimum(np.floor(c + r).astype(int), np.array(cfg.shape) - 1)
        if np.any(hi < lo):
            raise GenerationError(f"instance {idx} rasterized to nothing")
        zz, yy, xx = np.meshgrid(
            np.arange(lo[0], hi[0] + 1),
            np.arange(lo[1], hi[1] + 1),
            np.arange(lo[2], hi[2] + 1),
            indexing="ij",
        )
        dzv, dyv, dxv = zz - c[0], yy - c[1], xx - c[2]
        inside = (dzv / r[0]) ** 2 + (dyv / r[1]) ** 2 + (dxv / r[2]) ** 2 <= 1.0
        d2 = dzv**2 + dyv**2 + dxv**2
        region = (slice(lo[0], hi[0] + 1), slice(lo[1], hi[1] + 1), slice(lo[2], hi[2] + 1))
        take = inside & (d2 < best_d2[region])
        labels[region][take] = idx
        best_d2[region][take] = d2[take]

    annotations: list[InstanceAnnotation] = []
    for idx in range(1, count + 1):
        zz, yy, xx = np.nonzero(labels == idx)
        if zz.size == 0:
            raise GenerationError(f"instance {idx} lost all voxels to neighbors")
        annotations.append(
            InstanceAnnotation(
                id=idx,
                object_class=cfg.object_class,
                box=_tight_box(zz, yy, xx),
                has_mask=True,
            )
        )

    intensity = cfg.bg_mean + (cfg.fg_mean - cfg.bg_mean) * (labels > 0)
    intensity = intensity + cfg.noise_sigma * rng.standard_normal(cfg.shape)
    volume = Volume3D(data=intensity.astype(np.float32))
    return volume, LabelVolume(labels=labels), annotations


def subsample_masks(
    annos: Sequence[InstanceAnnotation], fraction: float, seed: int
) -> list[InstanceAnnotation]:
    """Keep voxel masks on exactly round(fraction * n) annotations.

    Boxes and classes are never touched; the chosen set is uniform without
    replacement and deterministic per seed.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    n = len(annos)
    keep = int(math.floor(fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(n, size=keep, replace=False).tolist()) if n else set()
    return [
        dataclasses.replace(a, has_mask=(i in chosen))
        for i, a in enumerate(annos)
    ]
