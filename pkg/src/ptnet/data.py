"""Volume preprocessing, dataset splits, the synthetic paired-image task and manifests."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError, DimensionError
from .tensor import Rng, load_tensor, save_tensor

PERCENTILE = 99.95


@dataclass
class VolumeRecord:
    voxels: np.ndarray
    id: str
    meta: dict = field(default_factory=dict)


@dataclass
class SlicePair:
    source: np.ndarray  # (1, X, Y)
    target: np.ndarray
    volume_id: str = ""
    z_index: int = 0

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise DimensionError(f"slice pair extents differ: {self.source.shape} vs {self.target.shape}")


def normalize_volume(v: VolumeRecord, percentile: float = PERCENTILE) -> VolumeRecord:
    """Map [min, p99.95] linearly onto [0, 1]; values above the percentile clamp to 1."""
    x = np.asarray(v.voxels, dtype=np.float64)
    if x.size == 0:
        raise DegenerateInputError(f"volume {v.id!r} is empty")
    lo = float(x.min())
    hi = float(np.percentile(x, percentile, method="linear"))
    if hi <= lo:
        raise DegenerateInputError(f"volume {v.id!r}: percentile {percentile} equals the minimum ({lo})")
    out = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    meta = {**v.meta, "min": lo, "p99_95": hi}
    return VolumeRecord(out.astype(v.voxels.dtype if v.voxels.dtype.kind == "f" else np.float64), v.id, meta)


def _fit_axis(lo: int, hi: int, size: int, target: int) -> tuple[int, int, int, int]:
    """(crop_start, crop_stop, pad_before, pad_after) taking [lo, hi) to exactly ``target``."""
    extent = hi - lo
    if extent >= target:
        start = lo + (extent - target) // 2
        return start, start + target, 0, 0
    extra = target - extent
    before = extra // 2
    return lo, hi, before, extra - before


def crop_volume(v: VolumeRecord, target_x: int, target_y: int) -> VolumeRecord:
    """Crop to the nonzero bounding box in X/Y, then center-pad or center-crop to the target extents."""
    x = v.voxels
    X, Y = x.shape[:2]
    if target_x > X or target_y > Y:
        raise ConfigError(f"target extents {target_x}x{target_y} exceed volume extents {X}x{Y}")
    nz = x != 0
    if not nz.any():
        raise DegenerateInputError(f"volume {v.id!r} is entirely zero")
    rows = np.flatnonzero(nz.any(axis=tuple(a for a in range(x.ndim) if a != 0)))
    cols = np.flatnonzero(nz.any(axis=tuple(a for a in range(x.ndim) if a != 1)))
    meta = dict(v.meta)
    box = (int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1)
    if box[1] - box[0] > target_x or box[3] - box[2] > target_y:
        msg = f"volume {v.id!r}: nonzero content {box[1] - box[0]}x{box[3] - box[2]} exceeds target {target_x}x{target_y}; center crop applied"
        meta["content_loss_warning"] = msg
        warnings.warn(msg, stacklevel=2)
    xs, xe, xb, xa = _fit_axis(box[0], box[1], X, target_x)
    ys, ye, yb, ya = _fit_axis(box[2], box[3], Y, target_y)
    pad = [(xb, xa), (yb, ya)] + [(0, 0)] * (x.ndim - 2)
    out = np.pad(x[xs:xe, ys:ye], pad)
    meta["bbox"] = list(box)
    return VolumeRecord(out, v.id, meta)


def slice_volume(v: VolumeRecord) -> list[np.ndarray]:
    """Axial slices ``voxels[:, :, k]`` in Z order."""
    return [v.voxels[:, :, k] for k in range(v.voxels.shape[2])]


def split_dataset(ids, seed: int, ratios=(7, 1, 2)) -> tuple[list, list, list]:
    """Seeded shuffle then contiguous partition; validation and test sizes round to nearest."""
    ids = list(ids)
    if len(ids) < 10:
        raise ConfigError(f"need at least 10 volumes to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ConfigError("volume ids must be unique")
    total = sum(ratios)
    n = len(ids)
    n_val = int(np.floor(n * ratios[1] / total + 0.5))
    n_test = int(np.floor(n * ratios[2] / total + 0.5))
    n_train = n - n_val - n_test
    order = Rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


# ---------------------------------------------------------------------------
# Synthetic contrast-inversion task
# ---------------------------------------------------------------------------

SMOOTH_KERNEL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


def smooth3x3(img: np.ndarray) -> np.ndarray:
    """One pass of the fixed 3x3 binomial filter with edge replication."""
    p = np.pad(img, 1, mode="edge")
    X, Y = img.shape
    out = np.zeros_like(img, dtype=np.float64)
    for a in range(3):
        for b in range(3):
            out += SMOOTH_KERNEL[a, b] * p[a : a + X, b : b + Y]
    return out


def contrast_operator(source: np.ndarray) -> np.ndarray:
    """The fixed source -> target mapping: 1 - smooth(source), clamped to [0, 1]."""
    return np.clip(1.0 - smooth3x3(source), 0.0, 1.0)


def gen_synthetic_pair(rng: Rng, X: int, Y: int, dtype=np.float32) -> SlicePair:
    """Source: 3-8 random anisotropic Gaussian blobs scaled to peak 1. Target: ``contrast_operator(source)``."""
    if X % 16 or Y % 16:
        raise ConfigError(f"synthetic extents must be multiples of 16, got {X}x{Y}")
    gx, gy = np.meshgrid(np.arange(X, dtype=np.float64), np.arange(Y, dtype=np.float64), indexing="ij")
    img = np.zeros((X, Y))
    for _ in range(int(rng.integers(3, 9))):
        cx, cy = rng.uniform(0, X), rng.uniform(0, Y)
        sx = rng.uniform(X / 16, X / 5)
        sy = rng.uniform(Y / 16, Y / 5)
        th = rng.uniform(0, np.pi)
        amp = rng.uniform(0.3, 1.0)
        c, s = np.cos(th), np.sin(th)
        u = c * (gx - cx) + s * (gy - cy)
        w = -s * (gx - cx) + c * (gy - cy)
        img += amp * np.exp(-0.5 * ((u / sx) ** 2 + (w / sy) ** 2))
    src = img / img.max()
    tgt = contrast_operator(src)
    return SlicePair(src[None].astype(dtype), tgt[None].astype(dtype))


def synthetic_arrays(seed: int, count: int, X: int, Y: int, dtype=np.float32):
    """``count`` pairs stacked to (count, 1, X, Y) source and target arrays."""
    rng = Rng(seed)
    pairs = [gen_synthetic_pair(rng.child(i), X, Y, dtype) for i in range(count)]
    return np.stack([p.source for p in pairs]), np.stack([p.target for p in pairs])


# ---------------------------------------------------------------------------
# On-disk dataset: PTT1 volumes + JSON manifest
# ---------------------------------------------------------------------------


def generate_dataset(out_dir, volumes: int, X: int, Y: int, seed: int, depth: int = 8) -> list[dict]:
    """Write synthetic source/target volumes (X, Y, depth), a sidecar and a manifest.

    Returns the manifest: one entry per slice with
    ``{id, split, path_source, path_target, z_index}``; paths are relative
    to the manifest's directory.
    """
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    ids = [f"vol{i:04d}" for i in range(volumes)]
    train, val, test = split_dataset(ids, seed)
    split_of = {**{i: "train" for i in train}, **{i: "val" for i in val}, **{i: "test" for i in test}}
    rng = Rng(seed)
    manifest, sidecar = [], []
    for vi, vid in enumerate(ids):
        vrng = rng.child(vi)
        pairs = [gen_synthetic_pair(vrng.child(z), X, Y) for z in range(depth)]
        src = np.stack([p.source[0] for p in pairs], axis=-1)
        tgt = np.stack([p.target[0] for p in pairs], axis=-1)
        ps, pt = f"volumes/{vid}_source.ptt", f"volumes/{vid}_target.ptt"
        save_tensor(out / ps, src)
        save_tensor(out / pt, tgt)
        sidecar.append({
            "id": vid, "split": split_of[vid],
            "source": {"min": float(src.min()), "max": float(src.max())},
            "target": {"min": float(tgt.min()), "max": float(tgt.max())},
        })
        for z in range(depth):
            manifest.append({"id": vid, "split": split_of[vid], "path_source": ps, "path_target": pt, "z_index": z})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (out / "volumes.json").write_text(json.dumps(sidecar, indent=1) + "\n")
    return manifest


def read_manifest(path) -> tuple[list[dict], Path]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    required = {"id", "split", "path_source", "path_target", "z_index"}
    for e in entries:
        if not required <= set(e):
            raise DataError(f"{path}: manifest entry missing keys {sorted(required - set(e))}")
    return entries, path.parent


class VolumeCache:
    def __init__(self, root: Path):
        self.root = root
        self._cache: dict[str, np.ndarray] = {}

    def get(self, rel: str) -> np.ndarray:
        if rel not in self._cache:
            p = self.root / rel
            if not p.exists():
                raise DataError(f"volume file not found: {p}")
            self._cache[rel] = load_tensor(p)
        return self._cache[rel]


def load_split(entries: list[dict], root: Path, split: str):
    """Stack the slices of one split: (source, target, volume ids, z indices)."""
    cache = VolumeCache(root)
    rows = [e for e in entries if e["split"] == split]
    if not rows:
        return None
    src = np.stack([cache.get(e["path_source"])[:, :, e["z_index"]][None] for e in rows]).astype(np.float32)
    tgt = np.stack([cache.get(e["path_target"])[:, :, e["z_index"]][None] for e in rows]).astype(np.float32)
    return src, tgt, [e["id"] for e in rows], [int(e["z_index"]) for e in rows]
