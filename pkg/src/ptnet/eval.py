"""Test-split evaluation: per-volume synthesis, SSIM/pSNR reports and absolute-error maps."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Callable

import numpy as np

from .data import VolumeCache, read_manifest
from .errors import ConfigError, DataError
from .metrics import MetricsReport, abs_error_map, compare_reports, psnr, read_report_csv, ssim
from .model import PTNet, load_checkpoint
from .tensor import save_tensor


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary PGM of a 2-D array in [0, 1] (clipped)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ConfigError(f"PGM needs a 2-D image, got shape {img.shape}")
    pix = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fp:
        fp.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii"))
        fp.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def synthesize_volume(predict: Callable[[np.ndarray], np.ndarray], volume: np.ndarray, batch_size=8) -> np.ndarray:
    """Run ``predict`` on every axial slice of an (X, Y, Z) volume; output clamped to [0, 1]."""
    if volume.ndim != 3:
        raise ConfigError(f"expected an (X, Y, Z) volume, got shape {volume.shape}")
    slices = np.ascontiguousarray(np.moveaxis(volume, -1, 0)[:, None], dtype=np.float32)
    out = np.concatenate([predict(slices[i : i + batch_size]) for i in range(0, len(slices), batch_size)])
    return np.clip(np.moveaxis(out[:, 0], 0, -1), 0.0, 1.0)


def _group_volumes(entries: list[dict], split: str) -> dict[str, list[dict]]:
    vols: dict[str, list[dict]] = defaultdict(list)
    for e in entries:
        if e["split"] == split:
            vols[e["id"]].append(e)
    return {k: sorted(v, key=lambda e: int(e["z_index"])) for k, v in vols.items()}


def evaluate_predictions(
    predict: Callable[[np.ndarray], np.ndarray],
    entries: list[dict],
    root,
    split: str = "test",
    out_dir=None,
    error_maps: bool = False,
    pgm: bool = False,
    batch_size: int = 8,
) -> MetricsReport:
    """Synthesize every slice of ``split``, reassemble volumes and score them against their targets."""
    vols = _group_volumes(entries, split)
    if not vols:
        raise DataError(f"manifest has no {split!r} entries")
    cache = VolumeCache(Path(root))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None and (error_maps or pgm):
        (out / "error_maps").mkdir(parents=True, exist_ok=True)
    report = MetricsReport()
    for vid, rows in vols.items():
        z = [int(e["z_index"]) for e in rows]
        src = cache.get(rows[0]["path_source"])[:, :, z]
        truth = cache.get(rows[0]["path_target"])[:, :, z].astype(np.float64)
        pred = synthesize_volume(predict, src, batch_size).astype(np.float64)
        if pred.shape != truth.shape:
            raise ConfigError(f"volume {vid}: prediction {pred.shape} and target {truth.shape} extents differ")
        report.add(vid, ssim(truth, pred), psnr(truth, pred))
        if out is not None and (error_maps or pgm):
            err = abs_error_map(truth, pred)
            if error_maps:
                save_tensor(out / "error_maps" / f"{vid}.ptt", err)
            if pgm:
                # slices tiled left to right
                write_pgm(out / "error_maps" / f"{vid}.pgm", np.concatenate(np.moveaxis(err, -1, 0), axis=1))
    return report


def model_predictor(model: PTNet) -> Callable[[np.ndarray], np.ndarray]:
    def predict(x):
        y = model.forward(x)
        model.clear_cache()
        return y

    return predict


def evaluate(
    checkpoint,
    manifest,
    out_dir=None,
    split: str = "test",
    compare=None,
    error_maps: bool = False,
    pgm: bool = False,
) -> MetricsReport:
    """Score a checkpoint on a manifest split; writes ``report.csv`` and ``report.json`` when ``out_dir`` is set.

    ``compare`` names another report CSV; paired t-tests over the shared ids
    are attached to the summary.
    """
    model = checkpoint if isinstance(checkpoint, PTNet) else load_checkpoint(checkpoint)[0]
    entries, root = read_manifest(manifest)
    report = evaluate_predictions(model_predictor(model), entries, root, split, out_dir, error_maps, pgm)
    if compare is not None:
        if not Path(compare).is_file():
            raise DataError(f"comparison report not found: {compare}")
        report.comparison = compare_reports(report, read_report_csv(compare))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report.to_csv())
        (out / "report.json").write_text(report.to_json())
    return report
