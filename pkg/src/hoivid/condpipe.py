"""Condition signals: motion boxes, fused masks, point-cloud prep, tracking videos, dataset shards."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .numerics import blob

QUANT = 4096.0


class NoMotion(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Bbox:
    frame: int
    x0: int
    y0: int
    x1: int  # exclusive
    y1: int  # exclusive

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    def iou(self, other: "Bbox") -> float:
        ix = max(0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        union = (self.x1 - self.x0) * (self.y1 - self.y0) + (other.x1 - other.x0) * (other.y1 - other.y0) - inter
        return inter / union if union else 0.0


@dataclass(frozen=True)
class NormTransform:
    translation: np.ndarray
    scale: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (pts + self.translation) * self.scale


def _motion_box(diff: np.ndarray, dilate_r: int, frame: int) -> Bbox | None:
    if not diff.any():
        return None
    grown = ndimage.binary_dilation(diff, structure=np.ones((2 * dilate_r + 1,) * 2, dtype=bool)) if dilate_r else diff
    labels, n = ndimage.label(grown)  # 4-connectivity
    counts = np.bincount(labels[diff], minlength=n + 1)
    counts[0] = 0
    best = int(counts.argmax())
    ys, xs = np.nonzero(diff & (labels == best))
    return Bbox(frame, int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def bbox_from_frame_difference(frames: np.ndarray, tau: float = 0.05, dilate_r: int = 1) -> list[Bbox]:
    """One motion box per frame from thresholded inter-frame differences.

    Dilation only links nearby difference pixels into components; the box
    is fitted to the undilated pixels of the component holding the most of
    them. Frame 0 copies frame 1; frames without motion reuse the nearest
    earlier box (or the first later one).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise ValueError(f"need a T x H x W x 3 video with T >= 2, got {frames.shape}")
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {tau}")
    diffs = np.abs(np.diff(frames, axis=0)).max(axis=-1) > tau
    boxes: list[Bbox | None] = [None] + [_motion_box(d, dilate_r, t + 1) for t, d in enumerate(diffs)]
    if all(b is None for b in boxes[1:]):
        raise NoMotion(f"no inter-frame difference exceeds tau={tau}")
    out: list[Bbox] = []
    for t in range(len(boxes)):
        b = boxes[t] if t > 0 else boxes[1]
        if b is None:
            src = next((boxes[s] for s in range(t - 1, 0, -1) if boxes[s] is not None), None)
            if src is None:
                src = next(boxes[s] for s in range(t + 1, len(boxes)) if boxes[s] is not None)
            b = src
        out.append(Bbox(t, b.x0, b.y0, b.x1, b.y1))
    return out


def mask_bbox(mask: np.ndarray, frame: int = 0) -> Bbox | None:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return Bbox(frame, int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def fuse_masks(hand: np.ndarray, obj: np.ndarray) -> np.ndarray:
    hand, obj = np.asarray(hand), np.asarray(obj)
    if hand.shape != obj.shape:
        raise ValueError(f"mask shapes differ: {hand.shape} vs {obj.shape}")
    return (hand != 0) | (obj != 0)


def normalize_pointcloud_sequence(points: np.ndarray) -> tuple[np.ndarray, NormTransform]:
    """Centre on the frame-0 centroid and scale frame 0's largest axis extent to 1.

    The same transform is applied to every frame so motion survives.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 3 or points.shape[-1] != 3:
        raise ValueError(f"expected T x N x 3 points, got {points.shape}")
    p0 = points[0]
    if len(p0) == 0:
        raise ValueError("frame-0 point cloud is empty")
    t = -p0.mean(axis=0)
    extent = float((p0.max(axis=0) - p0.min(axis=0)).max())
    tr = NormTransform(t, 1.0 / max(1e-6, extent))
    return tr.apply(points), tr


def _lex_first(pts: np.ndarray, candidates: np.ndarray) -> int:
    c = pts[candidates]
    return int(candidates[np.lexsort((c[:, 2], c[:, 1], c[:, 0]))[0]])


def farthest_point_indices(pts: np.ndarray, n: int) -> np.ndarray:
    """Greedy FPS seeded at the point nearest the centroid.

    Ties are broken by lexicographic coordinate order, so the selected
    point set does not depend on input order.
    """
    d0 = ((pts - pts.mean(axis=0)) ** 2).sum(axis=1)
    first = _lex_first(pts, np.flatnonzero(d0 == d0.min()))
    chosen = [first]
    dist = ((pts - pts[first]) ** 2).sum(axis=1)
    for _ in range(n - 1):
        far = _lex_first(pts, np.flatnonzero(dist == dist.max()))
        chosen.append(far)
        dist = np.minimum(dist, ((pts - pts[far]) ** 2).sum(axis=1))
    return np.array(chosen, dtype=np.int64)


def resample_points(points: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Fix the cloud size at ``n``: FPS when there are at least ``n`` points, cyclic padding otherwise.

    ``seed`` is accepted for interface symmetry; the procedure is deterministic.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("need a non-empty M x 3 point set")
    if len(points) < n:
        return points[np.arange(n) % len(points)].copy()
    return points[farthest_point_indices(points, n)]


def track_colors(tracks3d: np.ndarray) -> np.ndarray:
    """RGB per track from its frame-0 position, min-max normalised per axis into [0.2, 1]."""
    p0 = tracks3d[:, 0]
    lo, hi = p0.min(axis=0), p0.max(axis=0)
    span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
    u = np.where(hi - lo > 1e-12, (p0 - lo) / span, 0.5)
    return np.round((0.2 + 0.8 * u) * QUANT) / QUANT


def render_tracking_video(tracks3d: np.ndarray, visibility: np.ndarray, camera, height: int, width: int) -> np.ndarray:
    """Draw each visible track as a radius-1 dot on black; nearer tracks win."""
    K, T = visibility.shape
    video = np.zeros((T, height, width, 3))
    if K == 0:
        return video
    colors = track_colors(tracks3d)
    uv = camera.project(tracks3d)
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    for t in range(T):
        zbuf = np.full((height, width), np.inf)
        for k in np.flatnonzero(visibility[:, t]):
            u, v = uv[k, t]
            disc = (xx - u) ** 2 + (yy - v) ** 2 <= 1.0
            win = disc & (tracks3d[k, t, 2] < zbuf)
            zbuf[win] = tracks3d[k, t, 2]
            video[t][win] = colors[k]
    return video


# -- dataset shards ------------------------------------------------------------

RECORD_FIELDS = ("image", "frames", "fused_masks", "pointclouds", "tracking")


@dataclass
class DatasetShard:
    records: list[dict] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> dict:
        return self.records[i]


def build_record(sample, name: str | None = None) -> dict:
    """Training record from a scene sample (hybrids keep ``frames`` as None)."""
    pcs, tr = normalize_pointcloud_sequence(sample.pointclouds)
    cam = sample.spec.camera
    rec = {
        "image": sample.image,
        "frames": sample.frames,
        "fused_masks": sample.fused_masks.astype(np.uint8),
        "pointclouds": pcs,
        "tracking": render_tracking_video(sample.tracks3d, sample.visibility, cam, cam.height, cam.width),
        "meta": {
            "name": name or f"seed{sample.spec.seed}",
            "spec": sample.spec.to_dict(),
            "norm_translation": tr.translation.tolist(),
            "norm_scale": tr.scale,
            "has_ground_truth": sample.has_ground_truth,
            "n_tracks": int(len(sample.track_host)),
        },
    }
    return rec


def _dims(rec: dict) -> dict:
    T, H, W, _ = rec["tracking"].shape
    K = int(rec.get("meta", {}).get("n_tracks", 0))
    return {"T": T, "H": H, "W": W, "N": int(rec["pointclouds"].shape[1]), "K": K}


def write_dataset(records: list[dict], directory) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dims = _dims(records[0]) if records else {}
    entries = []
    for i, rec in enumerate(records):
        if _dims(rec) != dims:
            raise DatasetError(f"record {i} has dims {_dims(rec)}, shard has {dims}")
        name = f"rec_{i:04d}"
        (d / name).mkdir(exist_ok=True)
        blobs = {}
        for key in RECORD_FIELDS:
            arr = rec.get(key)
            if arr is None:
                continue
            data = blob.save(d / name / f"{key}.blob", np.asarray(arr))
            blobs[key] = {
                "file": f"{name}/{key}.blob",
                "shape": list(np.shape(arr)),
                "sha256": hashlib.sha256(data).hexdigest(),
            }
        entries.append({"name": name, "blobs": blobs, "meta": rec.get("meta", {})})
    manifest = {"format": "hoivid-dataset/1", "count": len(records), "dims": dims, "records": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_dataset(directory) -> DatasetShard:
    d = Path(directory)
    path = d / "manifest.json"
    if not path.exists():
        raise DatasetError(f"{d}: no manifest.json")
    manifest = json.loads(path.read_text())
    if manifest.get("count") != len(manifest.get("records", [])):
        raise DatasetError(f"{d}: manifest count {manifest.get('count')} != {len(manifest.get('records', []))} entries")
    records = []
    for entry in manifest["records"]:
        rec = {"meta": entry.get("meta", {}), "frames": None}
        for key, info in entry["blobs"].items():
            fp = d / info["file"]
            if not fp.exists():
                raise DatasetError(f"record {entry['name']}: missing blob {info['file']}")
            data = fp.read_bytes()
            if hashlib.sha256(data).hexdigest() != info["sha256"]:
                raise DatasetError(f"record {entry['name']}: checksum mismatch for {info['file']}")
            arr = blob.from_bytes(data)
            if list(arr.shape) != info["shape"]:
                raise DatasetError(f"record {entry['name']}: {key} has shape {arr.shape}, manifest says {info['shape']}")
            rec[key] = arr
        if _dims(rec) != manifest["dims"]:
            raise DatasetError(f"record {entry['name']}: dims {_dims(rec)} differ from shard dims {manifest['dims']}")
        records.append(rec)
    return DatasetShard(records, manifest)
