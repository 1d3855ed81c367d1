"""Scene sample directories: PPM frames for viewing, blobs for exact data."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..numerics import blob
from .scene import SceneSample, SceneSpec

_ARRAYS = (
    "image", "frames", "hand_masks", "object_masks", "fused_masks", "depth",
    "pointclouds", "tracks3d", "tracks2d", "visibility", "track_body", "track_host",
)
_BOOL = {"hand_masks", "object_masks", "fused_masks", "visibility"}


def write_ppm(path, frame: np.ndarray) -> None:
    """Binary P6, 8 bits per channel."""
    img = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    img = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / maxval


def dump_frames(directory, video: np.ndarray, prefix: str = "frame") -> list[str]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for t, frame in enumerate(video):
        name = f"{prefix}_{t:03d}.ppm"
        write_ppm(d / name, frame)
        names.append(name)
    return names


def save_sample(sample: SceneSample, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in _ARRAYS:
        arr = getattr(sample, name)
        if arr is None:
            continue
        arr = np.asarray(arr)
        if name in _BOOL or name == "track_host":
            arr = arr.astype(np.uint8)
        blob.save(d / f"{name}.blob", arr)
        files[name] = f"{name}.blob"
    ppm = dump_frames(d, sample.frames) if sample.frames is not None else []
    manifest = {
        "kind": "scene_sample",
        "spec": sample.spec.to_dict(),
        "has_ground_truth": sample.has_ground_truth,
        "blobs": files,
        "ppm_frames": ppm,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_sample(directory) -> SceneSample:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    kw = {}
    for name in _ARRAYS:
        fn = manifest["blobs"].get(name)
        if fn is None:
            kw[name] = None
            continue
        arr = blob.load(d / fn)
        if name in _BOOL:
            arr = arr.astype(bool)
        elif name == "track_host":
            arr = arr.astype(np.int64)
        kw[name] = arr
    return SceneSample(spec=SceneSpec.from_dict(manifest["spec"]), **kw)
