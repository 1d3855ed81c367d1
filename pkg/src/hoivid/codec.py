"""Invertible space-to-depth video codec.

Stands in for a learned video VAE: every ``g x p x p`` block of pixels
becomes one latent token with ``3 * p * p * g`` channels, affinely mapped
from [0, 1] to [-1, 1]. Channel order inside a token is (dt, dy, dx, rgb).

Round trips are bit-exact for pixel values on the 2**-53 grid (which
covers uniform draws and the dyadic levels the scene renderer emits);
for other doubles the affine shift can round.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import blob


class CodecError(ValueError):
    pass


@dataclass
class LatentGrid:
    tokens: np.ndarray  # (T', h, w, c)
    patch: int
    group: int
    frames: int  # true T before temporal padding
    height: int
    width: int

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.tokens.shape

    def meta(self) -> dict:
        return {"p": self.patch, "g": self.group, "T": self.frames, "H": self.height, "W": self.width}

    def save(self, path) -> None:
        path = Path(path)
        blob.save(path.with_suffix(".blob"), self.tokens)
        path.with_suffix(".json").write_text(json.dumps(self.meta(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "LatentGrid":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(blob.load(path.with_suffix(".blob")), meta["p"], meta["g"], meta["T"], meta["H"], meta["W"])


def latent_channels(patch: int, group: int) -> int:
    return 3 * patch * patch * group


def _pad_time(x: np.ndarray, group: int) -> np.ndarray:
    extra = (-x.shape[0]) % group
    if extra:
        x = np.concatenate([x, np.repeat(x[-1:], extra, axis=0)], axis=0)
    return x


def _check_dims(T: int, H: int, W: int, p: int, g: int) -> None:
    if p < 1 or g < 1:
        raise CodecError(f"patch and group must be positive, got p={p}, g={g}")
    if T < 1:
        raise CodecError("video has no frames")
    if H % p:
        raise CodecError(f"height H={H} is not divisible by patch size p={p}")
    if W % p:
        raise CodecError(f"width W={W} is not divisible by patch size p={p}")


def encode_video(video: np.ndarray, p: int = 4, g: int = 1) -> LatentGrid:
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4 or video.shape[-1] != 3:
        raise CodecError(f"expected T x H x W x 3 video, got shape {video.shape}")
    T, H, W, _ = video.shape
    _check_dims(T, H, W, p, g)
    x = _pad_time(video, g)
    tp, h, w = x.shape[0] // g, H // p, W // p
    x = x.reshape(tp, g, h, p, w, p, 3).transpose(0, 2, 4, 1, 3, 5, 6)
    tokens = (x.reshape(tp, h, w, g * p * p * 3) - 0.5) * 2.0
    return LatentGrid(np.ascontiguousarray(tokens), p, g, T, H, W)


def decode_latent(grid: LatentGrid) -> np.ndarray:
    p, g = grid.patch, grid.group
    tok = np.asarray(grid.tokens, dtype=np.float64)
    if tok.ndim != 4:
        raise CodecError(f"latent tokens must be 4-d, got shape {tok.shape}")
    tp, h, w, c = tok.shape
    if c != latent_channels(p, g):
        raise CodecError(f"channel count {c} inconsistent with p={p}, g={g}")
    if h * p != grid.height or w * p != grid.width:
        raise CodecError(f"grid {h}x{w} with p={p} inconsistent with frame size {grid.height}x{grid.width}")
    if tp != -(-grid.frames // g):
        raise CodecError(f"{tp} latent frames inconsistent with T={grid.frames}, g={g}")
    x = tok.reshape(tp, h, w, g, p, p, 3).transpose(0, 3, 1, 4, 2, 5, 6)
    x = x.reshape(tp * g, h * p, w * p, 3)[: grid.frames]
    return np.clip(x / 2.0 + 0.5, 0.0, 1.0)


def like(grid: LatentGrid, tokens: np.ndarray) -> LatentGrid:
    """A grid with ``grid``'s metadata and new token values."""
    return LatentGrid(np.asarray(tokens, dtype=np.float64), grid.patch, grid.group, grid.frames, grid.height, grid.width)


def downsample_mask(masks: np.ndarray, p: int = 4, g: int = 1) -> np.ndarray:
    """OR-pool a T x H x W binary mask stack to the latent grid (T' x h x w)."""
    m = np.asarray(masks)
    if m.ndim != 3:
        raise CodecError(f"expected T x H x W masks, got shape {m.shape}")
    T, H, W = m.shape
    _check_dims(T, H, W, p, g)
    m = _pad_time(m != 0, g)
    tp, h, w = m.shape[0] // g, H // p, W // p
    return m.reshape(tp, g, h, p, w, p).any(axis=(1, 3, 5)).astype(np.float64)
