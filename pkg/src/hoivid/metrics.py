"""Video quality metrics with full-frame and masked protocols, plus a Fréchet distance core.

Videos are ``T x H x W x 3`` arrays in [0, 1]; masks are ``T x H x W``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PSNR_SENTINEL = 99.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
TEMPORAL_TAPS = 3
TEMPORAL_SIGMA = 1.0
C1 = 0.01**2
C2 = 0.03**2
GMSD_C = 170.0 / 255.0**2
GRAY = np.array([0.299, 0.587, 0.114])
PAD_MODE = "reflect"

COLUMNS = ("video", "protocol", "l1", "psnr", "ssim", "st_ssim", "gmsd_t")


class MetricError(ValueError):
    pass


def _pair(gen, ref) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(gen, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"video shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _mask(mask, shape: tuple[int, ...]) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask) != 0
    if m.shape != shape:
        raise MetricError(f"mask shape {m.shape} does not match {shape}")
    if not m.any():
        raise MetricError("mask is empty")
    return m


def gray(video: np.ndarray) -> np.ndarray:
    return np.asarray(video, dtype=np.float64) @ GRAY


def gaussian_taps(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def l1(gen, ref, mask=None) -> float:
    """Mean absolute error on the 0-255 scale."""
    a, b = _pair(gen, ref)
    err = np.abs(a - b)
    m = _mask(mask, a.shape[:-1]) if a.ndim == 4 else _mask(mask, a.shape)
    if m is not None:
        err = err[m]
    return float(err.mean() * 255.0)


def mse(gen, ref, mask=None) -> float:
    a, b = _pair(gen, ref)
    err = (a - b) ** 2
    m = _mask(mask, a.shape[:-1]) if a.ndim == 4 else _mask(mask, a.shape)
    if m is not None:
        err = err[m]
    return float(err.mean())


def psnr(gen, ref, mask=None) -> float:
    """``10 log10(1 / MSE)`` over the whole video (or mask pixels); 99.0 when identical."""
    e = mse(gen, ref, mask)
    if e == 0.0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(1.0 / e)


def _ssim_map(x: np.ndarray, y: np.ndarray, taps: list[np.ndarray]) -> np.ndarray:
    """SSIM map under a separable window, one tap vector per array axis."""

    def blur(a):
        for axis, k in enumerate(taps):
            a = ndimage.correlate1d(a, k, axis=axis, mode=PAD_MODE)
        return a

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    return ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))


def _masked_mean(values: np.ndarray, m: np.ndarray | None) -> float:
    return float(values.mean() if m is None else values[m].mean())


def ssim_frames(gen, ref) -> np.ndarray:
    """Per-frame SSIM maps ``T x H x W`` on grayscale."""
    a, b = _pair(gen, ref)
    if a.shape[1] < SSIM_WINDOW or a.shape[2] < SSIM_WINDOW:
        raise MetricError(f"frames {a.shape[1]}x{a.shape[2]} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA)
    ga, gb = gray(a), gray(b)
    return np.stack([_ssim_map(ga[t], gb[t], [g, g]) for t in range(len(ga))])


def ssim(gen, ref, mask=None) -> float:
    """Per-frame mean SSIM (over the frame or its mask pixels), averaged over frames.

    With a mask, frames whose mask is empty are skipped.
    """
    maps = ssim_frames(gen, ref)
    m = _mask(mask, maps.shape)
    vals = [_masked_mean(maps[t], None if m is None else m[t]) for t in range(len(maps)) if m is None or m[t].any()]
    return float(np.mean(vals))


def st_ssim(gen, ref, mask=None) -> float:
    """SSIM with a separable 3D window (3 temporal taps, 7x7 spatial) averaged over the volume."""
    a, b = _pair(gen, ref)
    if a.shape[0] < TEMPORAL_TAPS:
        raise MetricError(f"need at least {TEMPORAL_TAPS} frames, got {a.shape[0]}")
    if a.shape[1] < SSIM_WINDOW or a.shape[2] < SSIM_WINDOW:
        raise MetricError(f"frames {a.shape[1]}x{a.shape[2]} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA)
    k = gaussian_taps(TEMPORAL_TAPS, TEMPORAL_SIGMA)
    q = _ssim_map(gray(a), gray(b), [k, g, g])
    return _masked_mean(q, _mask(mask, q.shape))


_PREWITT = np.array([[1.0, 0.0, -1.0]] * 3) / 3.0


def _grad_mag(img: np.ndarray) -> np.ndarray:
    gx = ndimage.correlate(img, _PREWITT, mode=PAD_MODE)
    gy = ndimage.correlate(img, _PREWITT.T, mode=PAD_MODE)
    return np.sqrt(gx * gx + gy * gy)


def gmsd_t(gen, ref, mask=None) -> float:
    """Gradient-magnitude similarity deviation on temporal-difference frames; lower is better.

    The masked variant uses the mask of the later frame of each pair and
    skips pairs whose mask is empty.
    """
    a, b = _pair(gen, ref)
    if a.shape[0] < 2:
        raise MetricError(f"need at least 2 frames, got {a.shape[0]}")
    m = _mask(mask, a.shape[:-1])
    da, db = np.diff(gray(a), axis=0), np.diff(gray(b), axis=0)
    vals = []
    for t in range(len(da)):
        if m is not None and not m[t + 1].any():
            continue
        gr, gd = _grad_mag(db[t]), _grad_mag(da[t])
        s = (2 * gr * gd + GMSD_C) / (gr * gr + gd * gd + GMSD_C)
        vals.append(float(s.std() if m is None else s[m[t + 1]].std()))
    if not vals:
        raise MetricError("mask is empty on every frame after the first")
    return float(np.mean(vals))


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(features_a, features_b) -> float:
    """Squared 2-Wasserstein distance between Gaussians fitted to two feature sets."""
    fa = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    fb = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise MetricError(f"need at least 2 samples per set, got {fa.shape[0]} and {fb.shape[0]}")
    if fa.shape[1] != fb.shape[1]:
        raise MetricError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    mu = fa.mean(axis=0) - fb.mean(axis=0)
    sa = np.atleast_2d(np.cov(fa, rowvar=False))
    sb = np.atleast_2d(np.cov(fb, rowvar=False))
    ra = _sqrtm_psd(sa)
    cross = np.trace(_sqrtm_psd(ra @ sb @ ra))
    return float(max(0.0, mu @ mu + np.trace(sa) + np.trace(sb) - 2.0 * cross))


# -- reports -------------------------------------------------------------------


def _row(name: str, protocol: str, gen, ref, mask) -> dict:
    return {
        "video": name,
        "protocol": protocol,
        "l1": l1(gen, ref, mask),
        "psnr": psnr(gen, ref, mask),
        "ssim": ssim(gen, ref, mask),
        "st_ssim": st_ssim(gen, ref, mask),
        "gmsd_t": gmsd_t(gen, ref, mask),
    }


def report_header() -> str:
    return (
        f"# ssim_window={SSIM_WINDOW} ssim_sigma={SSIM_SIGMA} temporal_taps={TEMPORAL_TAPS} "
        f"temporal_sigma={TEMPORAL_SIGMA} c1={C1} c2={C2} gmsd_c={GMSD_C!r} pad={PAD_MODE} "
        f"psnr_sentinel={PSNR_SENTINEL}"
    )


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    frechet: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, gen, ref, masks) -> None:
        self.rows.append(_row(name, "full", gen, ref, None))
        self.rows.append(_row(name, "masked", gen, ref, masks))

    def get(self, name: str, protocol: str) -> dict:
        for r in self.rows:
            if r["video"] == name and r["protocol"] == protocol:
                return r
        raise KeyError((name, protocol))

    def aggregate(self) -> list[dict]:
        out = []
        for protocol in ("full", "masked"):
            rows = [r for r in self.rows if r["protocol"] == protocol and r["video"] != "mean"]
            if rows:
                agg = {"video": "mean", "protocol": protocol}
                agg.update({k: float(np.mean([r[k] for r in rows])) for k in COLUMNS[2:]})
                out.append(agg)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(report_header() + "\n")
        w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows + self.aggregate():
            w.writerow({k: (repr(float(r[k])) if k in COLUMNS[2:] else r[k]) for k in COLUMNS})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
        rows = []
        for r in csv.DictReader(lines):
            if r["video"] == "mean":
                continue
            rows.append({k: (float(r[k]) if k in COLUMNS[2:] else r[k]) for k in COLUMNS})
        return cls(rows)


def evaluate_pair(gen_video, ref_video, fused_masks, name: str = "video") -> MetricReport:
    """All metrics under the full-frame and hand-object-masked protocols."""
    _pair(gen_video, ref_video)
    rep = MetricReport()
    rep.add(name, gen_video, ref_video, fused_masks)
    return rep
