"""Ray-cast z-buffer renderer for spheres and axis-aligned boxes.

Colours are supersampled (``ss x ss`` rays per pixel) with flat colour
times Lambertian shading. Hand and object masks combine z-buffer
ownership of the subsample rays with exact silhouette coverage of each
pixel square, so a pixel touched by a hand/object silhouette is never
dropped unless something else (a distractor) is in front of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HAND, OBJECT, DISTRACTOR = "hand", "object", "distractor"
BACKGROUND = np.array([0.42, 0.47, 0.40])
AMBIENT = 0.35
QUANT = 4096.0  # frames live on a dyadic grid so the codec round-trips exactly


@dataclass(frozen=True)
class Camera:
    f: float = 40.0
    cx: float = 16.0
    cy: float = 16.0
    width: int = 32
    height: int = 32
    height_above_table: float = 3.0
    tilt: float = 0.0  # rotation about the camera x axis, radians

    @property
    def rotation(self) -> np.ndarray:
        # world (x right, y away, z up) -> camera (x right, y down, z forward)
        base = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
        c, s = np.cos(self.tilt), np.sin(self.tilt)
        rx = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
        return rx @ base

    @property
    def translation(self) -> np.ndarray:
        return -self.rotation @ np.array([0.0, 0.0, self.height_above_table])

    def intrinsics(self) -> tuple[float, float, float, int, int]:
        return (self.f, self.cx, self.cy, self.width, self.height)

    def to_camera(self, pts_world: np.ndarray) -> np.ndarray:
        return pts_world @ self.rotation.T + self.translation

    def project(self, pts_cam: np.ndarray) -> np.ndarray:
        """Continuous pixel coordinates (u, v); pixel ``i`` spans ``[i, i+1)``."""
        z = pts_cam[..., 2]
        u = self.f * pts_cam[..., 0] / z + self.cx
        v = self.f * pts_cam[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def rays(self, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
        """Camera-frame ray directions with unit z through pixel coords."""
        return np.stack([(us - self.cx) / self.f, (vs - self.cy) / self.f, np.ones_like(us)], axis=-1)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]  # world
    radius: float
    color: tuple[float, float, float]
    category: str

    def area(self) -> float:
        return 4.0 * np.pi * self.radius**2


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]  # world
    half: tuple[float, float, float]  # half extents along world axes
    color: tuple[float, float, float]
    category: str

    def face_areas(self) -> np.ndarray:
        hx, hy, hz = self.half
        a = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
        return a  # order: -x, +x, -y, +y, -z, +z

    def area(self) -> float:
        return float(self.face_areas().sum())

    def corners(self) -> np.ndarray:
        c, h = np.asarray(self.center), np.asarray(self.half)
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return c + signs * h


@dataclass
class SceneState:
    primitives: list = field(default_factory=list)

    def of(self, *categories: str) -> list:
        return [p for p in self.primitives if p.category in categories]


@dataclass
class RenderResult:
    frame: np.ndarray  # H x W x 3
    depth: np.ndarray  # H x W, inf where background
    hand_mask: np.ndarray  # H x W bool
    object_mask: np.ndarray  # H x W bool
    owner: np.ndarray  # H x W primitive index at pixel centre, -1 background


def _hit_sphere(prim: Sphere, cam: Camera, dirs: np.ndarray):
    c = cam.to_camera(np.asarray(prim.center, dtype=float))
    a = (dirs * dirs).sum(-1)
    b = -2.0 * dirs @ c
    cc = c @ c - prim.radius**2
    disc = b * b - 4 * a * cc
    hit = disc >= 0
    lam = np.full(a.shape, np.inf)
    sq = np.sqrt(np.where(hit, disc, 0.0))
    near = (-b - sq) / (2 * a)
    ok = hit & (near > 1e-9)
    lam[ok] = near[ok]
    pts = dirs * lam[..., None]
    normals = (pts - c) / prim.radius
    return lam, normals


def _hit_box(prim: Box, cam: Camera, dirs: np.ndarray):
    R = cam.rotation
    origin = -R.T @ cam.translation
    dw = dirs @ R  # R^T d, row-wise
    lo = np.asarray(prim.center) - np.asarray(prim.half)
    hi = np.asarray(prim.center) + np.asarray(prim.half)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dw
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_near = tmin.max(-1)
    t_far = tmax.min(-1)
    ok = (t_near <= t_far) & (t_near > 1e-9)
    lam = np.where(ok, t_near, np.inf)
    axis = tmin.argmax(-1)
    sign = -np.sign(np.take_along_axis(dw, axis[..., None], -1)[..., 0])
    nw = np.zeros(dirs.shape)
    np.put_along_axis(nw, axis[..., None], sign[..., None], -1)
    normals = nw @ R.T
    return lam, normals


def intersect(state: SceneState, cam: Camera, dirs: np.ndarray):
    """Nearest hit along each ray: (depth, primitive index or -1, normal)."""
    depth = np.full(dirs.shape[:-1], np.inf)
    owner = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    normal = np.zeros(dirs.shape)
    for k, prim in enumerate(state.primitives):
        lam, n = _hit_sphere(prim, cam, dirs) if isinstance(prim, Sphere) else _hit_box(prim, cam, dirs)
        closer = lam < depth
        depth = np.where(closer, lam, depth)
        owner = np.where(closer, k, owner)
        normal = np.where(closer[..., None], n, normal)
    return depth, owner, normal


def _sphere_coverage(prim: Sphere, cam: Camera) -> np.ndarray:
    """Exact test of each pixel square against the sphere's projected silhouette."""
    c = cam.to_camera(np.asarray(prim.center, dtype=float))
    if c[2] - prim.radius <= 1e-6:
        raise ValueError("sphere crosses the camera plane")
    k = c @ c - prim.radius**2
    W, H = cam.width, cam.height
    xs = (np.arange(W + 1) - cam.cx) / cam.f
    ys = (np.arange(H + 1) - cam.cy) / cam.f

    def edge_max(along, fixed, ca, cf):
        # max over `along` in each [along_i, along_{i+1}] of the concave quadratic in `along`
        B = fixed[:, None] * cf + c[2]
        C = fixed[:, None] ** 2 + 1.0
        a2 = ca * ca - k
        a1 = 2.0 * ca * B
        a0 = B * B - k * C
        lo, hi = along[:-1][None, :], along[1:][None, :]
        if a2 < 0:
            star = np.clip(-a1 / (2 * a2), lo, hi)
            return a2 * star**2 + a1 * star + a0
        qlo = a2 * lo**2 + a1 * lo + a0
        qhi = a2 * hi**2 + a1 * hi + a0
        return np.maximum(qlo, qhi)

    horiz = edge_max(xs, ys, c[0], c[1]) >= 0  # (H+1) x W
    vert = edge_max(ys, xs, c[1], c[0]).T >= 0  # H x (W+1)
    cov = horiz[:-1] | horiz[1:] | vert[:, :-1] | vert[:, 1:]
    u, v = cam.project(c)
    iu, iv = int(np.floor(u)), int(np.floor(v))
    if 0 <= iu < W and 0 <= iv < H:
        cov[iv, iu] = True
    return cov


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    pts = np.unique(pts, axis=0)
    if len(pts) < 3:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _box_coverage(prim: Box, cam: Camera) -> np.ndarray:
    """Separating-axis test of each pixel square against the projected box hull."""
    pc = cam.to_camera(prim.corners())
    if (pc[:, 2] <= 1e-6).any():
        raise ValueError("box crosses the camera plane")
    hull = _convex_hull(cam.project(pc))
    W, H = cam.width, cam.height
    iu = np.arange(W)[None, :].astype(float)
    iv = np.arange(H)[:, None].astype(float)
    cov = (iu + 1 >= hull[:, 0].min()) & (iu <= hull[:, 0].max())
    cov = cov & (iv + 1 >= hull[:, 1].min()) & (iv <= hull[:, 1].max())
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        n = np.array([b[1] - a[1], a[0] - b[0]])
        proj = hull @ n
        base = n[0] * iu + n[1] * iv
        smin = base + min(0.0, n[0]) + min(0.0, n[1])
        smax = base + max(0.0, n[0]) + max(0.0, n[1])
        cov = cov & (smax >= proj.min()) & (smin <= proj.max())
    return cov


def coverage(prim, cam: Camera) -> np.ndarray:
    return _sphere_coverage(prim, cam) if isinstance(prim, Sphere) else _box_coverage(prim, cam)


def render_frame(
    state: SceneState,
    cam: Camera,
    light: np.ndarray,
    ss: int = 4,
    background: np.ndarray = BACKGROUND,
) -> RenderResult:
    """Render one frame.

    ``light`` is the direction towards the light in camera coordinates.
    """
    H, W = cam.height, cam.width
    light = np.asarray(light, dtype=float)
    light = light / np.linalg.norm(light)
    offs = (np.arange(ss) + 0.5) / ss
    vv, uu = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    us = uu[..., None, None] + offs[None, None, None, :]
    vs = vv[..., None, None] + offs[None, None, :, None]
    us, vs = np.broadcast_arrays(us, vs)
    dirs = cam.rays(us, vs)  # H x W x ss x ss x 3
    depth, owner, normal = intersect(state, cam, dirs)

    colors = np.array([p.color for p in state.primitives] + [tuple(background)], dtype=float)
    base = colors[owner]  # owner -1 picks background
    shade = AMBIENT + (1.0 - AMBIENT) * np.clip(normal @ light, 0.0, None)
    rgb = np.where((owner >= 0)[..., None], base * shade[..., None], base)
    frame = rgb.mean(axis=(2, 3))
    frame = np.round(np.clip(frame, 0.0, 1.0) * QUANT) / QUANT

    cats = np.array([p.category for p in state.primitives] + ["background"])
    sub_cat = cats[owner]
    masks = {}
    for cat in (HAND, OBJECT):
        owned = (sub_cat == cat).any(axis=(2, 3))
        allowed = np.isin(sub_cat, (cat, "background")).all(axis=(2, 3))
        cov = np.zeros((H, W), dtype=bool)
        for prim in state.of(cat):
            cov |= coverage(prim, cam)
        masks[cat] = owned | (cov & allowed)

    cdirs = cam.rays(uu + 0.5, vv + 0.5)
    cdepth, cowner, _ = intersect(state, cam, cdirs)
    return RenderResult(frame, cdepth, masks[HAND], masks[OBJECT], cowner)
