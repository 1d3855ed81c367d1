"""Procedural hand-object clips with exact ground truth."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..numerics.rng import stream
from .render import DISTRACTOR, HAND, OBJECT, Box, Camera, SceneState, Sphere, intersect, render_frame

MOTIONS = ("pick_place", "slide", "lift_lower")
SHAPES = ("cuboid", "sphere")
SKIN = (0.86, 0.66, 0.52)

PALM_RADIUS = 0.2
FINGER_RADIUS = 0.08
FINGER_SPREAD = 0.09
OPEN_GAP = 0.16
PALM_BACK = 0.2


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Distractor:
    shape: str
    position: tuple[float, float]  # table xy
    size: float
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    motion: str = "slide"
    shape: str = "cuboid"
    size: tuple[float, float, float] = (0.25, 0.22, 0.18)  # half extents; sphere uses size[0]
    color: tuple[float, float, float] = (0.85, 0.2, 0.15)
    start: tuple[float, float] = (-0.3, 0.15)  # object table position at frame 0
    displacement: tuple[float, float] = (0.5, 0.0)  # in-plane travel (slide, pick_place)
    lift: float = 0.35  # peak height (pick_place, lift_lower)
    grasp_offset: float = PALM_BACK
    distractors: tuple[Distractor, ...] = ()
    camera: Camera = field(default_factory=Camera)
    light: tuple[float, float, float] = (0.4, -0.5, -0.75)  # towards the light, camera frame
    frames: int = 9

    @property
    def height(self) -> int:
        return self.camera.height

    @property
    def width(self) -> int:
        return self.camera.width

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["camera"] = Camera(**d["camera"])
        d["distractors"] = tuple(
            Distractor(x["shape"], tuple(x["position"]), x["size"], tuple(x["color"])) for x in d["distractors"]
        )
        for key in ("size", "color", "start", "displacement", "light"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Pose:
    """Per-frame rigid state: object centre, hand anchor and grip closure in [0, 1]."""

    object_center: np.ndarray
    closure: float
    approach: float  # 0 at grasp, 1 fully withdrawn


@dataclass
class SceneSample:
    spec: SceneSpec
    image: np.ndarray  # H x W x 3, the conditioning frame I_0
    frames: np.ndarray | None  # T x H x W x 3 ground truth; None for hybrids
    hand_masks: np.ndarray  # T x H x W bool
    object_masks: np.ndarray
    fused_masks: np.ndarray
    depth: np.ndarray  # T x H x W
    pointclouds: np.ndarray  # T x N x 3, camera frame
    tracks3d: np.ndarray  # K x T x 3, camera frame
    tracks2d: np.ndarray  # K x T x 2, pixel coords
    visibility: np.ndarray  # K x T bool
    track_body: np.ndarray  # K x 3 fixed offsets in the host's body frame
    track_host: np.ndarray  # K host index (0 object, 1..5 hand spheres)

    @property
    def has_ground_truth(self) -> bool:
        return self.frames is not None


def _smooth(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _seg(s: float, a: float, b: float) -> float:
    return float(_smooth((s - a) / (b - a)))


def object_rest_height(spec: SceneSpec) -> float:
    return spec.size[0] if spec.shape == "sphere" else spec.size[2]


def motion_pose(spec: SceneSpec, t: int) -> Pose:
    """Scripted pose at frame ``t``.

    pick_place: approach, lift, translate, lower. slide: in-plane
    translation while gripped. lift_lower: vertical raise and return.
    """
    s = t / max(spec.frames - 1, 1)
    x0, y0 = spec.start
    dx, dy = spec.displacement
    rest = object_rest_height(spec)
    if spec.motion == "slide":
        return Pose(np.array([x0 + dx * s, y0 + dy * s, rest]), 1.0, 0.0)
    if spec.motion == "lift_lower":
        up = _seg(s, 0.0, 0.5)
        down = _seg(s, 0.5, 1.0)
        return Pose(np.array([x0, y0, rest + spec.lift * (up - down)]), 1.0, 0.0)
    if spec.motion == "pick_place":
        approach = 1.0 - _seg(s, 0.0, 0.25)
        up = _seg(s, 0.25, 0.45)
        move = _seg(s, 0.45, 0.75)
        down = _seg(s, 0.75, 1.0)
        z = rest + spec.lift * (up - down)
        return Pose(np.array([x0 + dx * move, y0 + dy * move, z]), 1.0 - approach, approach)
    raise SceneError(f"unknown motion {spec.motion!r}")


def _contact_depth(spec: SceneSpec, lateral: float) -> float:
    """Distance from object centre (along -y) to a touching finger centre."""
    if spec.shape == "sphere":
        reach = spec.size[0] + FINGER_RADIUS
        return float(np.sqrt(max(reach * reach - lateral * lateral, 0.0)))
    return spec.size[1] + FINGER_RADIUS


def hand_spheres(spec: SceneSpec, pose: Pose) -> list[Sphere]:
    """Palm then four fingers; fingers touch the object's -y side when closed."""
    c = pose.object_center
    open_amt = (1.0 - pose.closure) * OPEN_GAP + pose.approach * 0.35
    lift = pose.approach * 0.25
    spheres = []
    fingers = []
    for i in range(4):
        lat = (i - 1.5) * FINGER_SPREAD
        y = c[1] - _contact_depth(spec, lat) - open_amt
        fingers.append(Sphere((c[0] + lat, y, c[2] + lift), FINGER_RADIUS, SKIN, HAND))
    palm_y = c[1] - _contact_depth(spec, 0.0) - open_amt - spec.grasp_offset
    palm = Sphere((c[0], palm_y, c[2] + 0.05 + lift), PALM_RADIUS, SKIN, HAND)
    spheres.append(palm)
    spheres.extend(fingers)
    return spheres


def object_primitive(spec: SceneSpec, center: np.ndarray):
    if spec.shape == "sphere":
        return Sphere(tuple(center), spec.size[0], spec.color, OBJECT)
    if spec.shape == "cuboid":
        return Box(tuple(center), spec.size, spec.color, OBJECT)
    raise SceneError(f"unknown object shape {spec.shape!r}")


def distractor_primitive(d: Distractor):
    if d.shape == "sphere":
        return Sphere((d.position[0], d.position[1], d.size), d.size, d.color, DISTRACTOR)
    return Box((d.position[0], d.position[1], d.size), (d.size, d.size, d.size), d.color, DISTRACTOR)


def scene_state(spec: SceneSpec, t: int) -> SceneState:
    """Primitives at frame ``t``: object first, then palm and fingers, then distractors."""
    pose = motion_pose(spec, t)
    prims = [object_primitive(spec, pose.object_center)]
    prims += hand_spheres(spec, pose)
    prims += [distractor_primitive(d) for d in spec.distractors]
    return SceneState(prims)


def _object_corners(spec: SceneSpec, center: np.ndarray) -> np.ndarray:
    if spec.shape == "sphere":
        r = spec.size[0]
        return center + np.array([[sx * r, sy * r, sz * r] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    return object_primitive(spec, center).corners()


def validate_spec(spec: SceneSpec) -> None:
    if spec.motion not in MOTIONS:
        raise SceneError(f"unknown motion {spec.motion!r}")
    if spec.shape not in SHAPES:
        raise SceneError(f"unknown object shape {spec.shape!r}")
    if spec.frames < 2:
        raise SceneError("a clip needs at least two frames")
    if len(spec.distractors) > 3:
        raise SceneError("at most three distractors")
    cam = spec.camera
    for t in range(spec.frames):
        pc = cam.to_camera(_object_corners(spec, motion_pose(spec, t).object_center))
        if (pc[:, 2] <= 0.1).any():
            raise SceneError(f"object leaves the view frustum (behind camera) at frame {t}")
        uv = cam.project(pc)
        if (uv < 0).any() or (uv[:, 0] > cam.width).any() or (uv[:, 1] > cam.height).any():
            raise SceneError(f"object leaves the view frustum at frame {t}")


def _sample_on(prim, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform-by-area points on a primitive surface (world frame)."""
    if isinstance(prim, Sphere):
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(prim.center) + prim.radius * d
    areas = prim.face_areas()
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    h = np.asarray(prim.half)
    pts = np.empty((n, 3))
    for f in range(6):
        sel = faces == f
        axis, sign = f // 2, (-1.0 if f % 2 == 0 else 1.0)
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * h[axis]
        pts[sel, others[0]] = uv[sel, 0] * h[others[0]]
        pts[sel, others[1]] = uv[sel, 1] * h[others[1]]
    return np.asarray(prim.center) + pts


def sample_surface_points(state: SceneState, n: int, seed, camera: Camera | None = None) -> np.ndarray:
    """``n`` points uniform by area over hand and object surfaces.

    Points are returned in camera coordinates when ``camera`` is given,
    otherwise in world coordinates.
    """
    if n < 1:
        raise ValueError("need at least one point")
    rng = seed if isinstance(seed, np.random.Generator) else stream(int(seed), "surface")
    prims = state.of(HAND, OBJECT)
    if not prims:
        raise SceneError("no hand or object surfaces to sample")
    areas = np.array([p.area() for p in prims])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = np.concatenate([_sample_on(p, c, rng) for p, c in zip(prims, counts) if c > 0])
    return camera.to_camera(pts) if camera is not None else pts


def _track_anchors(spec: SceneSpec, k: int, rng: np.random.Generator):
    """Host index and body-frame offset per track; half on the object, half on the hand."""
    state0 = scene_state(spec, 0)
    obj = state0.primitives[0]
    hand = state0.primitives[1:6]
    k_obj = k // 2
    hosts = [0] * k_obj
    offsets = [_sample_on(obj, k_obj, rng) - np.asarray(obj.center)] if k_obj else []
    areas = np.array([p.area() for p in hand])
    counts = rng.multinomial(k - k_obj, areas / areas.sum())
    for j, (p, c) in enumerate(zip(hand, counts)):
        if c:
            hosts += [j + 1] * int(c)
            offsets.append(_sample_on(p, int(c), rng) - np.asarray(p.center))
    return np.array(hosts, dtype=np.int64), np.concatenate(offsets) if offsets else np.zeros((0, 3))


def generate_scene(spec: SceneSpec, n_points: int = 256, n_tracks: int = 16, oversample: int = 1) -> SceneSample:
    """Render a clip and its conditions.

    Point clouds draw ``oversample * n_points`` surface points per frame and
    keep ``n_points`` of them (farthest-point sampling when oversampled).
    """
    from ..condpipe import resample_points

    validate_spec(spec)
    cam = spec.camera
    T, H, W = spec.frames, cam.height, cam.width
    frames = np.zeros((T, H, W, 3))
    hand = np.zeros((T, H, W), dtype=bool)
    objm = np.zeros((T, H, W), dtype=bool)
    depth = np.zeros((T, H, W))
    clouds = np.zeros((T, n_points, 3))
    hosts, body = _track_anchors(spec, n_tracks, stream(spec.seed, "tracks"))
    tracks3d = np.zeros((len(hosts), T, 3))
    vis = np.zeros((len(hosts), T), dtype=bool)
    for t in range(T):
        state = scene_state(spec, t)
        r = render_frame(state, cam, np.asarray(spec.light))
        frames[t], hand[t], objm[t], depth[t] = r.frame, r.hand_mask, r.object_mask, r.depth
        pts = sample_surface_points(state, n_points * oversample, stream(spec.seed, "points", t), cam)
        clouds[t] = resample_points(pts, n_points) if oversample > 1 else pts
        centers = np.array([np.asarray(state.primitives[h].center) for h in range(6)])
        world = centers[hosts] + body
        tracks3d[:, t] = cam.to_camera(world)
    tracks2d = cam.project(tracks3d)
    for t in range(T):
        state = scene_state(spec, t)
        dirs = cam.rays(tracks2d[:, t, 0], tracks2d[:, t, 1])
        hit, _, _ = intersect(state, cam, dirs)
        inside = (tracks2d[:, t, 0] >= 0) & (tracks2d[:, t, 0] < W) & (tracks2d[:, t, 1] >= 0) & (tracks2d[:, t, 1] < H)
        vis[:, t] = inside & (hit >= tracks3d[:, t, 2] * (1.0 - 1e-9))
    return SceneSample(
        spec=spec,
        image=frames[0].copy(),
        frames=frames,
        hand_masks=hand,
        object_masks=objm,
        fused_masks=hand | objm,
        depth=depth,
        pointclouds=clouds,
        tracks3d=tracks3d,
        tracks2d=tracks2d,
        visibility=vis,
        track_body=body,
        track_host=hosts,
    )


def make_cross_condition(sample_a: SceneSample, sample_b: SceneSample) -> SceneSample:
    """Appearance from ``sample_b`` frame 0, 3D conditions from ``sample_a``.

    The result carries no ground-truth video unless both are the same clip.
    """
    if sample_a.spec.camera.intrinsics() != sample_b.spec.camera.intrinsics():
        raise SceneError(
            f"incompatible intrinsics {sample_a.spec.camera.intrinsics()} vs {sample_b.spec.camera.intrinsics()}"
        )
    if sample_a.spec == sample_b.spec:
        return dataclasses.replace(sample_a)
    return dataclasses.replace(sample_a, image=sample_b.image.copy(), frames=None)


def random_spec(
    seed: int,
    motion: str | None = None,
    shape: str | None = None,
    frames: int = 9,
    camera: Camera | None = None,
    max_distractors: int = 3,
) -> SceneSpec:
    """A random spec whose object stays in view and whose distractors stay clear of the action."""
    rng = stream(seed, "spec")
    camera = camera or Camera()
    motion = motion or MOTIONS[rng.integers(len(MOTIONS))]
    shape = shape or SHAPES[rng.integers(len(SHAPES))]
    for _ in range(200):
        if shape == "sphere":
            r = rng.uniform(0.2, 0.27)
            size = (r, r, r)
        else:
            size = tuple(rng.uniform([0.18, 0.16, 0.14], [0.28, 0.24, 0.22]))
        hue = rng.uniform(0, 1)
        color = tuple(0.25 + 0.65 * np.clip(np.abs(((hue * 6 + np.array([0, 4, 2])) % 6) - 3) - 1, 0, 1))
        ang = rng.uniform(-0.5, 0.5) + (0.0 if rng.random() < 0.5 else np.pi)
        dist = rng.uniform(0.45, 0.65)
        disp = (dist * np.cos(ang), dist * np.sin(ang)) if motion != "lift_lower" else (0.0, 0.0)
        start = (rng.uniform(-0.45, 0.45) - disp[0] / 2, rng.uniform(-0.2, 0.35) - disp[1] / 2)
        spec = SceneSpec(
            seed=seed, motion=motion, shape=shape, size=size, color=color, start=start,
            displacement=disp, lift=rng.uniform(0.3, 0.45), camera=camera, frames=frames,
        )
        try:
            validate_spec(spec)
        except SceneError:
            continue
        if not _hand_in_view(spec):
            continue
        n_dis = int(rng.integers(0, max_distractors + 1))
        spec = dataclasses.replace(spec, distractors=_place_distractors(spec, n_dis, rng))
        return spec
    raise SceneError(f"could not place a valid scene for seed {seed}")


def _hand_in_view(spec: SceneSpec) -> bool:
    cam = spec.camera
    for t in range(spec.frames):
        for p in scene_state(spec, t).of(HAND):
            c = cam.to_camera(np.asarray(p.center))
            uv = cam.project(c)
            r = cam.f * p.radius / (c[2] - p.radius)
            if (uv - r < 0).any() or uv[0] + r > cam.width or uv[1] + r > cam.height:
                return False
    return True


def _keep_out(spec: SceneSpec) -> np.ndarray:
    """Sphere-bound footprint (x, y, r) of the object and hand at every frame."""
    keep = []
    for t in range(spec.frames):
        for p in scene_state(spec, t).of(HAND) + scene_state(spec, t).of(OBJECT):
            rad = p.radius if isinstance(p, Sphere) else float(np.linalg.norm(p.half[:2]))
            keep.append((p.center[0], p.center[1], rad))
    return np.array(keep)


def _is_clear(keep: np.ndarray, pos, size: float) -> bool:
    clear = np.hypot(keep[:, 0] - pos[0], keep[:, 1] - pos[1]) - keep[:, 2] - size * 1.5
    return not (clear < 0.1).any()


def mirrored_spec(spec: SceneSpec) -> SceneSpec:
    """Same scene and first frame, displacement reversed.

    Raises SceneError when there is nothing to mirror, when the reversed
    motion leaves the view or when it runs into a distractor.
    """
    if spec.displacement[0] == 0 and spec.displacement[1] == 0:
        raise SceneError(f"motion {spec.motion!r} has no horizontal displacement to mirror")
    twin = dataclasses.replace(spec, displacement=(-spec.displacement[0], -spec.displacement[1]))
    validate_spec(twin)
    if not _hand_in_view(twin):
        raise SceneError("mirrored motion takes the hand out of view")
    keep = _keep_out(twin)
    if not all(_is_clear(keep, d.position, d.size) for d in twin.distractors):
        raise SceneError("mirrored motion runs into a distractor")
    return twin


def _place_distractors(spec: SceneSpec, n: int, rng: np.random.Generator) -> tuple[Distractor, ...]:
    cam = spec.camera
    keep = _keep_out(spec)
    placed: list[Distractor] = []
    half_w = 0.5 * cam.width / cam.f * cam.height_above_table
    for _ in range(400):
        if len(placed) == n:
            break
        size = rng.uniform(0.08, 0.15)
        pos = rng.uniform(-half_w + 0.2, half_w - 0.2, size=2)
        if not _is_clear(keep, pos, size):
            continue
        if any(np.hypot(pos[0] - d.position[0], pos[1] - d.position[1]) < size + d.size + 0.1 for d in placed):
            continue
        shape = "sphere" if rng.random() < 0.5 else "cuboid"
        color = tuple(rng.uniform(0.15, 0.35, size=3) + np.array([0.0, 0.0, 0.25]))
        placed.append(Distractor(shape, (float(pos[0]), float(pos[1])), float(size), color))
    return tuple(placed)
