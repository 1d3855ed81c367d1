"""Noise schedule, masked x0 objective, control-branch training loop and ancestral sampler."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import codec
from . import control3d as c3
from .numerics import gradcheck
from .numerics import tensor as T
from .numerics.optim import AdamWState, adamw_step
from .numerics.rng import stream
from .numerics.tensor import Tensor


class DiffusionError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step


class BackboneMutated(RuntimeError):
    pass


# -- schedule ------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    num_train_steps: int = 1000
    kind: str = "cosine"
    offset: float = 0.008
    max_beta: float = 0.999
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_train_steps < 1:
            raise DiffusionError("num_train_steps must be positive")
        if self.kind == "cosine":
            n, s = self.num_train_steps, self.offset
            f = np.cos((np.arange(n + 1) / n + s) / (1 + s) * math.pi / 2) ** 2
            betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, self.max_beta)
        elif self.kind == "linear":
            betas = np.linspace(1e-4, 0.02, self.num_train_steps)
        else:
            raise DiffusionError(f"unknown schedule kind {self.kind!r}")
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - betas))

    def at(self, t: int) -> float:
        if not 0 <= t < self.num_train_steps:
            raise DiffusionError(f"timestep {t} outside [0, {self.num_train_steps})")
        return float(self.alpha_bar[t])

    def strided(self, num_steps: int) -> np.ndarray:
        """Descending, uniformly spaced timesteps ending at 0."""
        if not 1 <= num_steps <= self.num_train_steps:
            raise DiffusionError(f"num_steps={num_steps} must lie in [1, {self.num_train_steps}]")
        ts = np.round(np.linspace(self.num_train_steps - 1, 0, num_steps)).astype(np.int64)
        return ts


def noise_with(x0, eps, alpha_bar: float) -> np.ndarray:
    return math.sqrt(alpha_bar) * np.asarray(x0) + math.sqrt(1.0 - alpha_bar) * np.asarray(eps)


def add_noise(x0, eps, t: int, schedule: NoiseSchedule) -> np.ndarray:
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DiffusionError(f"noise shape {eps.shape} != latent shape {x0.shape}")
    return noise_with(x0, eps, schedule.at(t))


def masked_diffusion_loss(pred_x0, x0, latent_mask) -> Tensor:
    """Mean of ``((x0 - pred) * (1 + M))**2``; ``M`` broadcasts over channels."""
    pred = T.as_tensor(pred_x0)
    x0 = np.asarray(x0, dtype=np.float64)
    m = np.asarray(latent_mask, dtype=np.float64)
    if pred.shape != x0.shape:
        raise DiffusionError(f"prediction {pred.shape} and target {x0.shape} differ")
    if not np.isin(m, (0.0, 1.0)).all():
        raise DiffusionError("loss mask must be binary")
    if m.ndim == x0.ndim - 1:
        m = m[..., None]
    try:
        w = np.broadcast_to(1.0 + m, x0.shape)
    except ValueError:
        raise DiffusionError(f"mask {np.shape(latent_mask)} does not broadcast to {x0.shape}") from None
    return T.mean(T.square(T.mul(T.sub(Tensor(x0), pred), Tensor(w))))


# -- data ----------------------------------------------------------------------


@dataclass
class Conditions:
    pointclouds: np.ndarray  # T x N x 3, normalised
    tracking: np.ndarray  # T x H x W x 3 tracking video


@dataclass
class LatentItem:
    image: np.ndarray  # 1 x h x w x c
    tracking: np.ndarray  # T' x h x w x c
    points: np.ndarray  # T x N x 3
    x0: np.ndarray | None  # T' x h x w x c, None without ground truth
    mask: np.ndarray | None  # T' x h x w
    grid: codec.LatentGrid  # metadata for decoding


def encode_image(image: np.ndarray, patch: int, group: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    return codec.encode_video(img, patch, group).tokens[:1]


def latent_item(record: dict, patch: int = 4, group: int = 1) -> LatentItem:
    track = codec.encode_video(record["tracking"], patch, group)
    frames = record.get("frames")
    x0 = codec.encode_video(frames, patch, group).tokens if frames is not None else None
    mask = None
    if frames is not None:
        mask = codec.downsample_mask(np.asarray(record["fused_masks"]), patch, group)
    return LatentItem(
        image=encode_image(record["image"], patch, group),
        tracking=track.tokens,
        points=np.asarray(record["pointclouds"], dtype=np.float64),
        x0=x0,
        mask=mask,
        grid=track,
    )


# -- model call ----------------------------------------------------------------


@dataclass
class Model:
    """Frozen backbone plus an optional control branch."""

    backbone: bb.Params
    bcfg: bb.BackboneConfig
    control: c3.Params | None = None
    ccfg: c3.ControlConfig | None = None


def control_residuals(model: Model, z_pc, z_tracking, noised, image_padded, temb) -> list[Tensor]:
    x = c3.align_conditions(model.control, model.ccfg, z_pc, z_tracking, noised, image_padded)
    return c3.control_forward(model.control, model.bcfg, x, temb)


def predict_x0(model: Model, x_t: np.ndarray, image: np.ndarray, t: int, schedule: NoiseSchedule, cond=None) -> Tensor:
    """Clean-latent estimate at step ``t``; ``cond`` is ``(z_pc, z_tracking)`` or None."""
    bcfg = model.bcfg
    image_padded = bb.pad_image_latent(image, x_t.shape[0])
    tokens = bb.prepare_input(x_t, image)
    temb = bb.embed_time(model.backbone, bcfg, t)
    residuals = None
    if cond is not None and model.control is not None:
        residuals = control_residuals(model, cond[0], cond[1], x_t, image_padded, temb)
    out = bb.backbone_forward(model.backbone, bcfg, tokens, t, residuals=residuals, temb=temb)
    if bcfg.prediction == "eps":
        ab = schedule.at(t)
        out = T.scale(T.sub(Tensor(x_t), T.scale(out, math.sqrt(1.0 - ab))), 1.0 / math.sqrt(ab))
    return out


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 20
    steps: int | None = None  # optimizer steps; overrides epochs when set
    microbatch: int = 1
    accumulation: int = 4
    weight_decay: float = 0.0
    seed: int = 0
    use_mask: bool = True
    drop_pc: bool = False
    drop_tracking: bool = False
    control_sees_latent: bool = True
    patch: int = 4
    group: int = 1

    def __post_init__(self):
        for name in ("lr", "epochs", "microbatch", "accumulation"):
            if getattr(self, name) <= 0:
                raise DiffusionError(f"{name} must be positive")
        if self.steps is not None and self.steps < 0:
            raise DiffusionError("steps must be non-negative")

    @property
    def effective_batch(self) -> int:
        return self.microbatch * self.accumulation

    def total_steps(self, n_records: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * -(-n_records // self.effective_batch)

    def control_config(self, base: c3.ControlConfig | None = None) -> c3.ControlConfig:
        return replace(
            base or c3.ControlConfig(),
            with_latent=self.control_sees_latent,
            drop_pc=self.drop_pc,
            drop_tracking=self.drop_tracking,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    control: c3.Params
    ccfg: c3.ControlConfig
    losses: list[float]
    backbone_checksum: str


def _record_order(rng: np.random.Generator, n: int, count: int) -> list[int]:
    out: list[int] = []
    while len(out) < count:
        out.extend(rng.permutation(n).tolist())
    return out[:count]


def _items_with_truth(dataset, patch: int, group: int) -> list[LatentItem]:
    items = [latent_item(r, patch, group) for r in dataset]
    items = [it for it in items if it.x0 is not None]
    if not items:
        raise DiffusionError("dataset has no records with ground-truth frames")
    return items


def _fit(params: bb.Params, loss_fn, items, cfg: TrainConfig, schedule: NoiseSchedule, tag: str, on_step=None) -> list[float]:
    """Shared loop: accumulate ``loss_fn(item, t, eps)`` gradients, AdamW on ``params``."""
    rng = stream(cfg.seed, "train", tag)
    n_steps = cfg.total_steps(len(items))
    per_step = cfg.effective_batch
    order = _record_order(rng, len(items), n_steps * per_step)
    opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses: list[float] = []
    for step in range(n_steps):
        for p in params.values():
            p.grad = None
        total = 0.0
        for j in range(per_step):
            item = items[order[step * per_step + j]]
            t = int(rng.integers(schedule.num_train_steps))
            eps = rng.standard_normal(item.x0.shape)
            loss = loss_fn(item, t, eps)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(step + 1, value)
            T.backward(T.scale(loss, 1.0 / per_step))
            total += value / per_step
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        adamw_step(params, grads, opt)
        losses.append(total)
        if on_step is not None:
            on_step(step + 1, total)
    return losses


def train(
    dataset,
    backbone_params: bb.Params,
    bcfg: bb.BackboneConfig,
    cfg: TrainConfig,
    out_dir=None,
    control_params: c3.Params | None = None,
    ccfg: c3.ControlConfig | None = None,
    schedule: NoiseSchedule | None = None,
    on_step=None,
) -> TrainResult:
    """Fit the control branch against a frozen backbone."""
    schedule = schedule or NoiseSchedule(bcfg.num_train_steps)
    items = _items_with_truth(dataset, cfg.patch, cfg.group)
    ccfg = cfg.control_config(ccfg)
    if control_params is None:
        control_params = c3.init_controlnet_from_backbone(backbone_params, bcfg, cfg.seed, ccfg)
    before = bb.checksum(backbone_params)
    bb.set_trainable(backbone_params, False)
    bb.set_trainable(control_params, True)
    model = Model(backbone_params, bcfg, control_params, ccfg)

    def loss_fn(item: LatentItem, t: int, eps: np.ndarray) -> Tensor:
        x_t = add_noise(item.x0, eps, t, schedule)
        z_pc = c3.encode_pointcloud(control_params, ccfg, item.points, cfg.group)
        pred = predict_x0(model, x_t, item.image, t, schedule, cond=(z_pc, item.tracking))
        mask = item.mask if cfg.use_mask else np.zeros_like(item.mask)
        return masked_diffusion_loss(pred, item.x0, mask)

    try:
        losses = _fit(control_params, loss_fn, items, cfg, schedule, "control", on_step)
    finally:
        bb.set_trainable(control_params, False)
    after = bb.checksum(backbone_params)
    if after != before:
        raise BackboneMutated("backbone parameters changed during control training")
    if out_dir is not None:
        write_run(out_dir, control_params, ccfg, bcfg, cfg, losses, before)
    return TrainResult(control_params, ccfg, losses, before)


def pretrain_backbone(
    dataset,
    bcfg: bb.BackboneConfig,
    cfg: TrainConfig,
    params: bb.Params | None = None,
    schedule: NoiseSchedule | None = None,
    on_step=None,
) -> tuple[bb.Params, list[float]]:
    """Fit the unconditioned image-to-video backbone (stands in for a pretrained model)."""
    schedule = schedule or NoiseSchedule(bcfg.num_train_steps)
    items = _items_with_truth(dataset, cfg.patch, cfg.group)
    params = params if params is not None else bb.init_params(bcfg, cfg.seed)
    bb.set_trainable(params, True)
    model = Model(params, bcfg)

    def loss_fn(item: LatentItem, t: int, eps: np.ndarray) -> Tensor:
        x_t = add_noise(item.x0, eps, t, schedule)
        pred = predict_x0(model, x_t, item.image, t, schedule)
        mask = item.mask if cfg.use_mask else np.zeros_like(item.mask)
        return masked_diffusion_loss(pred, item.x0, mask)

    try:
        losses = _fit(params, loss_fn, items, cfg, schedule, "backbone", on_step)
    finally:
        bb.set_trainable(params, False)
    return params, losses


def write_loss_csv(path, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, 1):
            w.writerow([i, repr(float(v))])


def read_loss_csv(path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]


def write_run(out_dir, control_params, ccfg, bcfg, cfg: TrainConfig, losses, backbone_sum: str) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    extra = {"backbone_checksum": backbone_sum, "backbone_config": bcfg.to_dict(), "train_config": cfg.to_dict()}
    c3.save_control(control_params, ccfg, d, extra=extra)
    write_loss_csv(d / "loss.csv", losses)
    (d / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


# -- sampling ------------------------------------------------------------------


def check_conditions(cond: Conditions, frames: int, height: int, width: int) -> None:
    pc = np.asarray(cond.pointclouds)
    tr = np.asarray(cond.tracking)
    if pc.ndim != 3 or pc.shape[0] != frames or pc.shape[-1] != 3:
        raise DiffusionError(f"point clouds {pc.shape} do not match {frames} frames of N x 3 points")
    if tr.shape != (frames, height, width, 3):
        raise DiffusionError(f"tracking video {tr.shape} does not match ({frames}, {height}, {width}, 3)")


def sample_latent(
    model: Model,
    image: np.ndarray,
    conditions: Conditions | None,
    frames: int,
    num_steps: int = 50,
    seed: int = 0,
    schedule: NoiseSchedule | None = None,
    patch: int = 4,
    group: int = 1,
) -> codec.LatentGrid:
    """DDPM ancestral sampling on a strided sub-schedule with clipped x0 estimates."""
    schedule = schedule or NoiseSchedule(model.bcfg.num_train_steps)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 4:
        img = img[0]
    H, W = img.shape[:2]
    z_img = encode_image(img, patch, group)
    tp = -(-frames // group)
    shape = (tp,) + z_img.shape[1:]
    if (tp, *shape[1:3]) != model.bcfg.grid:
        raise DiffusionError(f"latent grid {(tp, *shape[1:3])} does not match backbone grid {model.bcfg.grid}")
    cond = None
    if conditions is not None and model.control is not None:
        check_conditions(conditions, frames, H, W)
        z_pc = c3.encode_pointcloud(model.control, model.ccfg, conditions.pointclouds, group)
        z_tr = codec.encode_video(conditions.tracking, patch, group).tokens
        cond = (z_pc, z_tr)
    rng = stream(seed, "sample")
    x = rng.standard_normal(shape)
    ts = schedule.strided(num_steps)
    for i, t in enumerate(ts):
        x0 = np.clip(predict_x0(model, x, z_img, int(t), schedule, cond).data, -1.0, 1.0)
        if i + 1 == len(ts):
            x = x0
            break
        ab, ab_prev = schedule.at(int(t)), schedule.at(int(ts[i + 1]))
        a = ab / ab_prev
        mean = (math.sqrt(ab_prev) * (1 - a) * x0 + math.sqrt(a) * (1 - ab_prev) * x) / (1 - ab)
        var = (1 - a) * (1 - ab_prev) / (1 - ab)
        x = mean + math.sqrt(max(var, 0.0)) * rng.standard_normal(shape)
    return codec.LatentGrid(x, patch, group, frames, H, W)


def sample(
    backbone_params: bb.Params,
    bcfg: bb.BackboneConfig,
    control_params: c3.Params | None,
    ccfg: c3.ControlConfig | None,
    image: np.ndarray,
    conditions: Conditions | None,
    frames: int = 9,
    num_steps: int = 50,
    seed: int = 0,
    schedule: NoiseSchedule | None = None,
    patch: int = 4,
    group: int = 1,
) -> np.ndarray:
    """Generate a ``T x H x W x 3`` video from the first frame and optional 3D conditions."""
    model = Model(backbone_params, bcfg, control_params, ccfg)
    grid = sample_latent(model, image, conditions, frames, num_steps, seed, schedule, patch, group)
    return codec.decode_latent(grid)


def conditions_from_record(record: dict) -> Conditions:
    return Conditions(np.asarray(record["pointclouds"]), np.asarray(record["tracking"]))


# -- end-to-end gradient oracle --------------------------------------------------


def _tiny_model(rng: np.random.Generator) -> Model:
    bcfg = bb.BackboneConfig(latent_channels=3, grid=(2, 2, 2), d_model=8, heads=2, depth=2, mlp_ratio=2, temb_dim=8)
    ccfg = c3.ControlConfig(tokens=4, d_pc=8, heads=2, octaves=2)
    bp = bb.init_params(bcfg, int(rng.integers(1 << 30)))
    cp = c3.init_controlnet_from_backbone(bp, bcfg, int(rng.integers(1 << 30)), ccfg)
    # move the zero projections off zero so every control weight gets gradient
    for k, p in cp.items():
        if k.startswith("zero."):
            p.data[...] = rng.standard_normal(p.shape) * 0.3
    return Model(bp, bcfg, cp, ccfg)


def end_to_end_gradcheck(n_cases: int = 20, seed: int = 0, h: float = 1e-5) -> float:
    """Worst relative error of the masked loss gradient through control branch and backbone.

    Each case draws a tiny model and data and checks the gradient with
    respect to the prediction and to three control weights.
    """
    schedule = NoiseSchedule(1000)
    worst = 0.0
    for i in range(n_cases):
        rng = stream(seed, "e2e-gradcheck", i)
        model = _tiny_model(rng)
        x0 = rng.uniform(-1, 1, (2, 2, 2, 3))
        x_t = add_noise(x0, rng.standard_normal(x0.shape), int(rng.integers(1000)), schedule)
        image = rng.uniform(-1, 1, (1, 2, 2, 3))
        tracking = rng.uniform(-1, 1, (2, 2, 2, 3))
        points = rng.standard_normal((2, 5, 3)) * 0.5
        mask = (rng.random((2, 2, 2)) < 0.5).astype(np.float64)
        t = int(rng.integers(1000))
        names = ["zero.1.w", "align.w", "pc.queries"]

        def loss_of(*weights):
            cp = dict(model.control)
            cp.update(dict(zip(names, weights)))
            m = Model(model.backbone, model.bcfg, cp, model.ccfg)
            z_pc = c3.encode_pointcloud(cp, m.ccfg, points)
            pred = predict_x0(m, x_t, image, t, schedule, cond=(z_pc, tracking))
            return masked_diffusion_loss(pred, x0, mask)

        worst = max(worst, gradcheck.check(loss_of, [model.control[k].data for k in names], h))
        pred0 = rng.uniform(-1, 1, x0.shape)
        worst = max(worst, gradcheck.check(lambda p: masked_diffusion_loss(p, x0, mask), [pred0], h))
    return worst
