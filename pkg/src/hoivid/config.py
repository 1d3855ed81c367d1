"""Run configuration: one flat table of documented keys, key=value files, named profiles."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from . import backbone as bb
from . import control3d as c3
from . import diffusion as D
from .scenegen import Camera


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    seed: int = 0
    n: int = 8
    frames: int = 9
    height: int = 32
    width: int = 32
    n_points: int = 256
    n_tracks: int = 16
    motions: str = "slide,lift_lower,pick_place"
    max_distractors: int = 3
    mirror_pairs: bool = False  # each scene also appears with its motion reversed
    # codec
    patch: int = 4
    group: int = 1
    # backbone
    d_model: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    temb_dim: int = 64
    num_train_steps: int = 1000
    prediction: str = "x0"
    # control branch
    pc_tokens: int = 16
    d_pc: int = 64
    octaves: int = 4
    control_sees_latent: bool = True
    # optimisation
    lr: float = 1e-4
    epochs: int = 20
    steps: int | None = 200  # optimizer steps; none -> derive from epochs
    microbatch: int = 1
    accumulation: int = 4
    weight_decay: float = 0.0
    use_mask: bool = True
    drop_pc: bool = False
    drop_tracking: bool = False
    pretrain_steps: int = 0  # backbone steps before control training; 0 keeps the seeded init
    # sampling
    sample_steps: int = 50
    sample_seed: int = 0
    profile: str = "desk"

    # -- derived configs -------------------------------------------------------

    def latent_grid(self) -> tuple[int, int, int]:
        return (-(-self.frames // self.group), self.height // self.patch, self.width // self.patch)

    def backbone(self) -> bb.BackboneConfig:
        return bb.BackboneConfig(
            latent_channels=3 * self.patch * self.patch * self.group,
            grid=self.latent_grid(),
            d_model=self.d_model,
            heads=self.heads,
            depth=self.depth,
            mlp_ratio=self.mlp_ratio,
            temb_dim=self.temb_dim,
            num_train_steps=self.num_train_steps,
            prediction=self.prediction,
        )

    def control(self) -> c3.ControlConfig:
        return c3.ControlConfig(
            tokens=self.pc_tokens,
            d_pc=self.d_pc,
            heads=self.heads,
            octaves=self.octaves,
            with_latent=self.control_sees_latent,
            drop_pc=self.drop_pc,
            drop_tracking=self.drop_tracking,
        )

    def train(self, **overrides) -> D.TrainConfig:
        kw = dict(
            lr=self.lr, epochs=self.epochs, steps=self.steps, microbatch=self.microbatch,
            accumulation=self.accumulation, weight_decay=self.weight_decay, seed=self.seed,
            use_mask=self.use_mask, drop_pc=self.drop_pc, drop_tracking=self.drop_tracking,
            control_sees_latent=self.control_sees_latent, patch=self.patch, group=self.group,
        )
        kw.update(overrides)
        return D.TrainConfig(**kw)

    def camera(self) -> Camera:
        # focal length scales with width so the desk field of view is kept
        f = 40.0 * self.width / 32.0
        return Camera(f=f, cx=self.width / 2.0, cy=self.height / 2.0, width=self.width, height=self.height)

    def motion_list(self) -> list[str]:
        return [m.strip() for m in self.motions.split(",") if m.strip()]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


PROFILES: dict[str, dict] = {
    "desk": {},
    # condition ablation: mirrored clip pairs and a fitted backbone, so the
    # conditions are the only cue separating paired motions
    "ablation": {
        "profile": "ablation",
        "mirror_pairs": True,
        "motions": "slide,pick_place",
        "pretrain_steps": 300,
        "lr": 1e-3,
    },
    # reference-scale values, documentation only
    "reference": {
        "profile": "reference",
        "height": 480,
        "width": 720,
        "frames": 49,
        "lr": 1e-4,
        "epochs": 20,
        "steps": None,
        "microbatch": 1,
        "accumulation": 4,
    },
}

EXECUTABLE_PROFILES = ("desk", "ablation")


def _field_types() -> dict[str, object]:
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in fields(RunConfig)}


def parse_value(key: str, raw: str):
    hints = _field_types()
    if key not in hints:
        raise ConfigFileError(f"unknown config key {key!r}")
    tp = hints[key]
    text = raw.strip()
    optional = typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in typing.get_args(tp)
    if optional:
        if text.lower() in ("none", "null", ""):
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigFileError(f"bad value {raw!r} for {key} (expected {getattr(tp, '__name__', tp)})") from None


def parse_text(text: str, source: str = "<text>") -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        try:
            out[k.strip()] = parse_value(k.strip(), v)
        except ConfigFileError as e:
            raise ConfigFileError(f"{source}:{lineno}: {e}") from None
    return out


def load_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} not found")
    return parse_text(p.read_text(), str(p))


def build(profile: str = "desk", file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Profile defaults, then file values, then overrides (flags win)."""
    if profile not in PROFILES:
        raise ConfigFileError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    values = dict(PROFILES[profile])
    values.update(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)


def from_dict(d: dict) -> RunConfig:
    return RunConfig(**d)


def dump(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
