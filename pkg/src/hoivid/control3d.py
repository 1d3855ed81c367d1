"""3D control branch: point-cloud set encoder, condition alignment, copied blocks, zero projections."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import backbone as bb
from .numerics import tensor as T
from .numerics.rng import stream
from .numerics.tensor import Tensor

Params = bb.Params


class ControlError(ValueError):
    pass


@dataclass(frozen=True)
class ControlConfig:
    tokens: int = 16  # L, a perfect square
    d_pc: int = 64
    heads: int = 4
    octaves: int = 4
    with_latent: bool = True  # feed noised + image latents alongside the 3D conditions
    drop_pc: bool = False  # ablation: zero the point-cloud channels
    drop_tracking: bool = False  # ablation: zero the tracking channels

    def __post_init__(self):
        if math.isqrt(self.tokens) ** 2 != self.tokens:
            raise ControlError(f"point token count L={self.tokens} is not a perfect square")
        if self.d_pc % self.heads:
            raise ControlError(f"d_pc={self.d_pc} is not divisible by heads={self.heads}")

    @property
    def side(self) -> int:
        return math.isqrt(self.tokens)

    @property
    def feature_dim(self) -> int:
        return 3 * (1 + 2 * self.octaves)

    def input_channels(self, c: int) -> int:
        return (4 if self.with_latent else 2) * c

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ControlConfig":
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def fourier_features(points: np.ndarray, octaves: int) -> np.ndarray:
    """``[..., 3] -> [..., 3 * (1 + 2 * octaves)]``: raw xyz plus sin/cos at ``2**k * pi``."""
    pts = np.asarray(points, dtype=np.float64)
    if not np.isfinite(pts).all():
        raise ControlError("point cloud contains non-finite values")
    freqs = (2.0 ** np.arange(octaves)) * np.pi
    ang = pts[..., :, None] * freqs  # ..., 3, octaves
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).reshape(*pts.shape[:-1], -1)
    return np.concatenate([pts, feats], axis=-1)


def group_points(points: np.ndarray, group: int) -> np.ndarray:
    """``T x N x 3 -> T' x (g*N) x 3``, padding time by repeating the last frame."""
    pts = np.asarray(points, dtype=np.float64)
    extra = (-pts.shape[0]) % group
    if extra:
        pts = np.concatenate([pts, np.repeat(pts[-1:], extra, axis=0)], axis=0)
    tp = pts.shape[0] // group
    return pts.reshape(tp, group * pts.shape[1], 3)


def init_encoder(rng: np.random.Generator, cc: ControlConfig, c: int, bcfg: bb.BackboneConfig) -> dict[str, np.ndarray]:
    d, dp = bcfg.d_model, cc.d_pc
    dense = bb._dense
    return {
        "pc.embed.w": dense(rng, cc.feature_dim, dp),
        "pc.embed.b": np.zeros(dp),
        "pc.queries": rng.standard_normal((cc.tokens, dp)) * 0.5,
        "pc.q.w": dense(rng, dp, dp),
        "pc.kv.w": dense(rng, dp, 2 * dp),
        "pc.out.w": dense(rng, dp, dp),
        "pc.out.b": np.zeros(dp),
        "pc.mlp.fc1.w": dense(rng, dp, 2 * dp),
        "pc.mlp.fc1.b": np.zeros(2 * dp),
        "pc.mlp.fc2.w": dense(rng, 2 * dp, dp),
        "pc.mlp.fc2.b": np.zeros(dp),
        "align.w": dense(rng, dp, c),
        "align.b": np.zeros(c),
        "in_proj.w": dense(rng, cc.input_channels(c), d),
        "in_proj.b": np.zeros(d),
    }


def init_controlnet_from_backbone(backbone_params: Params, bcfg: bb.BackboneConfig, seed: int, cc: ControlConfig | None = None) -> Params:
    """Copy every backbone block bit-exactly, add zero projections and fresh encoder weights."""
    cc = cc or ControlConfig()
    rng = stream(seed, "control")
    params = {k: Tensor(v, name=k) for k, v in init_encoder(rng, cc, bcfg.latent_channels, bcfg).items()}
    params["pos"] = Tensor(backbone_params["pos"].data.copy(), name="pos")
    d = bcfg.d_model
    for i in range(bcfg.depth):
        for name in bb.block_names(backbone_params, f"blocks.{i}"):
            params[name] = Tensor(backbone_params[name].data.copy(), name=name)
        params[f"zero.{i}.w"] = Tensor(np.zeros((d, d)), name=f"zero.{i}.w")
        params[f"zero.{i}.b"] = Tensor(np.zeros(d), name=f"zero.{i}.b")
    return params


def encode_pointcloud(params: Params, cc: ControlConfig, points: np.ndarray, group: int = 1) -> Tensor:
    """Normalised ``T x N x 3`` points -> ``T' x L x d_pc`` tokens.

    Learned queries cross-attend to Fourier-featured points per frame group,
    followed by a residual MLP. Invariant to point order.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[-1] != 3:
        raise ControlError(f"expected T x N x 3 points, got {pts.shape}")
    feats = Tensor(fourier_features(group_points(pts, group), cc.octaves))
    tp, n = feats.shape[:2]
    L, dp, H = cc.tokens, cc.d_pc, cc.heads
    dh = dp // H
    keys = T.gelu(T.linear(feats, params["pc.embed.w"], params["pc.embed.b"]))  # T', n, dp
    kv = T.linear(T.layer_norm(keys), params["pc.kv.w"])
    k, v = T.split(kv, [dp, dp], axis=-1)
    k = T.transpose(T.reshape(k, (tp, n, H, dh)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(v, (tp, n, H, dh)), (0, 2, 1, 3))
    q = T.linear(params["pc.queries"], params["pc.q.w"])
    q = T.broadcast_to(T.transpose(T.reshape(q, (1, L, H, dh)), (0, 2, 1, 3)), (tp, H, L, dh))
    o = T.reshape(T.transpose(T.attention(q, k, v), (0, 2, 1, 3)), (tp, L, dp))
    tok = T.add(params["pc.queries"], T.linear(o, params["pc.out.w"], params["pc.out.b"]))
    h = T.gelu(T.linear(T.layer_norm(tok), params["pc.mlp.fc1.w"], params["pc.mlp.fc1.b"]))
    return T.add(tok, T.linear(h, params["pc.mlp.fc2.w"], params["pc.mlp.fc2.b"]))


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def align_conditions(
    params: Params,
    cc: ControlConfig,
    z_pc: Tensor,
    z_tracking,
    noised=None,
    image_padded=None,
    drop_pc: bool | None = None,
    drop_tracking: bool | None = None,
) -> Tensor:
    """Project point tokens to latent channels, tile them onto the latent grid,
    stack with the tracking latent (and noised/image latents) and project to
    ``d_model`` tokens. Drop flags default to the config's.
    """
    drop_pc = cc.drop_pc if drop_pc is None else drop_pc
    drop_tracking = cc.drop_tracking if drop_tracking is None else drop_tracking
    z_tr = T.as_tensor(z_tracking)
    if z_tr.ndim != 4:
        raise ControlError(f"tracking latent must be T' x h x w x c, got {z_tr.shape}")
    tp, h, w, c = z_tr.shape
    s = cc.side
    if h < s or w < s:
        raise ControlError(f"latent grid {h}x{w} is smaller than the {s}x{s} point-token grid")
    if z_pc.shape != (tp, cc.tokens, cc.d_pc):
        raise ControlError(f"point tokens {z_pc.shape} do not match ({tp}, {cc.tokens}, {cc.d_pc})")
    pc = T.linear(z_pc, params["align.w"], params["align.b"])
    pc = T.reshape(pc, (tp, s, s, c))
    pc = T.slice_(pc, (slice(None), _nearest_index(h, s)))
    pc = T.slice_(pc, (slice(None), slice(None), _nearest_index(w, s)))
    if drop_pc:
        pc = Tensor(np.zeros((tp, h, w, c)))
    if drop_tracking:
        z_tr = Tensor(np.zeros((tp, h, w, c)))
    parts = [pc, z_tr]
    if cc.with_latent:
        if noised is None or image_padded is None:
            raise ControlError("this control config expects the noised and image latents")
        parts += [T.as_tensor(noised), T.as_tensor(image_padded)]
    x = T.concat(parts, axis=-1)
    x = T.reshape(x, (tp * h * w, x.shape[-1]))
    x = T.linear(x, params["in_proj.w"], params["in_proj.b"])
    return T.add(x, params["pos"])


def control_forward(params: Params, bcfg: bb.BackboneConfig, control_input: Tensor, temb: Tensor) -> list[Tensor]:
    """Run the copied blocks; residual ``i`` is the zero-initialised projection of block ``i``'s output."""
    x = control_input
    out = []
    for i in range(bcfg.depth):
        x = bb.block_forward(params, f"blocks.{i}", x, temb, bcfg.heads)
        out.append(T.linear(x, params[f"zero.{i}.w"], params[f"zero.{i}.b"]))
    return out


def save_control(params: Params, cc: ControlConfig, directory, extra: dict | None = None) -> None:
    bb.save_checkpoint(params, cc, directory, namespace="control", extra=extra)


def load_control(directory):
    return bb.load_checkpoint(directory, namespace="control", config_cls=ControlConfig)
