"""Small video diffusion transformer with full spatio-temporal attention.

Tokens are the flattened ``T' x h x w`` latent grid. The conditioning image
latent sits in temporal slot 0 of a zero-padded copy that is
channel-concatenated with the noised latent. Timesteps enter through
adaptive layer norm (shift, scale and gate per block).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numerics import blob
from .numerics import tensor as T
from .numerics.rng import stream
from .numerics.tensor import Tensor

Params = dict[str, Tensor]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    latent_channels: int = 48
    grid: tuple[int, int, int] = (9, 8, 8)  # T', h, w
    d_model: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    temb_dim: int = 64
    num_train_steps: int = 1000
    prediction: str = "x0"  # or "eps"; diffusion reconstructs x0 either way

    def __post_init__(self):
        if self.prediction not in ("x0", "eps"):
            raise ConfigError(f"prediction must be 'x0' or 'eps', got {self.prediction!r}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels

    @property
    def tokens(self) -> int:
        t, h, w = self.grid
        return t * h * w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["grid"] = tuple(d["grid"])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * (gain / math.sqrt(fan_in))


def init_block(rng: np.random.Generator, d: int, mlp_ratio: int, prefix: str) -> Params:
    hid = d * mlp_ratio
    p = {
        "mod.w": rng.standard_normal((d, 6 * d)) * 0.02,
        "mod.b": np.zeros(6 * d),
        "attn.qkv.w": _dense(rng, d, 3 * d),
        "attn.qkv.b": np.zeros(3 * d),
        "attn.out.w": _dense(rng, d, d),
        "attn.out.b": np.zeros(d),
        "mlp.fc1.w": _dense(rng, d, hid),
        "mlp.fc1.b": np.zeros(hid),
        "mlp.fc2.w": _dense(rng, hid, d),
        "mlp.fc2.b": np.zeros(d),
    }
    # gates start at 1 via the bias so fresh blocks are not identities
    p["mod.b"][2 * d : 3 * d] = 1.0
    p["mod.b"][5 * d : 6 * d] = 1.0
    return {f"{prefix}.{k}": Tensor(v, name=f"{prefix}.{k}") for k, v in p.items()}


def init_params(cfg: BackboneConfig, seed: int) -> Params:
    rng = stream(seed, "backbone")
    d, c = cfg.d_model, cfg.latent_channels
    raw = {
        "in_proj.w": _dense(rng, cfg.in_channels, d),
        "in_proj.b": np.zeros(d),
        "pos": rng.standard_normal((cfg.tokens, d)) * 0.02,
        "temb.fc1.w": _dense(rng, cfg.temb_dim, d),
        "temb.fc1.b": np.zeros(d),
        "temb.fc2.w": _dense(rng, d, d),
        "temb.fc2.b": np.zeros(d),
        "final.mod.w": rng.standard_normal((d, 2 * d)) * 0.02,
        "final.mod.b": np.zeros(2 * d),
        "out_proj.w": _dense(rng, d, c),
        "out_proj.b": np.zeros(c),
    }
    params = {k: Tensor(v, name=k) for k, v in raw.items()}
    for i in range(cfg.depth):
        params.update(init_block(rng, d, cfg.mlp_ratio, f"blocks.{i}"))
    return params


def block_names(params: Params, prefix: str) -> list[str]:
    return sorted(k for k in params if k.startswith(prefix + "."))


def timestep_embedding(t: float, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = float(t) * freqs
    return np.concatenate([np.cos(args), np.sin(args)])


def embed_time(params: Params, cfg: BackboneConfig, t: float) -> Tensor:
    e = Tensor(timestep_embedding(t, cfg.temb_dim))
    h = T.gelu(T.linear(e, params["temb.fc1.w"], params["temb.fc1.b"]))
    return T.linear(h, params["temb.fc2.w"], params["temb.fc2.b"])


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return T.add(T.mul(T.layer_norm(x), T.add_scalar(scale, 1.0)), shift)


def self_attention(params: Params, prefix: str, x: Tensor, heads: int) -> Tensor:
    S, d = x.shape
    dh = d // heads
    qkv = T.linear(x, params[f"{prefix}.attn.qkv.w"], params[f"{prefix}.attn.qkv.b"])
    qkv = T.transpose(T.reshape(qkv, (S, 3, heads, dh)), (1, 2, 0, 3))  # 3, H, S, dh
    q, k, v = (T.reshape(part, (heads, S, dh)) for part in T.split(qkv, [1, 1, 1], axis=0))
    o = T.attention(q, k, v)  # H, S, dh
    o = T.reshape(T.transpose(o, (1, 0, 2)), (S, d))
    return T.linear(o, params[f"{prefix}.attn.out.w"], params[f"{prefix}.attn.out.b"])


def block_forward(params: Params, prefix: str, x: Tensor, temb: Tensor, heads: int) -> Tensor:
    d = x.shape[-1]
    mod = T.linear(T.gelu(temb), params[f"{prefix}.mod.w"], params[f"{prefix}.mod.b"])
    sh1, sc1, g1, sh2, sc2, g2 = T.split(mod, [d] * 6, axis=0)
    h = self_attention(params, prefix, _modulate(x, sh1, sc1), heads)
    x = T.add(x, T.mul(h, g1))
    h = _modulate(x, sh2, sc2)
    h = T.linear(h, params[f"{prefix}.mlp.fc1.w"], params[f"{prefix}.mlp.fc1.b"])
    h = T.linear(T.gelu(h), params[f"{prefix}.mlp.fc2.w"], params[f"{prefix}.mlp.fc2.b"])
    return T.add(x, T.mul(h, g2))


def prepare_input(noised_latent, image_latent) -> Tensor:
    """Zero-pad the one-frame image latent in time and stack it on the channels.

    Returns ``(T' * h * w) x 2c`` tokens.
    """
    x = T.as_tensor(noised_latent)
    img = T.as_tensor(image_latent)
    if x.ndim != 4 or img.ndim != 4:
        raise ConfigError(f"expected 4-d latents, got {x.shape} and {img.shape}")
    if img.shape[0] != 1:
        raise ConfigError(f"image latent must have one frame, got {img.shape[0]}")
    if img.shape[1:] != x.shape[1:]:
        raise ConfigError(f"image latent {img.shape} does not match noised latent {x.shape} in h, w, c")
    tp, h, w, c = x.shape
    padded = img if tp == 1 else T.concat([img, Tensor(np.zeros((tp - 1, h, w, c)))], axis=0)
    both = T.concat([x, padded], axis=-1)
    return T.reshape(both, (tp * h * w, 2 * c))


def pad_image_latent(image_latent: np.ndarray, frames: int) -> np.ndarray:
    out = np.zeros((frames,) + image_latent.shape[1:])
    out[0] = image_latent[0]
    return out


def backbone_forward(
    params: Params,
    cfg: BackboneConfig,
    tokens: Tensor,
    t: float,
    residuals: list[Tensor] | None = None,
    temb: Tensor | None = None,
) -> Tensor:
    """Raw model output on the latent grid ``T' x h x w x c`` (clean latent or noise, per config).

    ``residuals[i]`` (token-shaped) is added to the hidden state right after
    block ``i``.
    """
    if not 0 <= t < cfg.num_train_steps:
        raise ConfigError(f"timestep {t} outside [0, {cfg.num_train_steps})")
    if residuals is not None and len(residuals) != cfg.depth:
        raise ConfigError(f"got {len(residuals)} residuals for depth {cfg.depth}")
    if tokens.shape != (cfg.tokens, cfg.in_channels):
        raise ConfigError(f"tokens {tokens.shape} do not match config ({cfg.tokens}, {cfg.in_channels})")
    if temb is None:
        temb = embed_time(params, cfg, t)
    x = T.add(T.linear(tokens, params["in_proj.w"], params["in_proj.b"]), params["pos"])
    for i in range(cfg.depth):
        x = block_forward(params, f"blocks.{i}", x, temb, cfg.heads)
        if residuals is not None:
            x = T.add(x, residuals[i])
    mod = T.linear(T.gelu(temb), params["final.mod.w"], params["final.mod.b"])
    sh, sc = T.split(mod, [cfg.d_model, cfg.d_model], axis=0)
    out = T.linear(_modulate(x, sh, sc), params["out_proj.w"], params["out_proj.b"])
    return T.reshape(out, (*cfg.grid, cfg.latent_channels))


def checksum(params: Params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()


def set_trainable(params: Params, flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag
        p.grad = None


def save_checkpoint(params: Params, cfg, directory, namespace: str = "backbone", extra: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob.save_named(d, {f"{namespace}.{k}": v.data for k, v in params.items()})
    meta = {"namespace": namespace, "config": cfg.to_dict(), "config_hash": cfg.hash(), "checksum": checksum(params)}
    if extra:
        meta.update(extra)
    (d / f"{namespace}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(directory, namespace: str = "backbone", config_cls=BackboneConfig):
    d = Path(directory)
    meta = json.loads((d / f"{namespace}.json").read_text())
    cfg = config_cls.from_dict(meta["config"])
    arrays = blob.load_named(d, prefix=f"{namespace}.")
    params = {k[len(namespace) + 1 :]: Tensor(v, name=k[len(namespace) + 1 :]) for k, v in arrays.items()}
    if checksum(params) != meta["checksum"]:
        raise ValueError(f"{d}: {namespace} checkpoint checksum mismatch")
    return params, cfg, meta
