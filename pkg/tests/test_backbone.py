import numpy as np
import pytest

from hoivid import backbone as bb
from hoivid.numerics import Tensor, mul, sum_


def small_cfg(**kw):
    base = dict(latent_channels=6, grid=(3, 2, 2), d_model=16, heads=2, depth=2, temb_dim=8)
    base.update(kw)
    return bb.BackboneConfig(**base)


def test_single_frame_concat_without_padding():
    x = np.random.default_rng(0).normal(size=(1, 2, 3, 5))
    img = np.random.default_rng(1).normal(size=(1, 2, 3, 5))
    tok = bb.prepare_input(x, img).data
    assert tok.shape == (6, 10)
    assert np.array_equal(tok[:, :5], x.reshape(6, 5))
    assert np.array_equal(tok[:, 5:], img.reshape(6, 5))


def test_image_sits_in_slot_zero():
    x = np.zeros((3, 2, 2, 4))
    tok = bb.prepare_input(x, np.ones((1, 2, 2, 4))).data.reshape(3, 2, 2, 8)
    assert (tok[0, ..., 4:] == 1).all()
    assert (tok[1:, ..., 4:] == 0).all()
    assert np.array_equal(bb.pad_image_latent(np.ones((1, 2, 2, 4)), 3), tok[..., 4:])


def test_default_grid_token_count():
    cfg = bb.BackboneConfig()
    assert cfg.tokens == 576 and cfg.in_channels == 96
    tok = bb.prepare_input(np.zeros((9, 8, 8, 48)), np.zeros((1, 8, 8, 48)))
    assert tok.shape == (576, 96)


@pytest.mark.parametrize("x,img", [
    ((3, 2, 2, 4), (2, 2, 2, 4)),
    ((3, 2, 2, 4), (1, 2, 3, 4)),
    ((3, 2, 2, 4), (1, 2, 2, 5)),
    ((3, 2, 2), (1, 2, 2)),
])
def test_prepare_input_rejects_mismatch(x, img):
    with pytest.raises(bb.ConfigError):
        bb.prepare_input(np.zeros(x), np.zeros(img))


def inputs(cfg, seed=0):
    rng = np.random.default_rng(seed)
    tp, h, w = cfg.grid
    c = cfg.latent_channels
    return bb.prepare_input(rng.normal(size=(tp, h, w, c)), rng.normal(size=(1, h, w, c)))


def test_full_size_forward_shape_and_determinism():
    cfg = bb.BackboneConfig()
    p = bb.init_params(cfg, 0)
    tok = inputs(cfg)
    a = bb.backbone_forward(p, cfg, tok, 500).data
    assert a.shape == (9, 8, 8, 48) and np.isfinite(a).all()
    assert np.array_equal(a, bb.backbone_forward(bb.init_params(cfg, 0), cfg, tok, 500).data)


def test_zero_residuals_are_bit_identical():
    cfg = small_cfg()
    p = bb.init_params(cfg, 1)
    tok = inputs(cfg)
    zeros = [Tensor(np.zeros((cfg.tokens, cfg.d_model))) for _ in range(cfg.depth)]
    assert np.array_equal(bb.backbone_forward(p, cfg, tok, 10).data, bb.backbone_forward(p, cfg, tok, 10, zeros).data)


def test_residual_lands_after_its_block():
    cfg = small_cfg(depth=1)
    p = bb.init_params(cfg, 2)
    tok = inputs(cfg)
    r = np.random.default_rng(3).normal(size=(cfg.tokens, cfg.d_model))
    got = bb.backbone_forward(p, cfg, tok, 7, [Tensor(r)]).data
    temb = bb.embed_time(p, cfg, 7)
    x = bb.block_forward(p, "blocks.0", (tok @ p["in_proj.w"]) + p["in_proj.b"] + p["pos"], temb, cfg.heads)
    x = Tensor(x.data + r)
    from hoivid.numerics import gelu, layer_norm, linear, split
    mod = linear(gelu(temb), p["final.mod.w"], p["final.mod.b"])
    sh, sc = split(mod, [cfg.d_model] * 2, axis=0)
    h = layer_norm(x).data * (1 + sc.data) + sh.data
    ref = (h @ p["out_proj.w"].data + p["out_proj.b"].data).reshape(got.shape)
    assert np.abs(got - ref).max() < 1e-12


def test_permutation_equivariance():
    cfg = small_cfg()
    p = bb.init_params(cfg, 4)
    tok = inputs(cfg).data
    perm = np.random.default_rng(5).permutation(cfg.tokens)
    out = bb.backbone_forward(p, cfg, Tensor(tok), 123).data.reshape(cfg.tokens, -1)
    q = dict(p)
    q["pos"] = Tensor(p["pos"].data[perm])
    outp = bb.backbone_forward(q, cfg, Tensor(tok[perm]), 123).data.reshape(cfg.tokens, -1)
    assert np.abs(outp - out[perm]).max() < 1e-9


def test_every_parameter_gets_gradient():
    cfg = small_cfg()
    p = bb.init_params(cfg, 6)
    bb.set_trainable(p, True)
    out = bb.backbone_forward(p, cfg, inputs(cfg), 300)
    target = Tensor(np.random.default_rng(7).normal(size=out.shape))
    sum_(mul(out, target)).backward()
    for k, v in p.items():
        assert v.grad is not None and np.linalg.norm(v.grad) > 0, k


def test_wrong_residual_count():
    cfg = small_cfg()
    p = bb.init_params(cfg, 0)
    with pytest.raises(bb.ConfigError, match="residuals"):
        bb.backbone_forward(p, cfg, inputs(cfg), 1, [Tensor(np.zeros((cfg.tokens, cfg.d_model)))])


@pytest.mark.parametrize("t", [-1, 1000, 1e4])
def test_timestep_range(t):
    cfg = small_cfg()
    with pytest.raises(bb.ConfigError, match="timestep"):
        bb.backbone_forward(bb.init_params(cfg, 0), cfg, inputs(cfg), t)


@pytest.mark.parametrize("kw", [dict(d_model=10, heads=4), dict(depth=0), dict(prediction="v")])
def test_config_validation(kw):
    with pytest.raises(bb.ConfigError):
        small_cfg(**kw)


def test_seeds_differ():
    cfg = small_cfg()
    assert bb.checksum(bb.init_params(cfg, 0)) != bb.checksum(bb.init_params(cfg, 1))


def test_checkpoint_round_trip(tmp_path):
    cfg = small_cfg(prediction="eps")
    p = bb.init_params(cfg, 8)
    bb.save_checkpoint(p, cfg, tmp_path, extra={"note": "x"})
    q, qcfg, meta = bb.load_checkpoint(tmp_path)
    assert qcfg == cfg and meta["note"] == "x" and meta["config_hash"] == cfg.hash()
    assert bb.checksum(q) == bb.checksum(p)


def test_checkpoint_detects_tampering(tmp_path):
    cfg = small_cfg()
    bb.save_checkpoint(bb.init_params(cfg, 9), cfg, tmp_path)
    meta = tmp_path / "backbone.json"
    meta.write_text(meta.read_text().replace('"checksum": "', '"checksum": "0'))
    with pytest.raises(ValueError, match="checksum"):
        bb.load_checkpoint(tmp_path)
