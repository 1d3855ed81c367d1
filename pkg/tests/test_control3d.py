import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoivid import backbone as bb
from hoivid import control3d as c3
from hoivid import diffusion as D
from hoivid.numerics import Tensor, mul, sum_

from conftest import tiny_configs


@pytest.fixture(scope="module")
def full():
    bcfg = bb.BackboneConfig()
    bp = bb.init_params(bcfg, 0)
    cc = c3.ControlConfig()
    return bp, bcfg, cc, c3.init_controlnet_from_backbone(bp, bcfg, 3, cc)


def test_encoder_output_shape(full):
    _, _, cc, cp = full
    pts = np.random.default_rng(0).normal(size=(9, 64, 3)) * 0.3
    assert c3.encode_pointcloud(cp, cc, pts).shape == (9, 16, 64)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=10, deadline=None)
def test_encoder_ignores_point_order(seed):
    bcfg, cc = tiny_configs()
    cp = c3.init_controlnet_from_backbone(bb.init_params(bcfg, 0), bcfg, seed % 1000, cc)
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(3, 20, 3)) * 0.4
    perm = rng.permutation(20)
    a = c3.encode_pointcloud(cp, cc, pts).data
    b = c3.encode_pointcloud(cp, cc, pts[:, perm]).data
    assert np.abs(a - b).max() < 1e-9


def test_all_origin_equals_single_point(full):
    _, _, cc, cp = full
    many = c3.encode_pointcloud(cp, cc, np.zeros((2, 50, 3))).data
    one = c3.encode_pointcloud(cp, cc, np.zeros((2, 1, 3))).data
    assert np.abs(many - one).max() < 1e-12


def test_nan_points_rejected(full):
    _, _, cc, cp = full
    pts = np.zeros((2, 4, 3))
    pts[1, 2, 0] = np.nan
    with pytest.raises(c3.ControlError, match="non-finite"):
        c3.encode_pointcloud(cp, cc, pts)


def test_fourier_features_layout():
    f = c3.fourier_features(np.array([[0.25, 0.0, 1.0]]), 2)
    assert f.shape == (1, 15)
    assert np.allclose(f[0, :3], [0.25, 0, 1])
    # x block: sin(pi/4), sin(pi/2), cos(pi/4), cos(pi/2)
    assert np.allclose(f[0, 3:7], [np.sin(np.pi / 4), 1.0, np.cos(np.pi / 4), 0.0])


def test_group_points_pads_with_last_frame():
    pts = np.arange(3 * 2 * 3, dtype=float).reshape(3, 2, 3)
    g = c3.group_points(pts, 2)
    assert g.shape == (2, 4, 3)
    assert np.array_equal(g[1, 2:], pts[2])


def test_init_copies_blocks_and_zeroes_projections(full):
    bp, bcfg, cc, cp = full
    for i in range(bcfg.depth):
        for k in bb.block_names(bp, f"blocks.{i}"):
            assert cp[k].data.tobytes() == bp[k].data.tobytes()
            assert cp[k].data is not bp[k].data
        assert np.abs(cp[f"zero.{i}.w"].data).max() == 0
        assert np.abs(cp[f"zero.{i}.b"].data).max() == 0


def test_same_seed_same_params(full):
    bp, bcfg, cc, cp = full
    again = c3.init_controlnet_from_backbone(bp, bcfg, 3, cc)
    assert bb.checksum(again) == bb.checksum(cp)
    assert bb.checksum(c3.init_controlnet_from_backbone(bp, bcfg, 4, cc)) != bb.checksum(cp)


def test_point_tokens_tile_two_by_two(full):
    _, bcfg, cc, cp = full
    z_pc = Tensor(np.random.default_rng(1).normal(size=(9, 16, 64)))
    zero = np.zeros((9, 8, 8, 48))
    q = dict(cp)
    # identity-like in_proj on the pc channels exposes the tiled grid
    q["in_proj.w"] = Tensor(np.eye(4 * 48, 64))
    q["in_proj.b"] = Tensor(np.zeros(64))
    q["pos"] = Tensor(np.zeros((576, 64)))
    x = c3.align_conditions(q, cc, z_pc, zero, zero, zero).data.reshape(9, 8, 8, 64)
    proj = (z_pc.data @ cp["align.w"].data + cp["align.b"].data).reshape(9, 4, 4, 48)
    for i in range(8):
        for j in range(8):
            assert np.array_equal(x[:, i, j, :48], proj[:, i // 2, j // 2])


def test_zero_point_tokens_leave_linear_map(full):
    _, _, cc, cp = full
    rng = np.random.default_rng(2)
    tr, nz, im = (rng.normal(size=(9, 8, 8, 48)) for _ in range(3))
    x = c3.align_conditions(cp, cc, Tensor(np.zeros((9, 16, 64))), tr, nz, im).data
    bias = np.broadcast_to(cp["align.b"].data, (9, 8, 8, 48))
    stacked = np.concatenate([bias, tr, nz, im], axis=-1).reshape(576, 192)
    assert cc.input_channels(48) == 192
    ref = stacked @ cp["in_proj.w"].data + cp["in_proj.b"].data + cp["pos"].data
    assert np.abs(x - ref).max() < 1e-12


def test_drop_flags_zero_their_channels(full):
    _, _, cc, cp = full
    rng = np.random.default_rng(3)
    z_pc = Tensor(rng.normal(size=(9, 16, 64)))
    tr, nz, im = (rng.normal(size=(9, 8, 8, 48)) for _ in range(3))
    a = c3.align_conditions(cp, cc, z_pc, np.zeros_like(tr), nz, im).data
    b = c3.align_conditions(cp, cc, z_pc, tr, nz, im, drop_tracking=True).data
    assert np.array_equal(a, b)
    dropped = c3.align_conditions(cp, cc, z_pc, tr, nz, im, drop_pc=True).data
    other = c3.align_conditions(cp, cc, Tensor(rng.normal(size=(9, 16, 64))), tr, nz, im, drop_pc=True).data
    assert np.array_equal(dropped, other)


@pytest.mark.parametrize("kw", [dict(tokens=15), dict(tokens=8)])
def test_non_square_token_count(kw):
    with pytest.raises(c3.ControlError, match="perfect square"):
        c3.ControlConfig(**kw)


def test_grid_smaller_than_token_grid(full):
    _, _, cc, cp = full
    big = c3.ControlConfig(tokens=25)
    with pytest.raises(c3.ControlError, match="smaller"):
        c3.align_conditions(cp, big, Tensor(np.zeros((1, 25, 64))), np.zeros((1, 4, 4, 48)), np.zeros((1, 4, 4, 48)), np.zeros((1, 4, 4, 48)))


def test_missing_latents_when_expected(full):
    _, _, cc, cp = full
    with pytest.raises(c3.ControlError, match="noised"):
        c3.align_conditions(cp, cc, Tensor(np.zeros((9, 16, 64))), np.zeros((9, 8, 8, 48)))


def test_fresh_residuals_are_exact_zero(full):
    bp, bcfg, cc, cp = full
    rng = np.random.default_rng(4)
    z_pc = c3.encode_pointcloud(cp, cc, rng.normal(size=(9, 30, 3)))
    zs = [rng.normal(size=(9, 8, 8, 48)) for _ in range(3)]
    res = c3.control_forward(cp, bcfg, c3.align_conditions(cp, cc, z_pc, *zs), bb.embed_time(bp, bcfg, 400))
    assert len(res) == bcfg.depth
    for r in res:
        assert r.shape == (576, 64) and not r.data.any()


def test_every_control_param_gets_gradient():
    # zero projections block gradient to everything upstream at init, so move them first
    rng = np.random.default_rng(5)
    bcfg, cc = tiny_configs()
    bp = bb.init_params(bcfg, 1)
    cp = c3.init_controlnet_from_backbone(bp, bcfg, 2, cc)
    for i in range(bcfg.depth):
        cp[f"zero.{i}.w"].data[...] = rng.normal(size=(8, 8)) * 0.1
    bb.set_trainable(cp, True)
    model = D.Model(bp, bcfg, cp, cc)
    z_pc = c3.encode_pointcloud(cp, cc, rng.normal(size=(2, 6, 3)))
    x_t = rng.normal(size=(2, 2, 2, 48))
    pred = D.predict_x0(model, x_t, rng.normal(size=(1, 2, 2, 48)), 50, D.NoiseSchedule(), (z_pc, rng.normal(size=(2, 2, 2, 48))))
    D.masked_diffusion_loss(pred, rng.normal(size=x_t.shape), np.ones((2, 2, 2))).backward()
    for k, v in cp.items():
        assert v.grad is not None and np.linalg.norm(v.grad) > 0, k


def test_one_training_step_opens_the_branch(tiny):
    recs, bp, bcfg, ccfg = tiny
    res = D.train(recs, bp, bcfg, D.TrainConfig(steps=1, accumulation=2, lr=1e-3), ccfg=ccfg)
    item = D.latent_item(recs[0])
    z_pc = c3.encode_pointcloud(res.control, res.ccfg, item.points)
    x = c3.align_conditions(res.control, res.ccfg, z_pc, item.tracking, item.x0, bb.pad_image_latent(item.image, 2))
    out = c3.control_forward(res.control, bcfg, x, bb.embed_time(bp, bcfg, 500))
    assert any(np.abs(r.data).max() > 0 for r in out)
    assert all(r.shape == (bcfg.tokens, bcfg.d_model) for r in out)


def test_checkpoint_round_trip(tmp_path, full):
    _, _, cc, cp = full
    c3.save_control(cp, cc, tmp_path)
    back, bcc, meta = c3.load_control(tmp_path)
    assert bcc == cc and meta["namespace"] == "control"
    assert bb.checksum(back) == bb.checksum(cp)
    assert (tmp_path / "control.json").exists()
