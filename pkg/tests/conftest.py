import numpy as np
import pytest

from hoivid import backbone as bb
from hoivid import control3d as c3


def tiny_record(rng, frames=2, size=8, n_points=12, name="r"):
    q = lambda a: np.round(a * 4096) / 4096
    video = q(rng.random((frames, size, size, 3)))
    masks = np.zeros((frames, size, size), dtype=np.uint8)
    masks[:, : size // 2, : size // 2] = 1
    return {
        "image": video[0],
        "frames": video,
        "fused_masks": masks,
        "pointclouds": rng.normal(size=(frames, n_points, 3)) * 0.3,
        "tracking": q(rng.random((frames, size, size, 3))),
        "meta": {"name": name, "n_tracks": 3},
    }


def tiny_configs(prediction="x0"):
    bcfg = bb.BackboneConfig(latent_channels=48, grid=(2, 2, 2), d_model=8, heads=2, depth=2, mlp_ratio=2, temb_dim=8, prediction=prediction)
    ccfg = c3.ControlConfig(tokens=4, d_pc=8, heads=2, octaves=2)
    return bcfg, ccfg


@pytest.fixture
def tiny():
    rng = np.random.default_rng(11)
    recs = [tiny_record(rng, name=f"r{i}") for i in range(3)]
    bcfg, ccfg = tiny_configs()
    return recs, bb.init_params(bcfg, 0), bcfg, ccfg


# acceptance criteria report one line each at the end of the session
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def report(key: str, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[key] = (ok, f"{key} {title}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key][1])
