import numpy as np
import pytest

from hoivid.config import RunConfig
from hoivid.experiments import ABLATIONS, AblationRow, AblationTable, make_records, make_specs


def test_mirror_pairs_share_first_frame_and_reverse_displacement():
    cfg = RunConfig(n=4, mirror_pairs=True)
    specs = make_specs(cfg)
    assert len(specs) == 4 and all(s.motion != "lift_lower" for s in specs)
    for a, b in zip(specs[::2], specs[1::2]):
        assert np.allclose(np.add(a.displacement, b.displacement), 0)
    recs = make_records(cfg)
    assert np.array_equal(recs[0]["image"], recs[1]["image"])
    assert not np.array_equal(recs[0]["frames"][-1], recs[1]["frames"][-1])


def test_mirror_pairs_is_deterministic():
    cfg = RunConfig(n=2, mirror_pairs=True, seed=5)
    assert make_specs(cfg) == make_specs(cfg)


@pytest.mark.parametrize("kw", [dict(n=3), dict(n=2, motions="lift_lower")])
def test_mirror_pairs_rejects_unusable_settings(kw):
    with pytest.raises(ValueError):
        make_specs(RunConfig(mirror_pairs=True, **kw))


def _table(scores):
    return AblationTable([AblationRow(name, [scores[name]], [30.0], [0.9], [0.01]) for name, _ in ABLATIONS], [0])


def test_ordering_holds_directions():
    good = {"w/o 3D pc": 18.0, "w/o 3D tracking": 19.0, "w/o mask loss": 19.5, "full": 20.0}
    assert _table(good).ordering_holds() == (True, True)
    assert _table({**good, "w/o mask loss": 21.0}).ordering_holds() == (False, True)
    assert _table({**good, "w/o 3D pc": 19.2}).ordering_holds() == (True, False)
    csv = _table(good).to_csv().splitlines()
    assert csv[0].startswith("config,masked_psnr") and len(csv) == 5
