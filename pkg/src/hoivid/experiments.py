"""Dataset construction, model preparation, evaluation and the condition-ablation harness."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone as bb
from . import codec, condpipe
from . import diffusion as D
from . import metrics as M
from .config import RunConfig
from .numerics.rng import stream
from .scenegen import SceneError, generate_scene, mirrored_spec, random_spec

ABLATIONS: tuple[tuple[str, dict], ...] = (
    ("w/o 3D pc", {"drop_pc": True}),
    ("w/o 3D tracking", {"drop_tracking": True}),
    ("w/o mask loss", {"use_mask": False}),
    ("full", {}),
)


def scene_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in stream(seed, "gen-data").integers(0, 2**31 - 1, size=n)]


def make_specs(cfg: RunConfig, seed: int | None = None, n: int | None = None):
    """``n`` scene specs; with ``mirror_pairs`` they come as (scene, reversed scene) pairs.

    Paired clips share their first frame, so only the conditions tell the two
    motions apart. Scenes whose reversed motion is invalid are skipped.
    """
    seed = cfg.seed if seed is None else seed
    n = cfg.n if n is None else n
    motions = cfg.motion_list()
    cam = cfg.camera()

    def spec_for(i: int, s: int):
        return random_spec(s, motion=motions[i % len(motions)], frames=cfg.frames, camera=cam, max_distractors=cfg.max_distractors)

    if not cfg.mirror_pairs:
        return [spec_for(i, s) for i, s in enumerate(scene_seeds(seed, n))]
    if n % 2:
        raise ValueError(f"mirror_pairs needs an even n, got {n}")
    mirrorable = [m for m in motions if m != "lift_lower"]
    if not mirrorable:
        raise ValueError("mirror_pairs needs a motion with horizontal displacement")
    motions = mirrorable
    specs = []
    candidates = iter(scene_seeds(seed, 200 * n))
    while len(specs) < n:
        try:
            s = next(candidates)
        except StopIteration:
            raise RuntimeError("could not draw enough mirrorable scenes") from None
        base = spec_for(len(specs) // 2, s)
        try:
            twin = mirrored_spec(base)
        except SceneError:
            continue
        specs += [base, twin]
    return specs


def make_records(cfg: RunConfig, seed: int | None = None, n: int | None = None) -> list[dict]:
    recs = []
    for i, spec in enumerate(make_specs(cfg, seed, n)):
        sample = generate_scene(spec, n_points=cfg.n_points, n_tracks=cfg.n_tracks)
        recs.append(condpipe.build_record(sample, f"clip{i:03d}"))
    return recs


def prepare_backbone(cfg: RunConfig, records, on_step=None) -> bb.Params:
    """Seeded backbone, optionally fitted as a plain image-to-video model first."""
    bcfg = cfg.backbone()
    params = bb.init_params(bcfg, cfg.seed)
    if cfg.pretrain_steps > 0:
        tc = cfg.train(steps=cfg.pretrain_steps, use_mask=True)
        params, _ = D.pretrain_backbone(records, bcfg, tc, params=params, on_step=on_step)
    return params


def generate_for(model: D.Model, record: dict, cfg: RunConfig, seed: int, conditioned: bool = True) -> np.ndarray:
    cond = D.conditions_from_record(record) if conditioned else None
    grid = D.sample_latent(model, record["image"], cond, cfg.frames, cfg.sample_steps, seed, patch=cfg.patch, group=cfg.group)
    return codec.decode_latent(grid)


def evaluate(model: D.Model, records, cfg: RunConfig, seed: int, conditioned: bool = True) -> M.MetricReport:
    rep = M.MetricReport()
    for i, rec in enumerate(records):
        if rec.get("frames") is None:
            continue
        video = generate_for(model, rec, cfg, seed + i, conditioned)
        rep.add(rec["meta"].get("name", f"clip{i:03d}"), video, rec["frames"], rec["fused_masks"])
    return rep


def aggregate_value(rep: M.MetricReport, protocol: str, key: str) -> float:
    return next(r[key] for r in rep.aggregate() if r["protocol"] == protocol)


@dataclass
class AblationRow:
    name: str
    masked_psnr: list[float] = field(default_factory=list)
    full_psnr: list[float] = field(default_factory=list)
    masked_ssim: list[float] = field(default_factory=list)
    final_loss: list[float] = field(default_factory=list)

    def mean(self, key: str) -> float:
        return float(np.mean(getattr(self, key)))


@dataclass
class AblationTable:
    rows: list[AblationRow]
    seeds: list[int]

    def row(self, name: str) -> AblationRow:
        return next(r for r in self.rows if r.name == name)

    def ordering_holds(self) -> tuple[bool, bool]:
        """(full >= every ablation, w/o 3D pc is the worst) on mean masked PSNR."""
        full = self.row("full").mean("masked_psnr")
        others = [r.mean("masked_psnr") for r in self.rows if r.name != "full"]
        pc = self.row("w/o 3D pc").mean("masked_psnr")
        return full >= max(others), pc <= min(r.mean("masked_psnr") for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "masked_psnr", "full_psnr", "masked_ssim", "final_loss"] + [f"masked_psnr_seed{s}" for s in self.seeds])
        for r in self.rows:
            w.writerow(
                [r.name] + [f"{r.mean(k):.4f}" for k in ("masked_psnr", "full_psnr", "masked_ssim", "final_loss")]
                + [f"{v:.4f}" for v in r.masked_psnr]
            )
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'config':<18} {'masked PSNR':>12} {'full PSNR':>10} {'masked SSIM':>12}"]
        for r in self.rows:
            lines.append(f"{r.name:<18} {r.mean('masked_psnr'):>12.3f} {r.mean('full_psnr'):>10.3f} {r.mean('masked_ssim'):>12.4f}")
        return "\n".join(lines)


def run_ablation(cfg: RunConfig, seeds, records=None, log=None) -> AblationTable:
    """Train the four condition configurations per seed with one shared budget.

    Each seed draws its own clips (unless ``records`` is given) and backbone;
    every configuration of that seed sees the same clips, backbone, record
    order, timesteps and noise. Scores are masked PSNR of conditioned
    samples against the ground-truth clips.
    """
    rows = [AblationRow(name) for name, _ in ABLATIONS]
    for seed in seeds:
        scfg = replace(cfg, seed=seed)
        recs = records if records is not None else make_records(scfg)
        bp = prepare_backbone(scfg, recs)
        bcfg = scfg.backbone()
        for row, (name, flags) in zip(rows, ABLATIONS):
            res = D.train(recs, bp, bcfg, scfg.train(**flags), ccfg=scfg.control())
            model = D.Model(bp, bcfg, res.control, res.ccfg)
            rep = evaluate(model, recs, scfg, seed=1000 * seed + 17)
            row.masked_psnr.append(aggregate_value(rep, "masked", "psnr"))
            row.full_psnr.append(aggregate_value(rep, "full", "psnr"))
            row.masked_ssim.append(aggregate_value(rep, "masked", "ssim"))
            row.final_loss.append(float(np.mean(res.losses[-20:])) if res.losses else float("nan"))
            if log:
                log(f"seed {seed} {name}: masked PSNR {row.masked_psnr[-1]:.3f}")
    return AblationTable(rows, list(seeds))
