"""Command-line entry point: data generation, training, sampling, evaluation, ablations, reruns."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import backbone as bb
from . import condpipe
from .codec import decode_latent
from . import config as C
from . import control3d as c3
from . import diffusion as D
from . import experiments as X
from . import metrics as M
from .numerics import blob, gradcheck
from .scenegen import dump_frames

MANIFEST = "run_manifest.json"
MANIFEST_FORMAT = "hoivid-run/1"


class CliError(Exception):
    """Reported as a one-line diagnostic with exit code 1."""


# -- run directories and manifests --------------------------------------------


def code_hash() -> str:
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def fresh_dir(out: str | None, command: str) -> Path:
    if out is None:
        base = Path("runs")
        i = 0
        while (base / f"{command}-{i:03d}").exists():
            i += 1
        out = str(base / f"{command}-{i:03d}")
    d = Path(out)
    if d.exists() and any(d.iterdir()):
        raise CliError(f"output directory {d} is not empty; runs never overwrite")
    d.mkdir(parents=True, exist_ok=True)
    return d


def file_hashes(d: Path) -> dict[str, str]:
    out = {}
    for p in sorted(d.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            out[str(p.relative_to(d))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def write_manifest(d: Path, command: str, args: dict, cfg: C.RunConfig, started: float, inputs: dict) -> dict:
    man = {
        "format": MANIFEST_FORMAT,
        "command": command,
        "args": args,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "code_hash": code_hash(),
        "version": __version__,
        "seeds": {"seed": cfg.seed, "sample_seed": cfg.sample_seed},
        "inputs": inputs,
        "outputs": file_hashes(d),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (d / MANIFEST).write_text(json.dumps(man, indent=2, sort_keys=True))
    return man


def dir_digest(path: Path) -> str:
    h = hashlib.sha256()
    for name, digest in file_hashes(path).items():
        h.update(name.encode())
        h.update(digest.encode())
    return h.hexdigest()[:16]


# -- inputs ----------------------------------------------------------------------


def dataset_dir(path: str) -> Path:
    p = Path(path)
    if (p / "dataset" / "manifest.json").exists():
        return p / "dataset"
    if (p / "manifest.json").exists():
        return p
    raise CliError(f"{p}: no dataset found (expected manifest.json or dataset/manifest.json)")


def read_records(path: str) -> list[dict]:
    return list(condpipe.read_dataset(dataset_dir(path)).records)


def parse_source(src: str) -> tuple[str, int]:
    """``DIR`` or ``DIR:INDEX``; a dataset or an earlier sample run."""
    path, _, idx = src.rpartition(":") if ":" in src else (src, "", "0")
    try:
        return path, int(idx)
    except ValueError:
        raise CliError(f"bad source {src!r}: expected DIR or DIR:INDEX") from None


def load_source(src: str) -> dict:
    path, idx = parse_source(src)
    p = Path(path)
    if not p.exists():
        raise CliError(f"input {p} does not exist")
    if (p / "conditions").is_dir():
        arrays = blob.load_named(p / "conditions", prefix="")
        return {
            "image": arrays["image"],
            "pointclouds": arrays["pointclouds"],
            "tracking": arrays["tracking"],
            "frames": None,
            "fused_masks": None,
            "meta": {"name": p.name},
        }
    recs = read_records(path)
    if not 0 <= idx < len(recs):
        raise CliError(f"{path}: record index {idx} out of range (0..{len(recs) - 1})")
    return recs[idx]


def load_model(path: str) -> D.Model:
    p = Path(path)
    if not (p / "control.json").exists():
        raise CliError(f"{p}: no control checkpoint (run `train` first)")
    bp, bcfg, _ = bb.load_checkpoint(p, "backbone")
    cp, ccfg, _ = c3.load_control(p)
    return D.Model(bp, bcfg, cp, ccfg)


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args, cfg: C.RunConfig, out: Path) -> dict:
    records = X.make_records(cfg)
    condpipe.write_dataset(records, out / "dataset")
    specs = [r["meta"]["spec"] for r in records]
    (out / "specs.json").write_text(json.dumps(specs, indent=2, sort_keys=True))
    print(f"wrote {len(records)} clips to {out / 'dataset'}")
    return {}


def cmd_pretrain(args, cfg: C.RunConfig, out: Path) -> dict:
    records = read_records(args.data)
    bcfg = cfg.backbone()
    steps = cfg.pretrain_steps or cfg.steps
    params, losses = D.pretrain_backbone(records, bcfg, cfg.train(steps=steps), params=bb.init_params(bcfg, cfg.seed))
    bb.save_checkpoint(params, bcfg, out, "backbone")
    D.write_loss_csv(out / "loss.csv", losses)
    print(f"backbone fitted for {len(losses)} steps; final loss {losses[-1] if losses else float('nan'):.5f}")
    return {"data": dir_digest(dataset_dir(args.data))}


def cmd_train(args, cfg: C.RunConfig, out: Path) -> dict:
    records = read_records(args.data)
    inputs = {"data": dir_digest(dataset_dir(args.data))}
    if args.backbone:
        bp, bcfg, _ = bb.load_checkpoint(args.backbone, "backbone")
        if bcfg != cfg.backbone():
            raise CliError(f"{args.backbone}: backbone config does not match the run config")
        inputs["backbone"] = bb.checksum(bp)
    else:
        bp, bcfg = X.prepare_backbone(cfg, records), cfg.backbone()

    def log(step, loss):
        if step == 1 or step % 50 == 0:
            print(f"step {step} loss {loss:.5f}", flush=True)

    res = D.train(records, bp, bcfg, cfg.train(), out_dir=out, ccfg=cfg.control(), on_step=log)
    bb.save_checkpoint(bp, bcfg, out, "backbone")
    print(f"trained {len(res.losses)} steps; checkpoint in {out}")
    return inputs


def cmd_sample(args, cfg: C.RunConfig, out: Path) -> dict:
    model = load_model(args.model)
    cond_src = args.conditions_from or args.source
    img_src = args.image_from or args.source
    if cond_src is None or img_src is None:
        raise CliError("sample needs --source, or both --conditions-from and --image-from")
    crec, irec = load_source(cond_src), load_source(img_src)
    cond = None if args.unconditioned else D.conditions_from_record(crec)
    grid = D.sample_latent(model, irec["image"], cond, cfg.frames, cfg.sample_steps, cfg.sample_seed, patch=cfg.patch, group=cfg.group)
    video = decode_latent(grid)
    blob.save(out / "video.blob", video)
    (out / "conditions").mkdir()
    blob.save_named(out / "conditions", {"image": np.asarray(irec["image"]), "pointclouds": crec["pointclouds"], "tracking": crec["tracking"]})
    ref = None
    if parse_source(cond_src) == parse_source(img_src) and crec.get("frames") is not None:
        ref = cond_src
    (out / "sources.json").write_text(json.dumps({"conditions": cond_src, "image": img_src, "reference": ref, "conditioned": cond is not None}, indent=2))
    if args.dump_frames:
        dump_frames(out / "frames", video)
    print(f"sampled {video.shape[0]} frames to {out / 'video.blob'}")
    return {"model": dir_digest(Path(args.model))}


def _test_pairs(args) -> list[tuple[str, np.ndarray, dict]]:
    pairs = []
    if args.test:
        entries = json.loads(Path(args.test).read_text())
        for e in entries:
            pairs.append((e["name"], blob.load(e["gen"]), load_source(e["ref"])))
    for s in args.samples or []:
        src = json.loads((Path(s) / "sources.json").read_text())
        if src.get("reference") is None:
            print(f"skipping {s}: hybrid sample has no ground truth")
            continue
        pairs.append((Path(s).name, blob.load(Path(s) / "video.blob"), load_source(src["reference"])))
    if not pairs:
        raise CliError("nothing to evaluate (give --test FILE or --samples DIR...)")
    return pairs


def cmd_eval(args, cfg: C.RunConfig, out: Path) -> dict:
    rep = M.MetricReport()
    for name, video, ref in _test_pairs(args):
        rep.add(name, video, ref["frames"], ref["fused_masks"])
    (out / "report.csv").write_text(rep.to_csv())
    for r in rep.aggregate():
        print(f"{r['protocol']:>6}: L1 {r['l1']:.3f} PSNR {r['psnr']:.3f} SSIM {r['ssim']:.4f} ST-SSIM {r['st_ssim']:.4f} GMSD-T {r['gmsd_t']:.4f}")
    return {}


def cmd_ablate(args, cfg: C.RunConfig, out: Path) -> dict:
    seeds = [int(s) for s in args.seeds.split(",")]
    records = read_records(args.data) if args.data else None
    table = X.run_ablation(cfg, seeds, records=records, log=print)
    (out / "ablation.csv").write_text(table.to_csv())
    (out / "ablation.txt").write_text(table.to_text() + "\n")
    print(table.to_text())
    return {"data": dir_digest(dataset_dir(args.data))} if args.data else {}


def cmd_gradcheck(args, cfg: C.RunConfig, out: Path) -> dict:
    worst = gradcheck.run_op_suite(n_cases=args.cases, seed=cfg.seed)
    worst["masked_diffusion_loss"] = D.end_to_end_gradcheck(n_cases=args.cases, seed=cfg.seed)
    lines = ["op,worst_relative_error"] + [f"{k},{v!r}" for k, v in sorted(worst.items())]
    (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    bad = {k: v for k, v in worst.items() if not v < args.tol}
    for k, v in sorted(worst.items()):
        print(f"{k:<24} {v:.3e} {'ok' if v < args.tol else 'FAIL'}")
    if bad:
        raise CliError(f"{len(bad)} ops exceed relative error {args.tol}: {', '.join(sorted(bad))}")
    return {}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}

# args that only select inputs/outputs; everything else is echoed into the manifest
_CONFIG_FLAGS = ("seed", "n", "steps", "lr", "sample_seed", "sample_steps")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--profile", default="desk", choices=sorted(C.PROFILES), help="base profile (default desk)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", help="fresh output directory (default runs/<command>-NNN)")
    p.add_argument("--seed", type=int, help="master seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hoivid", description="3D-conditioned hand-object video diffusion at desk scale.")
    ap.add_argument("--version", action="version", version=f"hoivid {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="render synthetic clips and build a conditioned dataset")
    _common(p)
    p.add_argument("--n", type=int, help="number of clips")

    p = sub.add_parser("pretrain", help="fit a plain image-to-video backbone")
    _common(p)
    p.add_argument("--data", required=True, help="dataset (gen-data run dir)")
    p.add_argument("--steps", type=int, help="optimizer steps")
    p.add_argument("--lr", type=float)

    p = sub.add_parser("train", help="train the 3D control branch against a frozen backbone")
    _common(p)
    p.add_argument("--data", required=True, help="dataset (gen-data run dir)")
    p.add_argument("--backbone", help="directory holding a backbone checkpoint (default: seeded init)")
    p.add_argument("--steps", type=int, help="optimizer steps")
    p.add_argument("--lr", type=float)

    p = sub.add_parser("sample", help="generate a video from a first frame and 3D conditions")
    _common(p)
    p.add_argument("--model", required=True, help="train run directory")
    p.add_argument("--source", help="DIR[:INDEX] supplying both image and conditions")
    p.add_argument("--conditions-from", help="DIR[:INDEX] supplying point clouds and tracking video")
    p.add_argument("--image-from", help="DIR[:INDEX] supplying the first frame")
    p.add_argument("--unconditioned", action="store_true", help="ignore 3D conditions")
    p.add_argument("--dump-frames", action="store_true", help="also write PPM frames")
    p.add_argument("--sample-seed", type=int)
    p.add_argument("--sample-steps", type=int)

    p = sub.add_parser("eval", help="score generated videos against ground truth")
    _common(p)
    p.add_argument("--test", help="JSON list of {name, gen, ref} entries")
    p.add_argument("--samples", nargs="*", help="sample run directories")

    p = sub.add_parser("ablate", help="train and score the four condition ablations")
    _common(p)
    p.add_argument("--data", help="fixed dataset for every seed (default: per-seed clips)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--steps", type=int, help="optimizer steps per configuration")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    _common(p)
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("rerun", help="re-execute a run from its manifest into a fresh directory")
    p.add_argument("manifest", help=f"path to {MANIFEST} or its run directory")
    p.add_argument("--out", help="fresh output directory")
    p.add_argument("--check", action="store_true", help="exit 1 unless outputs match the original byte for byte")

    p = sub.add_parser("config", help="print the resolved configuration")
    _common(p)
    return ap


def resolve_config(args) -> C.RunConfig:
    file_values = C.load_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        file_values[k.strip()] = C.parse_value(k.strip(), v)
    flags = {k: getattr(args, k, None) for k in _CONFIG_FLAGS}
    return C.build(args.profile, file_values, flags)


def execute(command: str, args, cfg: C.RunConfig, out: str | None) -> Path:
    if cfg.profile not in C.EXECUTABLE_PROFILES:
        raise CliError(f"profile {cfg.profile!r} is reference-only; run with one of {list(C.EXECUTABLE_PROFILES)}")
    d = fresh_dir(out, command)
    started = time.time()
    inputs = COMMANDS[command](args, cfg, d) or {}
    saved = {k: v for k, v in vars(args).items() if k not in ("out", "config", "set", "profile", *_CONFIG_FLAGS)}
    write_manifest(d, command, saved, cfg, started, inputs)
    return d


def cmd_rerun(args) -> int:
    path = Path(args.manifest)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise CliError(f"{path} not found")
    man = json.loads(path.read_text())
    if man.get("format") != MANIFEST_FORMAT:
        raise CliError(f"{path}: not a run manifest")
    cfg = C.from_dict(man["config"])
    ns = argparse.Namespace(**man["args"])
    d = execute(man["command"], ns, cfg, args.out)
    new = json.loads((d / MANIFEST).read_text())["outputs"]
    diff = sorted(k for k in set(new) | set(man["outputs"]) if new.get(k) != man["outputs"].get(k))
    if diff:
        print(f"outputs differ from {path}: {', '.join(diff)}")
        return 1 if args.check else 0
    print(f"reproduced {len(new)} files byte-identically in {d}")
    return 0


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "rerun":
            return cmd_rerun(args)
        cfg = resolve_config(args)
        if args.command == "config":
            sys.stdout.write(C.dump(cfg))
            return 0
        d = execute(args.command, args, cfg, args.out)
        print(f"run manifest: {d / MANIFEST}")
        return 0
    except (CliError, C.ConfigFileError, FileNotFoundError, ValueError, FloatingPointError, RuntimeError) as e:
        print(f"hoivid: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
