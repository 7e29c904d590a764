"""``toothfill`` command line.

Every command writes a ``*.run.json`` record (arguments, resolved config,
seeds, versions, outputs) next to its outputs. Logging goes to stderr.
Exit codes: 0 success, 1 other package error, 2 configuration, 3 I/O,
4 validation, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, _backend
from . import config as cfgmod
from .augment import CompletionSample, build_dataset, derive_seed, load_manifest
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import Trainer, complete, linear_schedule
from .denoiser import DenoiserUNet
from .errors import ConfigError, DataIOError, ToothfillError, ValidationError
from .geometry import SdfGrid
from .meshio import load_arch, marching_cubes, save_arch, write_obj
from .metrics import evaluate_sample, write_reports_jsonl, write_table
from .phantom import generate_phantom_arch

log = logging.getLogger("toothfill")


def _write_json(path: Path, obj):
    try:
        path.write_text(json.dumps(obj, indent=1, sort_keys=True))
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def _run_record(path: Path, command: str, args, outputs, config=None, seeds=None):
    """Write the run record; it omits timestamps so reruns produce identical bytes."""
    rec = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "config": config,
        "seeds": seeds or {},
        "outputs": [str(o) for o in outputs],
        "versions": {
            "toothfill": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
            "kernels": _backend.ACTIVE,
        },
    }
    _write_json(path, rec)


def _mkdir(p: Path):
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {p}: {exc}") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_phantom(args):
    out = Path(args.out)
    _mkdir(out)
    jaws = ("lower", "upper") if args.jaw == "both" else (args.jaw,)
    outputs = []
    for jaw in jaws:
        arch = generate_phantom_arch(args.seed, jaw)
        stem = out / f"phantom_{args.seed}_{jaw}"
        save_arch(arch, stem.with_suffix(".obj"), stem.with_suffix(".json"))
        outputs += [stem.with_suffix(".obj"), stem.with_suffix(".json")]
        log.info("wrote %s (%d vertices)", stem.with_suffix(".obj"), arch.mesh.n_vertices)
    _run_record(out / "phantom.run.json", "phantom", args, outputs, seeds={"seed": args.seed})


def _label_path(mesh_path: Path) -> Path:
    return mesh_path.with_suffix(".json")


def cmd_augment(args):
    cfg = cfgmod.load_config(args.config, args.set)
    if args.out:
        cfg["data"]["out_dir"] = args.out
    if args.seed is not None:
        cfg["data"]["master_seed"] = args.seed
    aug = cfgmod.augment_config(cfg)
    data = cfg["data"]
    arches = []
    for s in data["phantom_seeds"]:
        arches.append((generate_phantom_arch(s, "lower"), generate_phantom_arch(s, "upper")))
    antags = data["antagonists"]
    if antags and len(antags) != len(data["arches"]):
        raise ConfigError("[data] antagonists must list one entry per arch (use 'none' to skip)")
    for i, m in enumerate(data["arches"]):
        mp = cfgmod.resolve(cfg, m)
        arch = load_arch(mp, _label_path(mp))
        antag = None
        if antags and antags[i].lower() != "none":
            ap = cfgmod.resolve(cfg, antags[i])
            antag = load_arch(ap, _label_path(ap))
        arches.append((arch, antag))
    if not arches:
        raise ConfigError("no input arches: set [data] arches or phantom_seeds")
    out = Path(data["out_dir"]) if args.out else cfgmod.resolve(cfg, data["out_dir"])
    manifest = build_dataset(arches, aug, out, data["master_seed"])
    log.info("%d samples, %d failures -> %s", len(manifest["samples"]), len(manifest["failures"]), out)
    _run_record(out / "augment.run.json", "augment", args, [out / "manifest.json"],
                cfgmod.echo(cfg), {"master_seed": data["master_seed"]})


def cmd_train(args):
    cfg = cfgmod.load_config(args.config, args.set)
    tr = cfg["train"]
    for key in ("manifest", "steps", "seed"):
        if getattr(args, key) is not None:
            tr[key] = getattr(args, key)
    if args.out:
        tr["checkpoint"] = args.out
    manifest_path = Path(tr["manifest"]) if args.manifest else cfgmod.resolve(cfg, tr["manifest"])
    _, samples = load_manifest(manifest_path)
    if not samples:
        raise ValidationError(f"manifest {manifest_path} lists no samples")
    resolution = samples[0].context.resolution
    torch.manual_seed(tr["seed"])
    network = DenoiserUNet(cfgmod.unet_config(cfg, resolution))
    schedule = linear_schedule(tr["T"], tr["beta_start"], tr["beta_end"])
    trainer = Trainer(network, schedule, cfgmod.guidance_config(cfg), tr["lr"], tr["seed"])
    batch_rng = np.random.default_rng(derive_seed(tr["seed"], 1))
    ckpt = Path(tr["checkpoint"]) if args.out else cfgmod.resolve(cfg, tr["checkpoint"])
    loss_log = ckpt.with_suffix(".loss.tsv")
    lines = ["step\tloss"]
    bs = min(tr["batch_size"], len(samples))
    loss = float("nan")
    for step in range(1, tr["steps"] + 1):
        idx = np.arange(len(samples)) if bs == len(samples) else batch_rng.choice(len(samples), bs, replace=False)
        loss = trainer.step([samples[i] for i in idx])
        lines.append(f"{step}\t{loss:.8g}")
        if step % tr["log_every"] == 0 or step == tr["steps"]:
            log.info("step %d loss %.5f", step, loss)
    save_checkpoint(ckpt, network, schedule, trainer.guidance,
                    {"steps": tr["steps"], "seed": tr["seed"], "final_loss": loss})
    try:
        loss_log.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataIOError(f"cannot write {loss_log}: {exc}") from exc
    _run_record(ckpt.with_suffix(".run.json"), "train", args, [ckpt, loss_log],
                cfgmod.echo(cfg), {"seed": tr["seed"]})


def _load_grid(path) -> SdfGrid:
    return SdfGrid.load(path)


def cmd_complete(args):
    ck = load_checkpoint(args.checkpoint)
    context = _load_grid(args.context)
    antag = _load_grid(args.antagonist) if args.antagonist else None
    if antag is not None and not ck.network.config.antagonist_enabled:
        raise ValidationError("checkpoint has no antagonist branch")
    w = ck.guidance.w if args.w is None else args.w
    pred = complete(ck.network, context, antag, args.steps, w, args.seed, ck.schedule)
    out = Path(args.out)
    pred.save(out)
    write_obj(marching_cubes(pred), out.with_suffix(".obj"))
    _run_record(out.with_suffix(".run.json"), "complete", args, [out, out.with_suffix(".obj")],
                seeds={"seed": args.seed})


def cmd_eval(args):
    manifest, samples = load_manifest(args.manifest)
    out = Path(args.out)
    _mkdir(out)
    entries = manifest["samples"]
    preds = []
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        pred_dir = out / "predictions"
        _mkdir(pred_dir)
        w = ck.guidance.w if args.w is None else args.w
        for i, (e, s) in enumerate(zip(entries, samples)):
            antag = s.antagonist if ck.network.config.antagonist_enabled else None
            p = complete(ck.network, s.context, antag, args.steps, w, derive_seed(args.seed, i), ck.schedule)
            p.save(pred_dir / f"{e['id']}.sdfg")
            preds.append(p)
    elif args.predictions:
        preds = [_load_grid(Path(args.predictions) / f"{e['id']}.sdfg") for e in entries]
    else:
        raise ConfigError("eval needs --checkpoint or --predictions")
    reports = [evaluate_sample(p, s, args.chamfer_samples, args.seed) for p, s in zip(preds, samples)]
    write_reports_jsonl(reports, out / "reports.jsonl", [e["id"] for e in entries])
    write_table(reports, out / "table.txt")
    _run_record(out / "eval.run.json", "eval", args, [out / "reports.jsonl", out / "table.txt"],
                seeds={"seed": args.seed})


def cmd_mesh(args):
    grid = _load_grid(args.input)
    mesh = marching_cubes(grid, args.iso)
    out = Path(args.output)
    write_obj(mesh, out)
    _run_record(out.with_suffix(".run.json"), "mesh", args, [out])


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toothfill", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap on torch worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="write procedural phantom arches")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--jaw", choices=("lower", "upper", "both"), default="both")
    s.set_defaults(func=cmd_phantom)

    def with_config(s):
        s.add_argument("--config", help="INI config file")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")

    s = sub.add_parser("augment", help="build a damaged/complete dataset")
    with_config(s)
    s.add_argument("--out", help="output directory (overrides [data] out_dir)")
    s.add_argument("--seed", type=int, help="master seed (overrides [data] master_seed)")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", help="train the denoiser on a manifest")
    with_config(s)
    s.add_argument("--manifest")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="checkpoint path (overrides [train] checkpoint)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("complete", help="complete one context grid")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--context", required=True)
    s.add_argument("--antagonist")
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--w", type=float, default=None, help="guidance scale (default: checkpoint's)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output .sdfg; an .obj is written alongside")
    s.set_defaults(func=cmd_complete)

    s = sub.add_parser("eval", help="score completions against a manifest")
    s.add_argument("--manifest", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--predictions", help="directory of <sample id>.sdfg files")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--w", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--chamfer-samples", type=int, default=10_000)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("mesh", help="extract the zero level set of an .sdfg as OBJ")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--iso", type=float, default=0.0)
    s.set_defaults(func=cmd_mesh)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        torch.set_num_threads(args.threads)
    try:
        args.func(args)
    except ToothfillError as exc:
        kind = type(exc).__name__
        print(f"toothfill {args.command}: {kind}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"toothfill {args.command}: I/O error: {exc}", file=sys.stderr)
        return DataIOError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
