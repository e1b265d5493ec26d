"""Command-line entry point: ``talkinghead <subcommand> [options] [key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as config_mod
from . import training
from .checkpoint import Checkpoint
from .data import _read_frame, load_manifest, read_audio, save_manifest, synth_dataset
from .metrics import EvalReport, difference_map, save_difference_map

log = logging.getLogger("talkinghead")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def thread_count() -> int:
    raw = os.environ.get("TCSAN_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"TCSAN_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("TCSAN_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def version_string() -> str:
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0+unknown"
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"v{base}-g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{base}"


# ---------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    keys = config_mod.describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    top = argparse.ArgumentParser(
        prog="talkinghead",
        description="Talking-head generation driven by audio and speech-related AUs.",
        epilog=keys,
        formatter_class=fmt,
    )
    sub = top.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=keys, formatter_class=fmt)
        p.add_argument("--config", help="TOML file with dotted keys")
        p.add_argument("--preset", choices=sorted(config_mod.PRESETS), help="named width preset")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
        return p

    p = add("synth-data", "write a synthetic dataset (clip dirs plus manifest.txt)")
    p.add_argument("--clips", type=int, default=4, help="train clips")
    p.add_argument("--test-clips", type=int, default=0, help="test clips")
    p.add_argument("--frames", type=int, default=30, help="frames per clip")
    p.add_argument("--seed", type=int, default=None, help="data seed (default: config seed)")

    for name, what in (("pretrain-a2au", "audio-to-AU network"), ("pretrain-auclf", "AU classifier")):
        p = add(name, f"pretrain the {what} on the train split")
        p.add_argument("--data", required=True, help="dataset directory or manifest file")
        p.add_argument("--resume", help="checkpoint to continue from")

    p = add("train", "train the full model")
    p.add_argument("--data", required=True)
    p.add_argument("--a2au", help="pretrained audio-to-AU checkpoint")
    p.add_argument("--auclf", help="pretrained AU classifier checkpoint")
    p.add_argument("--resume", help="full-model checkpoint to continue from")

    p = add("generate", "drive an identity image with an audio file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--identity", required=True, help="identity image (PNG)")
    p.add_argument("--audio", required=True, help="driving audio (WAV)")

    p = add("evaluate", "score a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--auclf", help="judge classifier checkpoint (default: the checkpoint's own)")

    p = add("ablate", "train and score ablation variants")
    p.add_argument("--data", required=True)
    p.add_argument("--a2au", required=True)
    p.add_argument("--auclf", required=True)
    p.add_argument(
        "--variant", action="append", required=True,
        help="variant name (repeatable): " + ", ".join([*training.VARIANTS, *training.VARIANT_ALIASES]),
    )

    p = add("diffmap", "write per-frame difference maps for one clip")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip", help="clip id (default: first clip of the split)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    return top


# ---------------------------------------------------------------------------
# subcommands


def _load_ckpt(path) -> Checkpoint:
    return Checkpoint.load(path)


def _manifest(args, cfg):
    return load_manifest(args.data, fps=cfg["data.fps"], workers=args.threads)


def _final_name(step: int) -> str:
    return f"ckpt_{step:08d}.bin"


def cmd_synth_data(args, cfg, out: Path) -> dict:
    seed = cfg["seed"] if args.seed is None else args.seed
    manifest = synth_dataset(
        args.clips, args.frames, seed, n_test=args.test_clips, fps=cfg["data.fps"], workers=args.threads
    )
    save_manifest(manifest, out)
    return {"seed": seed, "outputs": ["manifest.txt"], "clips": len(manifest.train) + len(manifest.test)}


def cmd_pretrain(args, cfg, out: Path, stage: str) -> dict:
    manifest = _manifest(args, cfg)
    tc, mc = config_mod.train_config(cfg), config_mod.model_config(cfg)
    resume = _load_ckpt(args.resume) if args.resume else None
    fn = training.pretrain_audio2au if stage == "a2au" else training.pretrain_au_classifier
    ckpt = fn(manifest, tc, mc, snapshot=config_mod.to_jsonable(cfg), resume=resume)
    name = _final_name(ckpt.step)
    ckpt.save(out / name)
    report = ckpt.meta["report"]
    (out / "pretrain_report.txt").write_text(training.format_au_table(report) + "\n")
    (out / "pretrain_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("%s pretraining done\n%s", stage, training.format_au_table(report))
    return {"outputs": [name, "pretrain_report.txt", "pretrain_report.json"], "report": report}


def cmd_train(args, cfg, out: Path) -> dict:
    manifest = _manifest(args, cfg)
    tc, mc = config_mod.train_config(cfg), config_mod.model_config(cfg)
    resume = _load_ckpt(args.resume) if args.resume else None
    a2au = _load_ckpt(args.a2au) if args.a2au else None
    clf = _load_ckpt(args.auclf) if args.auclf else None
    if resume is not None:
        # a full checkpoint already carries both pretrained parts
        a2au = a2au or resume
        clf = clf or resume
    trainer = training.train_full(
        manifest, tc, mc, a2au, clf, resume=resume, out_dir=out, snapshot=config_mod.to_jsonable(cfg)
    )
    name = _final_name(trainer.step)
    trainer.checkpoint().save(out / name)
    hist = trainer.history
    with open(out / "train_log.csv", "w") as fh:
        cols = sorted({k for r in hist for k in r} - {"step"})
        fh.write(",".join(["step", *cols]) + "\n")
        for r in hist:
            fh.write(",".join([str(r["step"]), *(repr(r.get(c, 0.0)) for c in cols)]) + "\n")
    return {"outputs": [name, "train_log.csv"], "steps": trainer.step}


def cmd_generate(args, cfg, out: Path) -> dict:
    ckpt = _load_ckpt(args.ckpt)
    model = training.model_from_checkpoint(ckpt)
    identity = _read_frame(Path(args.identity))
    audio = read_audio(Path(args.audio))
    frames = training.generate_video(identity, audio, model, fps=cfg["data.fps"])
    frame_dir = out / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    for old in frame_dir.glob("*.png"):
        old.unlink()
    for k, f in enumerate(frames):
        Image.fromarray(np.round(np.clip(f, 0, 1) * 255).astype(np.uint8)).save(frame_dir / f"{k:06d}.png")
    return {"outputs": ["frames/"], "frames": len(frames)}


def _judge(args, ckpt: Checkpoint, mc):
    source = _load_ckpt(args.auclf) if args.auclf else ckpt
    return training.load_classifier(source, mc)


def cmd_evaluate(args, cfg, out: Path) -> dict:
    ckpt = _load_ckpt(args.ckpt)
    model = training.model_from_checkpoint(ckpt)
    manifest = _manifest(args, cfg)
    report = training.evaluate(model, manifest, args.split, _judge(args, ckpt, model.cfg))
    name = f"eval_{args.split}"
    report.write(out, name, label=Path(args.ckpt).stem)
    return {"outputs": [f"{name}.txt", f"{name}.csv"], "report": report.as_row()}


def cmd_ablate(args, cfg, out: Path) -> dict:
    manifest = _manifest(args, cfg)
    tc, mc = config_mod.train_config(cfg), config_mod.model_config(cfg)
    a2au, clf = _load_ckpt(args.a2au), _load_ckpt(args.auclf)
    rows, outputs = [], []
    for variant in args.variant:
        training.variant_settings(variant, tc, mc)  # validate before any training
    for variant in args.variant:
        report, trainer = training.run_ablation(
            manifest, variant, tc, mc, a2au, clf, snapshot=config_mod.to_jsonable(cfg)
        )
        safe = variant.replace("+", "plus_")
        vdir = out / safe
        trainer.checkpoint().save(vdir / _final_name(trainer.step))
        report.write(out, f"eval_{safe}", label=variant)
        outputs += [f"eval_{safe}.txt", f"eval_{safe}.csv", f"{safe}/{_final_name(trainer.step)}"]
        rows.append((variant, report))
    _write_table(out / "eval_ablation.csv", rows)
    outputs.append("eval_ablation.csv")
    return {"outputs": outputs, "reports": {v: r.as_row() for v, r in rows}}


def _write_table(path: Path, rows: list[tuple[str, EvalReport]]):
    lines = []
    for i, (label, rep) in enumerate(rows):
        row = rep.as_row()
        if i == 0:
            lines.append(",".join(["Method", *row]))
        lines.append(",".join([label, *(str(v) if isinstance(v, int) else repr(float(v)) for v in row.values())]))
    path.write_text("\n".join(lines) + "\n")


def cmd_diffmap(args, cfg, out: Path) -> dict:
    ckpt = _load_ckpt(args.ckpt)
    model = training.model_from_checkpoint(ckpt)
    manifest = _manifest(args, cfg)
    clips = manifest.split(args.split)
    if args.clip:
        clips = [c for c in manifest.train + manifest.test if c.clip_id == args.clip]
        if not clips:
            raise ValueError(f"clip {args.clip!r} not found in {args.data}")
    if not clips:
        raise ValueError(f"split {args.split!r} is empty")
    clip = clips[0]
    gen = training.generate_frames(model, clip.identity_frame, clip.mfcc)
    mdir = out / "diffmaps"
    mdir.mkdir(parents=True, exist_ok=True)
    for old in mdir.glob("*.png"):
        old.unlink()
    for k, (g, f) in enumerate(zip(gen, clip.frames)):
        save_difference_map(difference_map(g, f), mdir / f"{k:06d}.png")
    return {"outputs": ["diffmaps/"], "clip": clip.clip_id, "frames": len(gen)}


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain-a2au": lambda a, c, o: cmd_pretrain(a, c, o, "a2au"),
    "pretrain-auclf": lambda a, c, o: cmd_pretrain(a, c, o, "auclf"),
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "diffmap": cmd_diffmap,
}


# ---------------------------------------------------------------------------


def _fail(code: int, kind: str, message: str) -> int:
    line = json.dumps({"status": "error", "exit": code, "kind": kind, "message": " ".join(message.split())})
    print(line, file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = _parser()
    try:
        # overrides may follow options too, which a trailing nargs="*" alone rejects
        args, extra = parser.parse_known_args(argv)
        stray = [a for a in extra if a.startswith("-") or "=" not in a]
        if stray:
            parser.error(f"unrecognized arguments: {' '.join(stray)}")
        args.overrides = list(args.overrides) + extra
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        args.threads = thread_count()
        cfg = config_mod.resolve(args.config, args.overrides, args.preset)
    except (config_mod.ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "usage", str(exc))
    except OSError as exc:
        return _fail(EXIT_RUNTIME, type(exc).__name__, str(exc))

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads)
    out = Path(args.out)
    start = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg, out)
    except Exception as exc:  # noqa: BLE001 - reported as a one-line error
        log.debug("failure", exc_info=True)
        return _fail(EXIT_RUNTIME, type(exc).__name__, str(exc))
    record = {
        "subcommand": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config": config_mod.to_jsonable(cfg),
        "seed": result.pop("seed", cfg["seed"]),
        "version": version_string(),
        "threads": args.threads,
        "wall_time_s": round(time.perf_counter() - start, 3),
        **result,
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"status": "ok", "subcommand": args.command, "out": str(out)}))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
