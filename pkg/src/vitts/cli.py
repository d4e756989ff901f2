"""Command line entry points.

    vitts synth-data --config run.json
    vitts pretrain   --config run.json --stage encoder|denoiser [--resume]
    vitts finetune   --config run.json [--text-only] [--random-image] ...
    vitts sample     --config run.json [--split test-unseen]
    vitts eval       --config run.json [--splits test-seen test-unseen]

Every command writes ``config.json`` (resolved config plus version) into its
run directory. Logs and reports are JSON lines.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import audio, checkpoint as ckpt, data, scenes, train
from .config import ConfigError, RunConfig, write_snapshot
from .denoiser import make_config
from .diffusion import make_schedule
from .model import collate

log = logging.getLogger("vitts")

ABLATION_FLAGS = ("no_encoder_pretrain", "no_decoder_pretrain", "text_only", "random_image", "from_scratch")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def schedule_of(cfg: RunConfig):
    return make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)


def manifest_of(cfg: RunConfig) -> scenes.DatasetManifest:
    path = Path(cfg.data_dir) / "manifest.jsonl"
    if not path.exists():
        raise CommandError(f"dataset not found: {path} (run `vitts synth-data` first)")
    return scenes.load_manifest(path)


def stage_dir(cfg: RunConfig, stage: str) -> Path:
    return Path(cfg.checkpoint_dir) / stage


def eval_records(manifest: scenes.DatasetManifest, split: str, subset: Optional[int]) -> list:
    """The evaluated part of a split: ``subset`` records (default up to 50) in a fixed random draw."""
    recs = manifest.split(split)
    k = min(50, len(recs)) if subset is None else min(subset, len(recs))
    if k == len(recs):
        return recs
    idx = np.sort(np.random.default_rng([len(recs), k, 13]).choice(len(recs), size=k, replace=False))
    return [recs[i] for i in idx]


def _fresh_log(path: Path, resume: bool) -> None:
    if not resume and path.exists():
        path.unlink()


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(cfg: RunConfig) -> dict:
    out = Path(cfg.data_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CommandError(f"cannot create data directory {out}: {e}") from e
    try:
        manifest = scenes.generate_dataset(
            out, cfg.n_samples, cfg.n_rooms, cfg.n_holdout, cfg.seed, cfg.split_ratios, cfg.image_mode
        )
    except scenes.ManifestError as e:
        raise ConfigError(str(e)) from e
    write_snapshot(cfg, out, "synth-data")
    counts = {s: len(manifest.split(s)) for s in scenes.SPLITS}
    print(json.dumps({"data_dir": str(out), "counts": counts}))
    return counts


def cmd_pretrain(cfg: RunConfig, stage: str, resume: bool = False, stop_after: Optional[int] = None):
    run = stage_dir(cfg, stage)
    write_snapshot(cfg, run, f"pretrain --stage {stage}")
    kw = dict(
        seed=cfg.seed, lr=cfg.lr, warmup=cfg.warmup, batch_size=cfg.batch_size, grad_clip=cfg.grad_clip,
        ckpt_path=run / "checkpoint.npz", ckpt_every=cfg.ckpt_every, resume=resume,
        log_path=run / "log.jsonl", log_every=cfg.log_every, stop_after=stop_after, bf16=cfg.bf16,
    )
    _fresh_log(run / "log.jsonl", resume)
    if stage == "encoder":
        _, res = train.pretrain_encoder(steps=cfg.encoder_steps, **kw)
    elif stage == "denoiser":
        items = data.load_items(manifest_of(cfg), "train")
        _, res = train.pretrain_denoiser(
            items, make_config(cfg.model_size), schedule_of(cfg), steps=cfg.denoiser_steps,
            literal_percent=cfg.literal_percent, masked_only=cfg.masked_only_loss, **kw,
        )
    else:
        raise CommandError(f"unknown stage {stage!r}")
    print(json.dumps({"stage": stage, "step": res.last_step, "loss": res.losses[-1]["total"] if res.losses else None}))
    return res


def _pretrained(cfg: RunConfig, stage: str, skip: bool) -> Optional[dict]:
    if skip:
        return None
    path = stage_dir(cfg, stage) / "checkpoint.npz"
    if not path.exists():
        raise CommandError(f"missing pretrained {stage} checkpoint {path}; pretrain it or pass --from-scratch")
    header, arrays = ckpt.load_checkpoint(path)
    if header.get("kind") != stage:
        raise ckpt.CheckpointError(f"{path}: expected a {stage} checkpoint, got {header.get('kind')!r}")
    if stage == "denoiser" and header.get("config_name") != cfg.model_size:
        raise ckpt.CheckpointError(f"{path}: denoiser size {header.get('config_name')} != {cfg.model_size}")
    return arrays


def cmd_finetune(cfg: RunConfig, resume: bool = False, stop_after: Optional[int] = None):
    run = stage_dir(cfg, cfg.finetune_name)
    enc = _pretrained(cfg, "encoder", cfg.from_scratch or cfg.no_encoder_pretrain)
    den = _pretrained(cfg, "denoiser", cfg.from_scratch or cfg.no_decoder_pretrain)
    manifest = manifest_of(cfg)
    write_snapshot(cfg, run, "finetune")
    items = data.subsample(data.load_items(manifest, "train"), cfg.train_fraction, cfg.seed)
    if cfg.random_image:
        items = data.permute_images(items, cfg.seed)
    model = train.build_tts(make_config(cfg.model_size), enc, den, text_only=cfg.text_only, seed=cfg.seed)
    _fresh_log(run / "log.jsonl", resume)
    sched = schedule_of(cfg)
    model, res = train.finetune(
        model, items, sched, steps=cfg.finetune_steps, batch_size=cfg.batch_size, seed=cfg.seed, lr=cfg.lr,
        warmup=cfg.warmup, grad_clip=cfg.grad_clip, ckpt_path=run / "checkpoint.npz", ckpt_every=cfg.ckpt_every,
        resume=resume, log_path=run / "log.jsonl", log_every=cfg.log_every, stop_after=stop_after, bf16=cfg.bf16,
    )
    valid = data.load_items(manifest, "valid")
    summary = {"step": res.last_step, "train": res.losses[-1] if res.losses else None}
    if valid:
        summary["valid"] = train.validation_loss(model, valid, sched)
    (run / "metrics.jsonl").write_text(json.dumps(summary, sort_keys=True) + "\n")
    print(json.dumps(summary))
    return model, res


def cmd_sample(cfg: RunConfig, checkpoint=None, split: Optional[str] = None, out_dir=None) -> Path:
    split = split or cfg.split
    path = Path(checkpoint) if checkpoint else stage_dir(cfg, cfg.finetune_name) / "checkpoint.npz"
    model = train.load_tts(path)
    model.eval()
    manifest = manifest_of(cfg)
    recs = eval_records(manifest, split, cfg.eval_subset)
    if not recs:
        raise CommandError(f"split {split!r} is empty")
    wanted = {r.sample_id for r in recs}
    items = [it for it in data.load_items(manifest, split) if it.sample_id in wanted]
    if cfg.random_image:
        items = data.permute_images(items, cfg.seed, pool=data.load_items(manifest, list(scenes.SPLITS)))
    out = Path(out_dir) if out_dir else Path(cfg.output_dir) / cfg.finetune_name
    write_snapshot(cfg, out, f"sample --split {split}")
    dest = out / split
    dest.mkdir(parents=True, exist_ok=True)
    sched = schedule_of(cfg)
    for start in range(0, len(items), cfg.sample_batch):
        chunk = items[start : start + cfg.sample_batch]
        seed = int(np.random.SeedSequence([cfg.seed, 5, start]).generate_state(1)[0])
        mels = model.synthesize(collate(chunk), sched, seed=seed, teacher_forcing=cfg.teacher_forcing)
        for it, mel in zip(chunk, mels):
            wave = audio.griffin_lim(mel, iterations=cfg.gl_iters, seed=seed)
            audio.write_wav(dest / f"{it.sample_id}.wav", wave)
            audio.write_mel(dest / f"{it.sample_id}.mel", mel.astype(np.float32))
            # shares the mel sidecar file, so keep its fields
            meta = {"sample_id": it.sample_id, "split": split, "frames": int(mel.shape[0]), "bins": int(mel.shape[1]),
                    "dtype": "float32", "seed": seed,
                    "teacher_forcing": cfg.teacher_forcing, "checkpoint": str(path), "tail_onset": it.tail_onset}
            (dest / f"{it.sample_id}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    print(json.dumps({"split": split, "n": len(items), "out": str(dest)}))
    return dest


def _mean_std(xs) -> dict:
    xs = [x for x in xs if x is not None]
    if not xs:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(np.mean(xs)), "std": float(np.std(xs)), "n": len(xs)}


def cmd_eval(cfg: RunConfig, generated=None, splits=None) -> dict:
    gen_root = Path(generated) if generated else Path(cfg.output_dir) / cfg.finetune_name
    splits = list(splits or cfg.eval_splits)
    manifest = manifest_of(cfg)
    report, lines = {}, []
    for split in splits:
        recs = eval_records(manifest, split, cfg.eval_subset)
        missing = [str(gen_root / split / f"{r.sample_id}.wav") for r in recs
                   if not (gen_root / split / f"{r.sample_id}.wav").exists()
                   or not (gen_root / split / f"{r.sample_id}.mel").exists()]
        if missing:
            raise CommandError("missing generated items:\n  " + "\n  ".join(missing))
        rows = []
        for r in recs:
            gen, _ = audio.read_wav(gen_root / split / f"{r.sample_id}.wav")
            ref, _ = audio.read_wav(manifest.root / r.wav)
            mel_gen = audio.read_mel(gen_root / split / f"{r.sample_id}.mel")
            mel_ref = audio.read_mel(manifest.root / r.mel)
            rec = audio.metric_record(r.sample_id, gen, ref, mel_gen, mel_ref, onset=r.tail_onset)
            rows.append({"split": split, **rec})
        lines += rows
        report[split] = {"rte": _mean_std(x["rte"] for x in rows), "mcd": _mean_std(x["mcd"] for x in rows)}
    (gen_root / "metrics.jsonl").write_text("".join(json.dumps(x, sort_keys=True) + "\n" for x in lines))
    (gen_root / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    table = format_table(report)
    (gen_root / "report.txt").write_text(table)
    print(table, end="")
    return report


def format_table(report: dict) -> str:
    def cell(s):
        return "n/a" if s["mean"] is None else f"{s['mean']:.4f} ± {s['std']:.4f}"

    rows = [f"{'split':<12} {'n':>3}  {'RTE (s)':<18} {'MCD (dB)':<18}"]
    for split, r in report.items():
        rows.append(f"{split:<12} {r['mcd']['n']:>3}  {cell(r['rte']):<18} {cell(r['mcd']):<18}")
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitts", description="Visual text-to-speech on synthetic room scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON run config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("synth-data", help="render the synthetic scene corpus"))
    sp = common(sub.add_parser("pretrain", help="masked-LM encoder or span-masked denoiser pretraining"))
    sp.add_argument("--stage", choices=["encoder", "denoiser"], required=True)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--stop-after", type=int, help="stop (with a checkpoint) after this step")
    sp.add_argument("--literal-percent", action="store_true", help="span starts at p/100 instead of p")
    sp = common(sub.add_parser("finetune", help="fine-tune the full model"))
    for flag in ABLATION_FLAGS:
        sp.add_argument("--" + flag.replace("_", "-"), action="store_true")
    sp.add_argument("--train-fraction", type=float)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--stop-after", type=int)
    sp = common(sub.add_parser("sample", help="synthesize WAV and mel outputs for a split"))
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--split")
    sp.add_argument("--out", type=Path)
    sp.add_argument("--subset", type=int)
    sp.add_argument("--predicted-durations", action="store_true", help="disable teacher forcing")
    for flag in ABLATION_FLAGS:
        sp.add_argument("--" + flag.replace("_", "-"), action="store_true", help=argparse.SUPPRESS)
    sp = common(sub.add_parser("eval", help="RTE and MCD against the references"))
    sp.add_argument("--generated", type=Path)
    sp.add_argument("--splits", nargs="+")
    sp.add_argument("--subset", type=int)
    for flag in ABLATION_FLAGS:
        sp.add_argument("--" + flag.replace("_", "-"), action="store_true", help=argparse.SUPPRESS)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.steps is not None:
        key = {"pretrain": f"{getattr(args, 'stage', '')}_steps", "finetune": "finetune_steps"}.get(args.command)
        if key is None:
            raise ConfigError(f"--steps does not apply to {args.command}")
        over[key] = args.steps
    for flag in ABLATION_FLAGS:
        if getattr(args, flag, False):
            over[flag] = True
    if getattr(args, "literal_percent", False):
        over["literal_percent"] = True
    if getattr(args, "train_fraction", None) is not None:
        over["train_fraction"] = args.train_fraction
    if getattr(args, "subset", None) is not None:
        over["eval_subset"] = args.subset
    if getattr(args, "predicted_durations", False):
        over["teacher_forcing"] = False
    return cfg.replace(**over) if over else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "synth-data":
            cmd_synth_data(cfg)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, args.stage, resume=args.resume, stop_after=args.stop_after)
        elif args.command == "finetune":
            cmd_finetune(cfg, resume=args.resume, stop_after=args.stop_after)
        elif args.command == "sample":
            cmd_sample(cfg, args.checkpoint, args.split, args.out)
        elif args.command == "eval":
            cmd_eval(cfg, args.generated, args.splits)
    except (ConfigError, CommandError, ckpt.CheckpointError, scenes.ManifestError, FileNotFoundError) as e:
        print(f"vitts {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
