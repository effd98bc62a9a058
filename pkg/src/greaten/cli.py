"""Command-line entry points: gen-data, augment, train, eval, infer.

Every command resolves its configuration from defaults, an optional config
file, and ``--set key=value`` overrides (overrides win), then writes the
resolved snapshot next to its outputs.  Config problems exit 1 with a
line-precise message; runtime failures exit 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .augment import apply_sta
from .colorize import disparity_to_color, error_to_color, save_png
from .config import ConfigError, RunConfig, load_run_config, resolved_snapshot
from .loss_metrics import compute_metrics
from .model import (
    build_model,
    config_hash,
    load_checkpoint,
    make_optimizer,
    samples_to_batch,
    save_checkpoint,
    train_step,
)
from .refine import stub_relative_depth
from .synthdata import generate_scene, read_pfm, read_sample, write_pfm, write_sample

__all__ = ["main"]

DATA_DIR_ENV = "GREATEN_DATA_DIR"


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so flag mistakes map to exit code 1."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="greaten", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable; wins over --config)",
        )
        p.add_argument("--seed", type=int, help="override the command's primary seed")

    p = sub.add_parser("gen-data", help="materialize a synthetic stereo corpus")
    common(p)
    p.add_argument("--count", type=int, default=4, help="number of scenes")
    p.add_argument("--out", help=f"corpus directory (default ${DATA_DIR_ENV})")

    p = sub.add_parser("augment", help="preview augmentation on one sample")
    common(p)
    p.add_argument("--in", dest="in_dir", required=True, help="sample directory")
    p.add_argument("--out", required=True, help="output sample directory")

    p = sub.add_parser("train", help="train a model on a corpus")
    common(p)
    p.add_argument("--data", help=f"corpus directory (default ${DATA_DIR_ENV})")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--variant", help="override model.variant")

    p = sub.add_parser("eval", help="evaluate a checkpoint or prediction directory")
    common(p)
    p.add_argument("--data", help=f"corpus directory (default ${DATA_DIR_ENV})")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--ckpt", help="checkpoint directory")
    p.add_argument("--pred", help="directory of <sample>.pfm predictions")
    p.add_argument("--iters", type=int, help="refinement iterations")

    p = sub.add_parser("infer", help="write disparity maps for a corpus")
    common(p)
    p.add_argument("--data", help=f"corpus directory (default ${DATA_DIR_ENV})")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--iters", type=int, help="refinement iterations")
    p.add_argument("--dump-seq", action="store_true", help="write every iterate")
    p.add_argument("--dump-masks", action="store_true", help="write gate masks")
    p.add_argument("--dump-points", action="store_true", help="write sampled points")
    return parser


def _data_dir(args) -> Path:
    raw = getattr(args, "data", None) or os.environ.get(DATA_DIR_ENV)
    if not raw:
        raise ConfigError(
            f"no corpus directory: pass --data or set ${DATA_DIR_ENV}"
        )
    path = Path(raw)
    if not path.is_dir():
        raise ConfigError(f"corpus directory does not exist: {path}")
    return path


def _load_config(args) -> RunConfig:
    config_path = args.config
    # eval/infer fall back to the snapshot stored with the checkpoint, so a
    # trained model is evaluated under its own training configuration.
    if config_path is None and getattr(args, "ckpt", None):
        stored = Path(args.ckpt) / "config.resolved.txt"
        if stored.exists():
            config_path = stored
    run = load_run_config(config_path, args.overrides)
    if getattr(args, "steps", None):
        run = dataclasses.replace(
            run, train=dataclasses.replace(run.train, steps=args.steps)
        )
    if getattr(args, "variant", None):
        run = dataclasses.replace(
            run, model=dataclasses.replace(run.model, variant=args.variant)
        )
    if args.seed is not None:
        run = dataclasses.replace(
            run,
            model=dataclasses.replace(run.model, seed=args.seed),
            scene=dataclasses.replace(run.scene, seed=args.seed),
            sta=dataclasses.replace(run.sta, seed=args.seed),
        )
    return run


def _write_snapshot(out_dir: Path, run: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.txt").write_text(resolved_snapshot(run))


def _corpus_samples(data_dir: Path) -> list[Path]:
    dirs = sorted(p for p in data_dir.iterdir() if (p / "disp.pfm").exists())
    if not dirs:
        raise ConfigError(f"no samples under {data_dir} (expected <name>/disp.pfm)")
    return dirs


def _sample_prior(sample, model_cfg, index: int):
    rng = np.random.default_rng(model_cfg.seed * 100003 + index)
    return stub_relative_depth(sample, rng)


def _infer_sequence(model, sample, prior, n_iters):
    batch = samples_to_batch([sample], priors=[prior] if prior is not None else None)
    with torch.no_grad():
        return model(
            batch["left"],
            batch["right"],
            normals_left=batch["normals_left"],
            normals_right=batch["normals_right"],
            d_rel=batch.get("d_rel"),
            n_iters=n_iters,
            return_diagnostics=True,
        )


def _holdout_epe(model, sample, prior, n_iters) -> float:
    model.eval()
    sequence, _ = _infer_sequence(model, sample, prior, n_iters)
    pred = sequence.final[0, 0].clamp(min=0).numpy()
    err = np.abs(pred - sample.disparity_gt)[sample.valid_mask.astype(bool)]
    return float(err.mean())


def cmd_gen_data(args, run: RunConfig) -> int:
    out = Path(getattr(args, "out", None) or os.environ.get(DATA_DIR_ENV) or "")
    if str(out) == "":
        raise ConfigError(f"no output directory: pass --out or set ${DATA_DIR_ENV}")
    _write_snapshot(out, run)
    base_seed = run.scene.seed
    names = []
    for i in range(args.count):
        scene_cfg = dataclasses.replace(run.scene, seed=base_seed + i)
        sample = generate_scene(scene_cfg)
        name = f"scene_{i:04d}"
        write_sample(sample, out / name)
        names.append(name)
    (out / "corpus.json").write_text(
        json.dumps(
            {"count": args.count, "base_seed": base_seed, "samples": names},
            indent=2,
            sort_keys=True,
        )
    )
    print(f"wrote {args.count} scenes to {out}")
    return 0


def cmd_augment(args, run: RunConfig) -> int:
    sample = read_sample(args.in_dir)
    out = Path(args.out)
    rng = np.random.default_rng(run.sta.seed)
    augmented, record = apply_sta(sample, rng, run.sta)
    write_sample(augmented, out)
    _write_snapshot(out, run)
    (out / "augmentation.json").write_text(
        json.dumps(record.to_json(), indent=2, sort_keys=True)
    )
    n_spec, n_trans = len(record.specular), len(record.transparent)
    print(f"augmented {args.in_dir} -> {out} (specular={n_spec} transparent={n_trans})")
    return 0


def cmd_train(args, run: RunConfig) -> int:
    if run.train.single_thread:
        torch.set_num_threads(1)
    data_dir = _data_dir(args)
    out = Path(args.out)
    _write_snapshot(out, run)
    sample_dirs = _corpus_samples(data_dir)
    samples = [read_sample(d) for d in sample_dirs]
    holdout = None
    if run.train.holdout and len(samples) >= 2:
        holdout = samples.pop()
    model = build_model(run.model)
    optimizer, scheduler = make_optimizer(model, run.model, run.train.steps)
    sta_rng = np.random.default_rng(run.model.seed + 1)
    uses_prior = run.model.variant == "greaten_prior"
    holdout_prior = (
        _sample_prior(holdout, run.model, len(samples)) if uses_prior and holdout else None
    )
    log_lines = []
    for step in range(1, run.train.steps + 1):
        picks = [
            (step - 1 + j) % len(samples) for j in range(run.train.batch_size)
        ]
        chosen = []
        for index in picks:
            sample = samples[index]
            if run.model.sta:
                sample, _ = apply_sta(sample, sta_rng, run.sta)
            chosen.append((index, sample))
        priors = (
            [_sample_prior(s, run.model, i) for i, s in chosen] if uses_prior else None
        )
        batch = samples_to_batch([s for _, s in chosen], priors=priors)
        breakdown = train_step(model, batch, optimizer, scheduler)
        if step == 1 or step % run.train.log_every == 0 or step == run.train.steps:
            parts = [f"step={step}", f"total={float(breakdown.total.detach()):.6f}"]
            for name, value in sorted(breakdown.as_floats().items()):
                if name != "total":
                    parts.append(f"{name}={value:.6f}")
            if holdout is not None:
                epe = _holdout_epe(
                    model, holdout, holdout_prior, run.model.infer_iters
                )
                parts.append(f"holdout_epe={epe:.6f}")
                model.train()
            line = " ".join(parts)
            log_lines.append(line)
            print(line)
        if step % run.train.checkpoint_every == 0 and step < run.train.steps:
            ckpt = save_checkpoint(out / f"ckpt_step_{step:06d}", model, step)
            _write_snapshot(ckpt, run)
    ckpt = save_checkpoint(out / "ckpt_final", model, run.train.steps)
    _write_snapshot(ckpt, run)
    (out / "train_log.txt").write_text("\n".join(log_lines) + "\n")
    return 0


def _load_model_for(args, run: RunConfig):
    manifest_path = Path(args.ckpt) / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("config_hash") != config_hash(run.model):
        raise ConfigError(
            "checkpoint was trained under a different model configuration "
            f"(hash {manifest.get('config_hash')}, current {config_hash(run.model)})"
        )
    model = build_model(run.model)
    step = load_checkpoint(args.ckpt, model)
    model.eval()
    return model, step


def cmd_eval(args, run: RunConfig) -> int:
    if bool(args.ckpt) == bool(args.pred):
        raise ConfigError("pass exactly one of --ckpt or --pred")
    data_dir = _data_dir(args)
    out = Path(args.out)
    _write_snapshot(out, run)
    sample_dirs = _corpus_samples(data_dir)
    model = None
    if args.ckpt:
        model, _ = _load_model_for(args, run)
    uses_prior = run.model.variant == "greaten_prior"
    n_iters = args.iters or run.model.infer_iters
    per_sample = {}
    pooled_err: list[np.ndarray] = []
    pooled_occ: list[np.ndarray] = []
    for index, sample_dir in enumerate(sample_dirs):
        sample = read_sample(sample_dir)
        if model is not None:
            prior = _sample_prior(sample, run.model, index) if uses_prior else None
            sequence, _ = _infer_sequence(model, sample, prior, n_iters)
            pred = sequence.final[0, 0].numpy()
        else:
            # accept both flat scene_XXXX.pfm files and infer's per-scene dirs
            flat = Path(args.pred) / f"{sample_dir.name}.pfm"
            nested = Path(args.pred) / sample_dir.name / "disp.pfm"
            pred_path = flat if flat.exists() else nested
            if not pred_path.exists():
                raise ConfigError(f"missing prediction {flat} (or {nested})")
            pred = read_pfm(pred_path)
        report = compute_metrics(
            pred, sample.disparity_gt, sample.valid_mask, sample.occlusion_mask
        )
        per_sample[sample_dir.name] = report.as_dict()
        valid = sample.valid_mask.astype(bool)
        err = np.abs(np.maximum(pred, 0.0) - sample.disparity_gt)
        pooled_err.append(err[valid])
        pooled_occ.append(sample.occlusion_mask.astype(bool)[valid])
    err = np.concatenate(pooled_err)
    occ = np.concatenate(pooled_occ)
    aggregate = compute_metrics(
        err, np.zeros_like(err), np.ones_like(err, dtype=bool), occ
    ).as_dict()
    payload = {"aggregate": aggregate, "per_sample": per_sample}
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    rows = ["sample,region,count,epe,d1,d2,d3"]
    for name, report in [("aggregate", aggregate)] + sorted(per_sample.items()):
        for region in ("all", "noc", "occ"):
            r = report[region]
            if r is None:
                rows.append(f"{name},{region},0,,,,")
            else:
                rows.append(
                    f"{name},{region},{r['count']},{r['epe']:.6f},"
                    f"{r['d1']:.4f},{r['d2']:.4f},{r['d3']:.4f}"
                )
    (out / "metrics.csv").write_text("\n".join(rows) + "\n")
    print(f"aggregate EPE (all): {aggregate['all']['epe']:.4f}")
    return 0


def cmd_infer(args, run: RunConfig) -> int:
    data_dir = _data_dir(args)
    out = Path(args.out)
    _write_snapshot(out, run)
    model, _ = _load_model_for(args, run)
    uses_prior = run.model.variant == "greaten_prior"
    n_iters = args.iters or run.model.infer_iters
    for index, sample_dir in enumerate(_corpus_samples(data_dir)):
        sample = read_sample(sample_dir)
        prior = _sample_prior(sample, run.model, index) if uses_prior else None
        sequence, diag = _infer_sequence(model, sample, prior, n_iters)
        sample_out = out / sample_dir.name
        sample_out.mkdir(parents=True, exist_ok=True)
        final = sequence.final[0, 0].numpy()
        write_pfm(sample_out / "disp.pfm", final.astype(np.float32))
        save_png(
            sample_out / "disp.png",
            disparity_to_color(final, run.model.max_disparity),
        )
        error = np.abs(np.maximum(final, 0.0) - sample.disparity_gt)
        save_png(sample_out / "error.png", error_to_color(error))
        if args.dump_seq:
            seq_dir = sample_out / "seq"
            seq_dir.mkdir(exist_ok=True)
            for i, iterate in enumerate(sequence.iterates, start=1):
                arr = iterate[0, 0].numpy().astype(np.float32)
                write_pfm(seq_dir / f"d_{i:02d}.pfm", arr)
                save_png(
                    seq_dir / f"d_{i:02d}.png",
                    disparity_to_color(arr, run.model.max_disparity),
                )
        if args.dump_masks and diag.get("masks"):
            for stride, mask in diag["masks"].items():
                gray = (mask[0, 0].numpy() * 255.0 + 0.5).astype(np.uint8)
                save_png(sample_out / f"mask_s{stride}.png", gray)
        if args.dump_points:
            points = {
                name: tensor.numpy()
                for name, tensor in diag["attention"].items()
            }
            np.savez(sample_out / "attention_points.npz", **points)
    print(f"wrote inference outputs to {out}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        run = _load_config(args)
        return _COMMANDS[args.command](args, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
