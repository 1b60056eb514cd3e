"""Command-line surface: dataset generation, training, evaluation, reports.

Subcommands: gen, train, eval, spans, report. Exit codes: 0 success, 1 usage
error, 2 runtime error. Every run writes a resolved-config snapshot next to
its outputs. Configuration is flat `key=value` (one per line, `#` comments);
`--set key=value` overrides the file, the file overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import shutil
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import microworld as mw
from . import pipeline as pl
from . import svgplot
from .errors import ConfigError, DomainError
from .rng import derive

GEN_TASKS = mw.TASKS + ("combined",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_kv_line(line: str):
    body = line.split("#", 1)[0].strip()
    if not body:
        return None
    if "=" not in body:
        raise ConfigError(f"expected key=value, got {body!r}")
    key, value = body.split("=", 1)
    return key.strip(), value.strip()


def read_config_file(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        parsed = _parse_kv_line(line)
        if parsed:
            out[parsed[0]] = parsed[1]
    return out


def resolve_configs(config_path: str | None, overrides: list[str]):
    """Merge defaults < config file < --set overrides into world/run configs."""
    merged: dict[str, str] = {}
    if config_path:
        merged.update(read_config_file(config_path))
    for item in overrides:
        parsed = _parse_kv_line(item)
        if not parsed:
            raise ConfigError(f"bad --set value {item!r}")
        merged[parsed[0]] = parsed[1]

    world_keys = {f.name for f in dc_fields(mw.WorldConfig)}
    run_keys = {f.name for f in dc_fields(pl.RunConfig)}
    world_kv, run_kv = {}, {}
    for key, value in merged.items():
        if key in world_keys:
            world_kv[key] = value
        elif key in run_keys:
            run_kv[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")

    run_cfg = pl.RunConfig.from_kv(run_kv)
    world_defaults = mw.WorldConfig()
    world_args = {}
    for key, raw in world_kv.items():
        cur = getattr(world_defaults, key)
        world_args[key] = int(raw) if isinstance(cur, int) else float(raw)
    world_cfg = mw.WorldConfig(**world_args)
    return world_cfg, run_cfg


def write_resolved_config(out_dir: Path, entries: dict) -> None:
    lines = [f"{k}={entries[k]}" for k in sorted(entries)]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n")


def _prepare_out_dir(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise UsageError(f"output directory {out_dir} is not empty (use --force to overwrite)")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)


def cmd_gen(args) -> int:
    if args.task not in GEN_TASKS:
        raise UsageError(f"unknown task {args.task!r}; expected one of {GEN_TASKS}")
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    world_cfg, _ = resolve_configs(args.config, args.set or [])
    out_dir = Path(args.out)
    _prepare_out_dir(out_dir, args.force)

    def episodes():
        if args.task == "combined":
            per_task, rem = divmod(args.n, 3)
            if rem:
                print(f"warning: dropping {rem} scene(s) so each task contributes equally")
            for t_idx, task in enumerate(mw.TASKS):
                yield from mw.generate_balanced_episodes(
                    task, per_task, derive(args.seed, t_idx), world_cfg, unseen=args.unseen)
        else:
            yield from mw.generate_balanced_episodes(
                args.task, args.n, args.seed, world_cfg, unseen=args.unseen)

    manifest = ds.write_dataset(episodes(), out_dir, args.task, args.seed, world_cfg)
    ds.split_dataset(manifest, args.seed)
    ds.save_manifest(manifest)

    counts: dict[tuple[str, int], int] = {}
    for rec in manifest.scenes:
        for obj in rec.objects:
            if obj["queryable"]:
                key = (rec.task, int(obj["label"]))
                counts[key] = counts.get(key, 0) + 1
    with open(out_dir / "distribution.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "label", "count"])
        for (task, label), count in sorted(counts.items()):
            writer.writerow([task, label, count])

    write_resolved_config(out_dir, {
        "command": "gen", "task": args.task, "n": args.n, "seed": args.seed,
        "unseen": str(args.unseen).lower(), **{k: v for k, v in world_cfg.to_dict().items()}})
    print(f"wrote {manifest.scene_count} scenes to {out_dir}")
    for (task, label), count in sorted(counts.items()):
        print(f"  {task} label={label}: {count}")
    return 0


def cmd_train(args) -> int:
    if args.variant not in pl.VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; expected one of {pl.VARIANTS}")
    manifest = ds.load_manifest(args.data)
    _, run_cfg = resolve_configs(args.config, args.set or [])
    run_cfg.seed = args.seed
    out_dir = Path(args.out)
    _prepare_out_dir(out_dir, args.force)

    result = pl.train(args.variant, manifest, run_cfg, log=lambda msg: print(msg, flush=True))
    model = pl.build_model(args.variant, run_cfg, manifest.config.resolution)
    extra = {"best_epoch": result.best_epoch, "best_val_accuracy": result.best_val_accuracy,
             "aborted": result.aborted}
    pl.load_params(model, result.best_params)
    pl.save_checkpoint(out_dir / "best.ckpt", model, result.best_params, manifest, extra)
    pl.save_checkpoint(out_dir / "final.ckpt", model, result.final_params, manifest, extra)
    pl.write_metrics_csv(out_dir / "metrics.csv", result.metrics)
    write_resolved_config(out_dir, {
        "command": "train", "variant": args.variant, "data": str(args.data),
        "seed": args.seed, **run_cfg.to_kv()})
    status = "aborted (divergence), kept last good checkpoint" if result.aborted else "done"
    print(f"{status}: best epoch {result.best_epoch} "
          f"(val accuracy {result.best_val_accuracy:.6f})")
    return 0


def _load_for_analysis(args):
    manifest = ds.load_manifest(args.data)
    model, meta = pl.load_checkpoint(args.ckpt)
    if args.split not in ds.SPLITS:
        raise UsageError(f"unknown split {args.split!r}; expected one of {ds.SPLITS}")
    return manifest, model, meta


def cmd_eval(args) -> int:
    manifest, model, _ = _load_for_analysis(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    accuracy = pl.evaluate(model, manifest, args.split)
    cell = f"{accuracy:.6f}"
    with open(out_dir / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "accuracy"])
        writer.writerow([args.split, cell])
    write_resolved_config(out_dir, {"command": "eval", "ckpt": str(args.ckpt),
                                    "data": str(args.data), "split": args.split})
    print(f"accuracy {cell}")
    return 0


def cmd_spans(args) -> int:
    manifest, model, meta = _load_for_analysis(args)
    if meta["variant"] != "pip":
        raise UsageError(
            f"span analysis needs a pip checkpoint; {args.ckpt} holds variant {meta['variant']!r}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_span, union, rows = pl.span_frequency_histogram(model, manifest, args.split)

    with open(out_dir / "spans.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "span_idx", "frame_idx", "r_value", "selected"])
        for row in rows:
            selected = set(row.selected)
            for t, r_val in enumerate(row.r):
                writer.writerow([row.sample_id, row.span_idx, t, f"{r_val:.9g}",
                                 int(t in selected)])
    with open(out_dir / "span_scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "span_idx", "z"])
        for row in rows:
            writer.writerow([row.sample_id, row.span_idx, f"{row.z:.9g}"])
    with open(out_dir / "histogram.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_idx"] + [f"span_{s}" for s in range(per_span.shape[0])] + ["union"])
        for t in range(per_span.shape[1]):
            writer.writerow([t] + [int(c) for c in per_span[:, t]] + [int(union[t])])
    write_resolved_config(out_dir, {"command": "spans", "ckpt": str(args.ckpt),
                                    "data": str(args.data), "split": args.split})
    print(f"wrote span report for {len(rows)} (sample, span) pairs; "
          f"union histogram peak at frame {int(np.argmax(union))}")
    return 0


def cmd_report(args) -> int:
    manifest, model, meta = _load_for_analysis(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    horizon = model.config.horizon

    metrics_path = Path(args.ckpt).parent / "metrics.csv"
    if metrics_path.exists():
        rows = pl.read_metrics_csv(metrics_path)
        series = {}
        for split in ("train", "val"):
            xs = [r[0] for r in rows if r[1] == split]
            series[f"{split} bce"] = (xs, [r[2] for r in rows if r[1] == split])
            series[f"{split} accuracy"] = (xs, [r[5] for r in rows if r[1] == split])
        svgplot.line_chart(series, out_dir / "loss_curves.svg",
                           "training curves", x_label="epoch")
    else:
        print(f"warning: no metrics.csv next to {args.ckpt}; skipping loss curves")

    if meta["variant"] == "pip":
        _, union, _ = pl.span_frequency_histogram(model, manifest, args.split)
        hist = union.astype(float)
    else:
        hist = np.zeros(horizon)
    svgplot.bar_chart(hist, out_dir / "histogram.svg",
                      f"salient-frame frequency ({args.split})",
                      x_label="generated frame (video frame = index + 4)", y_label="count",
                      x_offset=0)

    cache = ds.SceneCache(manifest, model.config.m_input, horizon)
    samples = cache.samples_of(args.split)
    if not samples:
        raise DomainError(f"split {args.split!r} is empty")
    for rec, oid in samples[:3]:
        sample = cache.load_sample(rec, oid)
        if model.kind == "baseline":
            break
        outputs = pl.forward(model, sample, training=False)
        pred = np.concatenate([np.clip(f.data, 0, 1) for f in outputs.generated], axis=2)
        truth = np.concatenate([np.asarray(f, dtype=np.float64) for f in sample.target_frames], axis=2)
        mw.write_ppm(pred, out_dir / f"strip_{rec.scene_id}_obj{oid}_pred.ppm")
        mw.write_ppm(truth, out_dir / f"strip_{rec.scene_id}_obj{oid}_truth.ppm")

    first_scene = samples[0][0]
    ep = mw.generate_episode(first_scene.task, first_scene.seed, manifest.config,
                             unseen=first_scene.unseen)
    mw.trajectory_csv(ep.trajectory, out_dir / f"trajectory_{first_scene.scene_id}.csv")
    write_resolved_config(out_dir, {"command": "report", "ckpt": str(args.ckpt),
                                    "data": str(args.data), "split": args.split})
    print(f"report written to {out_dir}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="physpan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset")
    p.add_argument("--task", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--unseen", action="store_true")
    p.add_argument("--force", action="store_true")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--variant", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    for name, fn in (("eval", cmd_eval), ("spans", cmd_spans), ("report", cmd_report)):
        p = sub.add_parser(name)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--out", required=True)
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
