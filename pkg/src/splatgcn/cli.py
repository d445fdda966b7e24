"""Command-line entry points: render, topology, gradcheck, train, eval, synth.

All diagnostics go to stderr; data goes to files or stdout. Every command is
deterministic given its flags, config, and seed.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import network, synth
from .errors import ConfigError, ParseError, SplatGCNError
from .network import LossConfig, ModelConfig, SplatGCN
from .render import RenderConfig, export_heatmaps, render_sequence
from .skeleton import compute_velocity, load_sequence, normalize_sequence
from .topology import build_prior_adjacency, export_adjacency

METRIC_COLUMNS = ("epoch", "lr", "lambda", "loss_ce", "loss_topo", "accuracy")
CHECKPOINT_NAME = "checkpoint.npz"
GRADCHECK_TOLERANCE = 1e-4


@dataclass
class TrainSettings:
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0


@dataclass
class RunManifest:
    command: str
    config_path: str
    input_paths: list[str]
    output_dir: str
    seed: int
    timestamp: str

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2)


def _manifest(command: str, args, out_dir: Path, inputs: list[str], seed: int) -> None:
    RunManifest(
        command=command,
        config_path=str(getattr(args, "config", "") or ""),
        input_paths=[str(p) for p in inputs],
        output_dir=str(out_dir),
        seed=seed,
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"),
    ).write(out_dir)


# ---------------------------------------------------------------------------
# configuration files
# ---------------------------------------------------------------------------

def _build_section(cls, data: dict, section: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown keys in '{section}' section: {sorted(unknown)}")
    coerced = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        coerced[f.name] = value
    return cls(**coerced)


def load_config(path) -> tuple[ModelConfig, LossConfig, TrainSettings, RenderConfig]:
    if path is None:
        return ModelConfig(), LossConfig(), TrainSettings(), RenderConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be an object")
    model = _build_section(ModelConfig, data.get("model", {}), "model")
    loss = _build_section(LossConfig, data.get("loss", {}), "loss")
    train = _build_section(TrainSettings, data.get("train", {}), "train")
    render = _build_section(RenderConfig, data.get("render", {}), "render")
    return model, loss, train, render


def config_to_json(model: ModelConfig, loss: LossConfig, train: TrainSettings,
                   render: RenderConfig) -> str:
    return json.dumps({
        "model": asdict(model),
        "loss": asdict(loss),
        "train": asdict(train),
        "render": asdict(render),
    })


def config_from_json(text: str):
    data = json.loads(text)
    return (
        _build_section(ModelConfig, data.get("model", {}), "model"),
        _build_section(LossConfig, data.get("loss", {}), "loss"),
        _build_section(TrainSettings, data.get("train", {}), "train"),
        _build_section(RenderConfig, data.get("render", {}), "render"),
    )


def apply_ablation(model_cfg: ModelConfig, render_cfg: RenderConfig, ablate: str | None):
    if ablate is None:
        return model_cfg, render_cfg
    if ablate == "kgsm":
        return model_cfg, replace(render_cfg, isotropic=True)
    if ablate == "pt":
        return replace(model_cfg, prior_enabled=False), render_cfg
    if ablate == "vcg":
        return replace(model_cfg, gate_enabled=False), render_cfg
    raise ConfigError(f"unknown ablation {ablate!r}; choose kgsm, pt, or vcg")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_render(args) -> int:
    size = args.size
    aggregation = "clamped_sum" if args.agg == "sum" else "max"
    cfg = RenderConfig(height=size, width=size, aggregation=aggregation,
                       log_scale=args.log_scale, alpha=args.alpha,
                       isotropic=args.isotropic)
    out = Path(args.out)
    _manifest("render", args, out, [args.input], seed=0)
    seq = load_sequence(args.input)
    kin = compute_velocity(normalize_sequence(seq))
    stack, _ = render_sequence(kin, cfg, source=str(args.input))
    export_heatmaps(stack, out)
    return 0


def _cmd_topology(args) -> int:
    seq = load_sequence(args.input)
    kin = compute_velocity(normalize_sequence(seq))
    cfg = RenderConfig()
    _, grids = render_sequence(kin, cfg, source=str(args.input))
    prior = build_prior_adjacency(grids, source=str(args.input))
    export_adjacency(prior, args.out, meta={
        "T": kin.num_frames,
        "views": [list(v) for v in cfg.views_for(kin.num_channels)],
    })
    return 0


def _gradcheck_records(model_cfg: ModelConfig, render_cfg: RenderConfig, seed: int):
    spec = synth.SyntheticTaskSpec(task="speed_discrimination", num_joints=5,
                                   num_frames=16, samples_per_class=2, seed=seed)
    return network.prepare_records(synth.generate_speed_task(spec), render_cfg)


def _cmd_gradcheck(args) -> int:
    model_cfg, loss_cfg, _, render_cfg = load_config(args.config)
    records = _gradcheck_records(model_cfg, render_cfg, args.seed)
    sample = records[0].kin
    model = SplatGCN(model_cfg, sample.num_joints, sample.num_channels,
                     render_cfg, seed=args.seed)
    report = network.run_gradient_check(model, records, loss_cfg, seed=args.seed)
    worst = 0.0
    for name in sorted(report):
        err = report[name]
        worst = max(worst, err)
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name} {err:.3e} {status}")
    print(f"max_relative_error {worst:.3e}")
    if worst >= GRADCHECK_TOLERANCE:
        print("gradient check failed", file=sys.stderr)
        return 1
    return 0


def _write_metrics(path: Path, rows: list[dict], append: bool) -> None:
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([
                row["epoch"],
                f"{row['lr']:.17g}",
                f"{row['lambda']:.17g}",
                f"{row['loss_ce']:.17g}",
                f"{row['loss_topo']:.17g}",
                f"{row['accuracy']:.17g}",
            ])


def _cmd_train(args) -> int:
    model_cfg, loss_cfg, train_cfg, render_cfg = load_config(args.config)
    model_cfg, render_cfg = apply_ablation(model_cfg, render_cfg, args.ablate)
    out = Path(args.out)
    _manifest("train", args, out, [args.data], seed=train_cfg.seed)
    sequences = synth.load_dataset(args.data)
    records = network.prepare_records(sequences, render_cfg)
    sample = records[0].kin
    model = SplatGCN(model_cfg, sample.num_joints, sample.num_channels,
                     render_cfg, seed=train_cfg.seed)
    ckpt_path = out / CHECKPOINT_NAME
    start_epoch = 0
    if ckpt_path.exists():
        params, momenta, state, epoch, _ = ad.load_checkpoint(ckpt_path)
        model.load_state(params, momenta, state)
        start_epoch = epoch + 1
        print(f"resuming from epoch {start_epoch}", file=sys.stderr)
    config_json = config_to_json(model_cfg, loss_cfg, train_cfg, render_cfg)
    metrics_path = out / "metrics.csv"

    def on_epoch(epoch: int, metrics: dict) -> None:
        _write_metrics(metrics_path, [metrics], append=epoch > 0)
        ad.save_checkpoint(ckpt_path, model.params, model.state_arrays(),
                           epoch, config_json)

    network.fit(model, records, loss_cfg, train_cfg.epochs,
                batch_size=train_cfg.batch_size, seed=train_cfg.seed,
                start_epoch=start_epoch, on_epoch=on_epoch)
    if train_cfg.epochs > start_epoch:
        # final save picks up the post-training normalization recalibration
        ad.save_checkpoint(ckpt_path, model.params, model.state_arrays(),
                           train_cfg.epochs - 1, config_json)
    return 0


def _cmd_eval(args) -> int:
    params, momenta, state, _, config_json = ad.load_checkpoint(args.checkpoint)
    model_cfg, _, train_cfg, render_cfg = config_from_json(config_json)
    sequences = synth.load_dataset(args.data)
    records = network.prepare_records(sequences, render_cfg)
    sample = records[0].kin
    model = SplatGCN(model_cfg, sample.num_joints, sample.num_channels,
                     render_cfg, seed=train_cfg.seed)
    model.load_state(params, momenta, state)
    accuracy = network.evaluate(model, records)
    print(f"{accuracy:.17g}")
    return 0


def _cmd_synth(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.spec}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    data["task"] = args.task
    fields = {f.name for f in dataclasses.fields(synth.SyntheticTaskSpec)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown keys in task spec: {sorted(unknown)}")
    spec = synth.SyntheticTaskSpec(**data)
    out = Path(args.out)
    _manifest("synth", args, out, [args.spec], seed=spec.seed)
    sequences = synth.generate(spec)
    synth.write_dataset(sequences, out, spec)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatgcn")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="splat a sequence into heatmap files")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--agg", choices=("max", "sum"), default="max")
    p.add_argument("--log-scale", type=float, default=-2.0, dest="log_scale")
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--isotropic", action="store_true")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("topology", help="write the statistical adjacency as CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_topology)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("train", help="train a classifier on a dataset manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", choices=("kgsm", "pt", "vcg"), default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="print Top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--task", required=True, choices=synth.TASKS)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", required=True)
    p.set_defaults(func=_cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SplatGCNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
