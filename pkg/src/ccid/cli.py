"""Command-line surface: simulate | build-dataset | train | eval | plot.

Every run writes a JSON manifest beside its outputs recording the resolved
configuration, inputs, outputs, seeds, toolkit version, and wall-clock
duration. Outputs are deterministic given identical flags and seeds; on
failure, files created by the failed run are removed and the process exits
nonzero with a one-line diagnostic.

The default output root is the ``CCID_OUT`` environment variable, falling
back to the current directory.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
import time
from dataclasses import asdict
from datetime import datetime, timedelta
from pathlib import Path

from . import __version__
from .model import (
    CheckpointError,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import (
    FEATURE_NAMES,
    SEQUENCE_LENGTH,
    SMOOTH_WINDOW,
    PipelineError,
    balance,
    build_samples,
    class_counts,
    load_dataset,
    load_labeled_records,
    pool_counts,
    save_dataset,
    split,
    truncate_pools,
)
from .plots import PlotError, plot_loss, plot_traces
from .protocols import BBR_CWND_GAIN, LABEL_ORDER, LinkConfig, ProtocolLabel
from .seeds import derive_seed
from .simulate import DEFAULT_MAX_DURATION_S, DEFAULT_SAMPLE_INTERVAL_S, simulate_flow
from .traces import TraceFormatError, trace_filename, write_trace
from .training import (
    AdamState,
    TrainConfig,
    TrainingError,
    evaluate,
    train,
)

ENV_OUT_ROOT = "CCID_OUT"

PROTOCOL_DISPLAY_NAMES = {
    ProtocolLabel.VEGAS: "TCP Vegas",
    ProtocolLabel.RENO: "TCP Reno",
    ProtocolLabel.CUBIC: "TCP Cubic",
    ProtocolLabel.BBR: "BBR",
}


class CliError(Exception):
    pass


def parse_byte_size(text: str) -> int:
    """'500M' -> 500_000_000. Decimal suffixes K/M/G; plain integers allowed."""
    text = text.strip()
    multipliers = {"K": 1e3, "M": 1e6, "G": 1e9}
    suffix = text[-1:].upper()
    try:
        if suffix in multipliers:
            value = float(text[:-1]) * multipliers[suffix]
        else:
            value = float(text)
    except ValueError:
        raise CliError(f"cannot parse byte size {text!r} (use e.g. 500M, 1G)") from None
    if value <= 0:
        raise CliError(f"byte size must be positive, got {text!r}")
    return int(round(value))


def out_root() -> Path:
    return Path(os.environ.get(ENV_OUT_ROOT, "."))


def synthetic_timestamp(flow_index: int) -> str:
    """Deterministic capture stamp mimicking a thrice-daily schedule."""
    day = flow_index // 3
    hour = (6, 12, 18)[flow_index % 3]
    stamp = datetime(2025, 1, 1, hour) + timedelta(days=day)
    return stamp.strftime("%Y%m%dT%H%M%S")


class RunContext:
    """Tracks files created by a command so failures leave no partial output."""

    def __init__(self) -> None:
        self.created: list[Path] = []
        self.started = time.time()

    def register(self, path: str | Path) -> Path:
        p = Path(path)
        self.created.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.created:
            try:
                if p.exists():
                    p.unlink()
            except OSError:
                pass

    def write_manifest(
        self,
        path: str | Path,
        subcommand: str,
        config: dict,
        inputs: list[str],
        outputs: list[str],
        seeds: dict,
    ) -> None:
        manifest = {
            "subcommand": subcommand,
            "toolkit_version": __version__,
            "config": config,
            "inputs": inputs,
            "outputs": outputs,
            "seeds": seeds,
            "duration_s": round(time.time() - self.started, 3),
        }
        self.register(path)
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _parse_protocols(text: str) -> list[ProtocolLabel]:
    if text.strip().lower() == "all":
        return list(LABEL_ORDER)
    labels = []
    for name in text.split(","):
        try:
            labels.append(ProtocolLabel.from_name(name.strip()))
        except ValueError as exc:
            raise CliError(str(exc)) from None
    return labels


def _simulate_one(job: tuple) -> str:
    (label_name, link_kwargs, nbytes, interval, max_duration, cwnd_gain, path) = job
    label = ProtocolLabel(label_name)
    trace = simulate_flow(
        label,
        LinkConfig(**link_kwargs),
        nbytes,
        interval,
        max_duration_s=max_duration,
        bbr_cwnd_gain=cwnd_gain,
    )
    write_trace(trace, path)
    return path


def cmd_simulate(args: argparse.Namespace, ctx: RunContext) -> int:
    protocols = _parse_protocols(args.protocols)
    nbytes = parse_byte_size(args.bytes)
    out_dir = Path(args.out if args.out else out_root() / "traces")
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for i in range(args.flows):
        flow_seed = derive_seed(args.seed, i)
        stamp = synthetic_timestamp(i)
        for label in protocols:
            link_kwargs = dict(
                capacity_bits_per_s=args.capacity,
                base_rtt_s=args.base_rtt,
                buffer_pkts=args.buffer,
                mss_bytes=args.mss,
                seed=flow_seed,
                jitter_frac=args.jitter,
                delay_noise_frac=args.delay_noise,
                loss_rate=args.loss_rate,
            )
            path = out_dir / trace_filename(label, flow_seed, stamp)
            ctx.register(path)
            jobs.append(
                (
                    label.value,
                    link_kwargs,
                    nbytes,
                    args.interval,
                    args.max_duration,
                    args.bbr_cwnd_gain,
                    str(path),
                )
            )

    if args.workers > 1:
        with multiprocessing.Pool(args.workers) as pool:
            for _ in pool.imap_unordered(_simulate_one, jobs):
                pass
    else:
        for job in jobs:
            _simulate_one(job)

    print(f"wrote {len(jobs)} trace files to {out_dir}")
    ctx.write_manifest(
        out_dir / "manifest.json",
        "simulate",
        config={
            "protocols": [l.value for l in protocols],
            "flows": args.flows,
            "bytes": nbytes,
            "interval_s": args.interval,
            "capacity_bits_per_s": args.capacity,
            "base_rtt_s": args.base_rtt,
            "buffer_pkts": args.buffer,
            "mss_bytes": args.mss,
            "jitter_frac": args.jitter,
            "delay_noise_frac": args.delay_noise,
            "loss_rate": args.loss_rate,
            "bbr_cwnd_gain": args.bbr_cwnd_gain,
            "max_duration_s": args.max_duration,
            "workers": args.workers,
        },
        inputs=[],
        outputs=[j[-1] for j in jobs],
        seeds={"master": args.seed},
    )
    return 0


def _print_counts_table(before: dict, after: dict, total: int) -> None:
    headers = [PROTOCOL_DISPLAY_NAMES[l] for l in LABEL_ORDER]
    widths = [max(len(h), 9) for h in headers]
    def row(title, cells):
        cells = [f"{c:<{w}}" for c, w in zip(cells, widths)]
        print(f"{title:<12} " + "  ".join(cells))
    row("Protocol:", headers)
    row("Samples:", [str(before[l]) for l in LABEL_ORDER])
    row("% of total", [f"{100.0 * before[l] / total:.1f}%" for l in LABEL_ORDER])
    row("Balanced:", [str(after[l]) for l in LABEL_ORDER])


def cmd_build_dataset(args: argparse.Namespace, ctx: RunContext) -> int:
    in_dir = Path(args.traces)
    if not in_dir.is_dir():
        raise CliError(f"input directory {in_dir} does not exist")
    pools = load_labeled_records(in_dir, args.smooth_window)
    counts = pool_counts(pools)
    if all(c == 0 for c in counts.values()):
        raise CliError(f"no trace CSVs found in {in_dir}")
    plan = balance(counts)
    total = sum(counts.values())
    _print_counts_table(counts, plan, total)

    pools = truncate_pools(pools, plan)
    samples = build_samples(pools, args.seq_len, args.stride)
    if not samples:
        raise CliError(
            f"no sequences of length {args.seq_len}; traces have too few records"
        )
    dataset = split(samples, seed=args.seed, by_flow=args.split_by_flow)
    per_class = class_counts(samples)
    print(
        "sequences: "
        + ", ".join(f"{l.value}={per_class[l]}" for l in LABEL_ORDER)
        + f" (train={len(dataset.train)}, val={len(dataset.validation)}, test={len(dataset.test)})"
    )

    out_path = Path(args.out if args.out else out_root() / "dataset.ccid")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    ctx.register(out_path)
    save_dataset(dataset, out_path)
    print(f"wrote dataset to {out_path}")
    ctx.write_manifest(
        Path(str(out_path) + ".manifest.json"),
        "build-dataset",
        config={
            "seq_len": args.seq_len,
            "stride": args.stride,
            "smooth_window": args.smooth_window,
            "split_by_flow": args.split_by_flow,
            "ratios": [0.7, 0.1, 0.2],
            "features": list(FEATURE_NAMES),
        },
        inputs=[str(in_dir)],
        outputs=[str(out_path)],
        seeds={"split": args.seed},
    )
    return 0


def cmd_train(args: argparse.Namespace, ctx: RunContext) -> int:
    dataset = load_dataset(args.dataset)
    n_features = dataset.train[0].features.shape[1] if dataset.train else 0
    out_dir = Path(args.out if args.out else out_root() / "run")
    out_dir.mkdir(parents=True, exist_ok=True)

    initial = None
    optimizer = None
    start_epoch = 0
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model_config = ckpt.params.config
        initial = ckpt.params
        if ckpt.optimizer is None:
            raise CliError(f"{args.resume} has no optimizer state; cannot resume")
        start_epoch = (ckpt.epoch or 0) + 1
    else:
        model_config = ModelConfig(
            input_size=n_features,
            hidden_size=args.hidden,
            num_layers=args.layers,
            attention_size=args.attention_size,
            dropout=args.dropout,
        )
    if model_config.input_size != n_features:
        raise CliError(
            f"model expects {model_config.input_size} features, dataset has {n_features}"
        )

    train_config = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        plateau_factor=args.plateau_factor,
        plateau_patience=args.plateau_patience,
        grad_clip=args.grad_clip,
        seed=args.seed,
    )
    if args.resume:
        optimizer = AdamState.fresh(initial, train_config)
        optimizer.m = ckpt.optimizer["m"]
        optimizer.v = ckpt.optimizer["v"]
        optimizer.t = ckpt.optimizer["t"]
        optimizer.current_lr = ckpt.optimizer["lr"]

    metrics_path = ctx.register(out_dir / "metrics.csv")
    final_path = ctx.register(out_dir / "checkpoint-final.ccid")
    best_path = ctx.register(out_dir / "checkpoint-best.ccid")

    def progress(m):
        print(
            f"epoch {m.epoch:3d}  train_loss={m.train_loss:.4f} val_loss={m.val_loss:.4f} "
            f"train_acc={m.train_acc:.3f} val_acc={m.val_acc:.3f} lr={m.lr_after:.2e}",
            flush=True,
        )

    result = train(
        dataset,
        model_config,
        train_config,
        initial=initial,
        optimizer=optimizer,
        start_epoch=start_epoch,
        log_path=metrics_path,
        progress=progress,
    )
    last_epoch = result.metrics[-1].epoch if result.metrics else start_epoch - 1
    save_checkpoint(
        final_path,
        result.final_params,
        norm_mean=dataset.norm_mean,
        norm_std=dataset.norm_std,
        seed=args.seed,
        optimizer={
            "m": result.optimizer.m,
            "v": result.optimizer.v,
            "t": result.optimizer.t,
            "lr": result.optimizer.current_lr,
        },
        epoch=last_epoch,
    )
    save_checkpoint(
        best_path,
        result.best_params,
        norm_mean=dataset.norm_mean,
        norm_std=dataset.norm_std,
        seed=args.seed,
    )
    print(f"wrote {final_path}, {best_path}, {metrics_path}")
    ctx.write_manifest(
        out_dir / "manifest.json",
        "train",
        config={
            "model": asdict(model_config),
            "train": asdict(train_config),
            "resume": args.resume,
        },
        inputs=[args.dataset],
        outputs=[str(final_path), str(best_path), str(metrics_path)],
        seeds={"train": args.seed, "dataset": dataset.seed},
    )
    return 0


def cmd_eval(args: argparse.Namespace, ctx: RunContext) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    samples = dataset.splits[args.split]
    if not samples:
        raise CliError(f"dataset split {args.split!r} is empty")
    n_features = samples[0].features.shape[1]
    if ckpt.params.config.input_size != n_features:
        raise CliError(
            f"checkpoint expects {ckpt.params.config.input_size} features, "
            f"dataset has {n_features}"
        )
    result = evaluate(ckpt.params, samples)

    lines = [f"Accuracy: {100.0 * result.accuracy:.2f}%  (mean loss {result.mean_loss:.4f})"]
    lines.append("")
    lines.append(f"{'class':8s} {'precision':>9s} {'recall':>7s} {'support':>8s}")
    for label, (prec, rec) in zip(LABEL_ORDER, result.per_class_precision_recall()):
        support = int(result.confusion[label.index].sum())
        lines.append(f"{label.value:8s} {prec:9.3f} {rec:7.3f} {support:8d}")
    lines.append("")
    lines.append("confusion matrix (rows = true, columns = predicted):")
    header = " ".join(f"{l.value:>7s}" for l in LABEL_ORDER)
    lines.append(f"{'':8s}{header}")
    for label in LABEL_ORDER:
        row = " ".join(f"{int(c):7d}" for c in result.confusion[label.index])
        lines.append(f"{label.value:8s}{row}")
    report = "\n".join(lines)
    print(report)

    outputs = []
    if args.report:
        report_path = ctx.register(args.report)
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(report + "\n")
        outputs.append(str(report_path))
    manifest_path = (
        Path(str(args.report) + ".manifest.json")
        if args.report
        else out_root() / "eval.manifest.json"
    )
    ctx.write_manifest(
        manifest_path,
        "eval",
        config={"split": args.split},
        inputs=[args.checkpoint, args.dataset],
        outputs=outputs,
        seeds={},
    )
    return 0


def cmd_plot(args: argparse.Namespace, ctx: RunContext) -> int:
    outputs = []
    if args.loss:
        out = Path(args.out if args.out else out_root() / "loss.svg")
        out.parent.mkdir(parents=True, exist_ok=True)
        ctx.register(out)
        plot_loss(args.loss, out)
        outputs.append(str(out))
        print(f"wrote {out}")
    if args.traces:
        out = Path(args.out if args.out else out_root() / "traces.svg")
        if args.loss:  # both requested: keep distinct names
            out = out.with_name(out.stem + "-traces.svg")
        out.parent.mkdir(parents=True, exist_ok=True)
        ctx.register(out)
        plot_traces(args.traces, out)
        outputs.append(str(out))
        print(f"wrote {out}")
    manifest = Path(outputs[0] + ".manifest.json")
    ctx.write_manifest(
        manifest,
        "plot",
        config={"loss": args.loss, "traces": args.traces},
        inputs=[p for p in (args.loss, args.traces) if p],
        outputs=outputs,
        seeds={},
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccid",
        description="Simulate labeled congestion-control traces and classify them with a GRU.",
    )
    parser.add_argument("--version", action="version", version=f"ccid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate labeled trace CSVs")
    p.add_argument("--protocols", default="all",
                   help="comma list of vegas,reno,cubic,bbr or 'all' (default: all)")
    p.add_argument("--flows", type=int, default=10, help="flows per protocol (default: 10)")
    p.add_argument("--bytes", default="800M",
                   help="transfer size per flow, decimal K/M/G suffix (default: 800M)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
    p.add_argument("--interval", type=float, default=DEFAULT_SAMPLE_INTERVAL_S,
                   help="sampling interval in seconds (default: 0.1)")
    p.add_argument("--out", default=None, help="output directory (default: $CCID_OUT/traces)")
    p.add_argument("--capacity", type=float, default=1e9,
                   help="bottleneck capacity in bits/s (default: 1e9)")
    p.add_argument("--base-rtt", type=float, default=9e-5,
                   help="base RTT in seconds (default: 9e-5)")
    p.add_argument("--buffer", type=int, default=6, help="droptail queue depth in packets (default: 6)")
    p.add_argument("--mss", type=int, default=1460, help="segment size in bytes (default: 1460)")
    p.add_argument("--jitter", type=float, default=0.05,
                   help="per-flow capacity/RTT jitter fraction (default: 0.05)")
    p.add_argument("--delay-noise", type=float, default=1.0,
                   help="exogenous delay mean as multiple of base RTT (default: 1.0)")
    p.add_argument("--loss-rate", type=float, default=0.0,
                   help="random per-packet loss probability (default: 0)")
    p.add_argument("--bbr-cwnd-gain", type=float, default=BBR_CWND_GAIN,
                   help="BBR cwnd gain over BDP (default: 3.0; deployed BBRv1 uses 2.0)")
    p.add_argument("--max-duration", type=float, default=DEFAULT_MAX_DURATION_S,
                   help="simulated wall-clock cap per flow in seconds (default: 600)")
    p.add_argument("--workers", type=int, default=1, help="parallel workers (default: 1)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build-dataset", help="traces -> balanced windowed split dataset")
    p.add_argument("--traces", required=True, help="directory of labeled trace CSVs")
    p.add_argument("--out", default=None, help="dataset path (default: $CCID_OUT/dataset.ccid)")
    p.add_argument("--seq-len", type=int, default=SEQUENCE_LENGTH,
                   help="sequence length in intervals (default: 60)")
    p.add_argument("--stride", type=int, default=None,
                   help="window stride (default: seq-len, non-overlapping)")
    p.add_argument("--smooth-window", type=int, default=SMOOTH_WINDOW,
                   help="throughput smoothing window in intervals (default: 5)")
    p.add_argument("--seed", type=int, default=0, help="split shuffle seed (default: 0)")
    p.add_argument("--split-by-flow", action="store_true",
                   help="assign whole flows to one split instead of single sequences")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train the GRU classifier")
    p.add_argument("--dataset", required=True, help="dataset file from build-dataset")
    p.add_argument("--out", default=None, help="output directory (default: $CCID_OUT/run)")
    p.add_argument("--hidden", type=int, default=512, help="hidden size (default: 512)")
    p.add_argument("--layers", type=int, default=3, help="stacked layers (default: 3)")
    p.add_argument("--epochs", type=int, default=30, help="training epochs (default: 30)")
    p.add_argument("--lr", type=float, default=7.5e-5, help="learning rate (default: 7.5e-5)")
    p.add_argument("--batch", type=int, default=8, help="batch size (default: 8)")
    p.add_argument("--dropout", type=float, default=0.4,
                   help="dropout between layers (default: 0.4)")
    p.add_argument("--attention-size", type=int, default=0,
                   help="attention projection size (default: hidden size)")
    p.add_argument("--plateau-factor", type=float, default=0.5,
                   help="LR reduction factor on plateau (default: 0.5)")
    p.add_argument("--plateau-patience", type=int, default=5,
                   help="epochs without improvement before reducing (default: 5)")
    p.add_argument("--grad-clip", type=float, default=None,
                   help="optional gradient max-norm (default: off)")
    p.add_argument("--seed", type=int, default=0, help="training seed (default: 0)")
    p.add_argument("--resume", default=None, help="resume from a final checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--report", default=None, help="also write the report to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render figures from metrics or traces")
    p.add_argument("--loss", default=None, metavar="METRICS_CSV",
                   help="render train/val loss curves (log y-axis)")
    p.add_argument("--traces", default=None, metavar="TRACE_DIR",
                   help="render per-protocol size and RTT panels")
    p.add_argument("--out", default=None, help="output SVG path")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "plot" and not (args.loss or args.traces):
        parser.error("plot requires --loss and/or --traces")
    ctx = RunContext()
    try:
        return args.func(args, ctx)
    except (
        CliError,
        PipelineError,
        TrainingError,
        TraceFormatError,
        CheckpointError,
        PlotError,
        ValueError,
        OSError,
    ) as exc:
        ctx.cleanup()
        print(f"ccid: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
