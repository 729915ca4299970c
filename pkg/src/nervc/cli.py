"""``nervc`` command line: synth, fit, train-enc, encode, decode, bench, metrics."""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import runtime
from .config import RunConfig, format_config, load_config, parse_config
from .container import read_nrvp, roundtrip_weights, write_nrvp
from .data import ToyDataset, synth_dataset
from .decoder import bench, decode_all, format_reports, stack_weights
from .errors import ConfigError, DataError, FormatError, NervcError
from .formats import (
    atomic_output,
    format_manifest,
    parse_manifest,
    read_checkpoint,
    read_clip,
    tensor_text,
    text_tensor,
    write_checkpoint,
    write_clip,
    write_ppm,
)
from .hypernet import HypernetConfig, HypernetParams, TokenSpec, encode, parameter_report
from .metrics import MetricsReport, psnr
from .nerv import NervConfig, decode_video
from .tensor import Tensor
from .training import fit_nerv, train_hypernet

log = logging.getLogger("nervc")

MANIFEST = "split.txt"
CONFIG_KEY = "__config__"


class Outputs:
    """Files created by the running command; removed again if it fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def discard(self) -> None:
        for p in self.paths:
            p.unlink(missing_ok=True)


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _check_clip(video: np.ndarray, nerv: NervConfig, what: str) -> None:
    f, _, h, w = video.shape
    if (f, h, w) != (nerv.frame_count, nerv.frame_size, nerv.frame_size):
        raise ConfigError(
            f"{what} is {f} frames of {h}x{w}, config decodes {nerv.frame_count} frames of "
            f"{nerv.frame_size}x{nerv.frame_size}"
        )


# -- subcommands ----------------------------------------------------------


def cmd_synth(args, out: Outputs) -> None:
    ds = synth_dataset(args.count, args.frames, args.size, args.size, seed=args.seed)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    train = set(ds.train_idx)
    for i, clip in enumerate(ds.clips):
        name = f"clip_{i:04d}.nvrw"
        write_clip(out.add(root / name), clip)
        entries.append((name, "train" if i in train else "test"))
    with atomic_output(out.add(root / MANIFEST)) as fh:
        fh.write(format_manifest(entries).encode("utf-8"))
    print(f"wrote {len(entries)} clips ({len(train)} train, {len(entries) - len(train)} test) to {root}")


def cmd_fit(args, out: Outputs) -> None:
    run = _config(args.config)
    video = read_clip(args.video)
    _check_clip(video, run.nerv, args.video)
    train = run.fit.with_(steps=args.steps) if args.steps else run.fit
    started = time.perf_counter()
    weights, history = fit_nerv(video, run.nerv, train)
    seconds = time.perf_counter() - started
    if args.history:
        with atomic_output(out.add(args.history)) as fh:
            fh.write((history.format() + "\n").encode("utf-8"))
    size = write_nrvp(out.add(args.out), run.nerv, weights, args.bits)
    float_psnr = psnr(video, decode_video(run.nerv, weights))
    quant_psnr = psnr(video, decode_video(run.nerv, roundtrip_weights(weights, run.nerv, args.bits)))
    print(f"steps\t{train.steps}\nseconds\t{seconds:.3f}\npsnr_float\t{float_psnr:.4f}\n"
          f"psnr_{args.bits}bit\t{quant_psnr:.4f}\nbytes\t{size}")


def load_split(root: Path) -> ToyDataset:
    manifest = root / MANIFEST
    if not manifest.exists():
        raise DataError(f"{root} has no {MANIFEST}")
    entries = parse_manifest(manifest.read_text(encoding="utf-8"))
    if not entries:
        raise DataError(f"{manifest} lists no clips")
    clips = [read_clip(root / name) for name, _ in entries]
    if len({c.shape for c in clips}) != 1:
        raise DataError("clips in one dataset must share frame count and size")
    train = [i for i, (_, s) in enumerate(entries) if s == "train"]
    test = [i for i, (_, s) in enumerate(entries) if s == "test"]
    return ToyDataset(np.stack(clips), train, test, {"source": str(root)})


def _apply_overrides(run: RunConfig, args) -> RunConfig:
    hyper = run.hypernet
    if args.token_mode:
        if hyper.nerv != NervConfig.desk(hyper.nerv.frame_count):
            raise ConfigError("--token-mode presets exist only for the desk decoder; set tokens in the config")
        hyper = hyper.with_(tokens=TokenSpec.desk(args.token_mode))
    if args.expansion:
        hyper = hyper.with_(expansion=args.expansion)
    if args.no_normalize:
        hyper = hyper.with_(normalize=False)
    if args.theta1_init:
        hyper = hyper.with_(theta1_init=args.theta1_init)
    train = run.train
    if args.degradation:
        train = train.with_(degradation=args.degradation)
    return RunConfig(run.nerv, hyper, train, run.fit)


def cmd_train_enc(args, out: Outputs) -> None:
    run = _apply_overrides(_config(args.config), args)
    ds = load_split(Path(args.data))
    _check_clip(ds.clips[0], run.nerv, "dataset")
    if not ds.train_idx:
        raise DataError("dataset has no training clips")
    steps = args.epochs * math.ceil(len(ds.train_idx) / run.train.batch_size)
    train = run.train.with_(steps=steps)
    print(parameter_report(run.hypernet))
    started = time.perf_counter()
    params, history = train_hypernet(ds, run.hypernet, train)
    seconds = time.perf_counter() - started
    tensors = {name: t.data for name, t in params.items()}
    tensors[CONFIG_KEY] = text_tensor(format_config(RunConfig(run.nerv, run.hypernet, train, run.fit)))
    write_checkpoint(out.add(args.out), tensors)
    hist_path = out.add(str(args.out) + ".history.tsv")
    with atomic_output(hist_path) as fh:
        fh.write((history.format() + "\n").encode("utf-8"))
    losses = history.column("loss")
    print(f"steps\t{len(losses)}\nseconds\t{seconds:.3f}\nfinal_loss\t{losses[-1]:.6g}\n"
          f"finite\t{all(map(math.isfinite, losses))}")


def load_encoder(path) -> tuple[HypernetConfig, HypernetParams]:
    tensors = read_checkpoint(path)
    if CONFIG_KEY not in tensors:
        raise FormatError(f"{path} carries no embedded config")
    run = parse_config(tensor_text(tensors.pop(CONFIG_KEY)))
    return run.hypernet, HypernetParams({k: Tensor(v) for k, v in tensors.items()})


def cmd_encode(args, out: Outputs) -> None:
    config, params = load_encoder(args.enc)
    video = read_clip(args.video)
    _check_clip(video, config.nerv, args.video)
    started = time.perf_counter()
    weights = encode(video, params, config)
    seconds = time.perf_counter() - started
    size = write_nrvp(out.add(args.out), config.nerv, weights, args.bits)
    print(f"encode_seconds\t{seconds:.6f}\nbytes\t{size}")


def cmd_decode(args, out: Outputs) -> None:
    if args.group < 1:
        raise ConfigError(f"--group must be positive, got {args.group}")
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    models = [(Path(p), *read_nrvp(p)) for p in args.inputs]
    # consecutive inputs with one config share a batch of at most G videos
    batches: list[list] = []
    for item in models:
        if batches and len(batches[-1]) < args.group and batches[-1][0][1] == item[1]:
            batches[-1].append(item)
        else:
            batches.append([item])
    for batch in batches:
        config = batch[0][1]
        frames = decode_all(stack_weights([w for _, _, w in batch], config))
        for (path, _, _), video in zip(batch, frames):
            if args.ppm:
                for t, frame in enumerate(video):
                    write_ppm(out.add(root / f"{path.stem}_{t:04d}.ppm"), frame)
            else:
                write_clip(out.add(root / f"{path.stem}.nvrw"), video)
    print(f"decoded {len(models)} videos in {len(batches)} batches")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive")
    return values


def cmd_bench(args, out: Outputs) -> None:
    if args.config:
        nerv = load_config(args.config).nerv
        nerv = NervConfig(**{**nerv.__dict__, "frame_count": args.frames})
    else:
        nerv = NervConfig.desk(frame_count=args.frames)
    threads = args.threads if args.threads else [runtime.thread_count()]
    reports = bench(nerv, args.groups, threads, videos=args.videos, repeats=args.repeats)
    print(format_reports(reports))


def cmd_metrics(args, out: Outputs) -> None:
    ref, test = read_clip(args.ref), read_clip(args.test)
    if ref.shape != test.shape:
        raise DataError(f"clip shapes differ: {ref.shape} vs {test.shape}")
    report = MetricsReport()
    report.add(ref, test)
    print(report.format())


# -- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nervc", description="Hyper-network video codec at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a toy corpus of NVRW clips and a split manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--size", type=int, default=32, help="frame height and width")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="overfit one decoder to one clip by gradient descent")
    p.add_argument("--video", required=True, help="input NVRW clip")
    p.add_argument("--config", help="INI run config")
    p.add_argument("--steps", type=int, help="override [fit] steps")
    p.add_argument("--bits", type=int, default=6, help="quantization bits (default 6)")
    p.add_argument("--history", help="write the loss history as TSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train-enc", help="train the hyper-network on a corpus directory")
    p.add_argument("--data", required=True, help="corpus directory with split.txt")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int, default=1, help="passes over the train split")
    p.add_argument("--out", required=True)
    p.add_argument("--token-mode", choices=["uniform", "layer-specific", "layer-adaptive"])
    p.add_argument("--expansion", choices=["repeat-outchannel", "repeat-inchannel", "repeat-kernel"])
    p.add_argument("--no-normalize", action="store_true", help="skip per-filter L2 normalisation")
    p.add_argument("--theta1-init", choices=["conv", "normal"])
    p.add_argument("--degradation", choices=["none", "downsample", "blur", "mask"], help="restoration mode input")
    p.set_defaults(func=cmd_train_enc)

    p = sub.add_parser("encode", help="one hyper-network forward pass, quantize, write NRVP")
    p.add_argument("--enc", required=True, help="NVCK checkpoint from train-enc")
    p.add_argument("--video", required=True)
    p.add_argument("--bits", type=int, default=6, help="quantization bits (default 6)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="grouped decode of NRVP files")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="NRVP files")
    p.add_argument("--out", required=True)
    p.add_argument("--ppm", action="store_true", help="emit P6 frames instead of NVRW clips")
    p.add_argument("--group", type=int, default=8, help="videos per grouped decode")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="decode throughput in videos per second")
    p.add_argument("--groups", type=_int_list, default=[1, 2, 4, 8, 16], help="comma-separated group sizes")
    p.add_argument("--threads", type=_int_list, help="comma-separated thread counts")
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--videos", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--config")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", help="PSNR and SSIM between two NVRW clips")
    p.add_argument("--ref", required=True, help="reference NVRW clip")
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    outputs = Outputs()
    try:
        if runtime.deterministic():
            with runtime.sequential():
                args.func(args, outputs)
        else:
            args.func(args, outputs)
    except (NervcError, OSError) as exc:
        outputs.discard()
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"nervc {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except BaseException:
        outputs.discard()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
