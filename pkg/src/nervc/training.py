"""Gradient fitting of a single decoder and training of the hyper-network."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import DEGRADATIONS, ToyDataset, degrade
from .errors import ConfigError, DataError, TrainingError
from .hypernet import HypernetConfig, HypernetParams, encode_batch, init_params, reconstruct
from .metrics import MetricsReport, psnr
from .nerv import NervConfig, NervWeights, decode_frames, decode_video, init_weights
from .tensor import AdamW, mse_loss, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-4
    decay_at: float = 0.9
    decay_factor: float = 0.1
    weight_decay: float = 0.0
    dropout: float | None = None
    seed: int = 0
    degradation: str = "none"
    augment: bool = False
    eval_every: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.degradation not in DEGRADATIONS:
            raise ConfigError(f"unknown degradation {self.degradation!r}; expected one of {DEGRADATIONS}")

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def lr_at(step: int, total: int, base: float, decay_at: float = 0.9, factor: float = 0.1) -> float:
    """Step decay: ``base`` before decay_at * total steps, ``base * factor`` from there on."""
    if total <= 0:
        raise ConfigError(f"total steps must be positive, got {total}")
    # compare in integers where possible so 0.9 * total does not wobble
    boundary = math.ceil(round(decay_at * total, 9))
    return base if step < boundary else base * factor


@dataclass
class History:
    """Per-step training records, printable as tab-separated text."""

    records: list[dict] = field(default_factory=list)

    def append(self, **record) -> None:
        self.records.append(record)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.records if name in r]

    def __len__(self) -> int:
        return len(self.records)

    def format(self) -> str:
        columns = ["step", "loss", "lr", "psnr"]
        extra = sorted({k for r in self.records for k in r} - set(columns))
        columns += extra
        lines = ["\t".join(columns)]
        for r in self.records:
            lines.append("\t".join(_fmt(r.get(c)) for c in columns))
        return "\n".join(lines)


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _loss_psnr(loss: float) -> float:
    return 100.0 if loss < 1e-10 else min(100.0, -10.0 * math.log10(loss))


# -- gradient baseline ----------------------------------------------------


def fit_nerv(video: np.ndarray, config: NervConfig, train: TrainConfig,
             weights: NervWeights | None = None) -> tuple[NervWeights, History]:
    """Overfit one decoder to one clip with AdamW; all frames form each step's batch.

    Returns the weights with the best training PSNR seen and the history.
    """
    video = np.asarray(video, dtype=np.float32)
    expected = (config.frame_count, config.out_channels, config.frame_size, config.frame_size)
    if video.shape != expected:
        raise DataError(f"video shape {video.shape} does not match decoder output {expected}")
    rng = np.random.default_rng(train.seed)
    if weights is None:
        weights = init_weights(config, rng, requires_grad=True)
    params = weights.tensors()
    for p in params:
        p.requires_grad = True
    opt = AdamW(params, lr=train.lr, weight_decay=train.weight_decay)
    history = History()
    frames = list(range(config.frame_count))
    best_psnr, best = -math.inf, weights.detach()
    for step in range(train.steps):
        opt.lr = lr_at(step, train.steps, train.lr, train.decay_at, train.decay_factor)
        opt.zero_grad()
        out = decode_frames(config, weights, frames)
        loss = mse_loss(out, video)
        value = float(loss.item())
        if not math.isfinite(value):
            raise TrainingError("non-finite loss while fitting the decoder", step)
        step_psnr = psnr(video, out.data)
        if step_psnr > best_psnr:
            best_psnr, best = step_psnr, weights.detach()
        loss.backward()
        opt.step()
        history.append(step=step, loss=value, lr=opt.lr, psnr=step_psnr)
    final_psnr = psnr(video, decode_video(config, weights))
    if final_psnr > best_psnr:
        best = weights.detach()
    return best, history


# -- hyper-network --------------------------------------------------------


def augment_batch(clips: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Label-preserving symmetries of the toy corpus: flips, transpose, colour
    permutation and time reversal, drawn independently per clip."""
    out = np.empty_like(clips)
    for i, clip in enumerate(clips):
        c = clip
        if rng.random() < 0.5:
            c = c[..., ::-1]
        if rng.random() < 0.5:
            c = c[..., ::-1, :]
        if rng.random() < 0.5:
            c = np.swapaxes(c, -1, -2)
        if rng.random() < 0.5:
            c = c[::-1]
        c = c[:, rng.permutation(3)]
        out[i] = c
    return out


def degrade_batch(clips: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    if mode == "none":
        return clips
    return np.stack([degrade(c, mode, rng) for c in clips])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx):
                yield idx


def evaluate_hypernet(params: HypernetParams, config: HypernetConfig, clips: np.ndarray,
                      degradation: str = "none", seed: int = 1234, with_ssim: bool = True,
                      chunk: int = 16) -> MetricsReport:
    """Encode every clip (optionally degraded first), decode, compare with the clean clip."""
    if len(clips) == 0:
        raise DataError("cannot evaluate an empty split")
    rng = np.random.default_rng(seed)
    inputs = degrade_batch(clips, degradation, rng)
    report = MetricsReport()
    for start in range(0, len(clips), chunk):
        with no_grad():
            out = reconstruct(inputs[start : start + chunk], params, config).data
        for ref, rec in zip(clips[start : start + chunk], out):
            report.add(ref, np.clip(rec, 0.0, 1.0), with_ssim)
    return report


def evaluate(model, clips: np.ndarray, config: HypernetConfig | NervConfig,
             degradation: str = "none", with_ssim: bool = True) -> MetricsReport:
    """Metrics for hyper-network params or a list of per-clip decoder weights."""
    clips = np.asarray(clips)
    if clips.ndim != 5 or len(clips) == 0:
        raise DataError("evaluate needs a non-empty batch of clips")
    if isinstance(model, HypernetParams):
        if not isinstance(config, HypernetConfig):
            raise ConfigError("hyper-network evaluation needs a HypernetConfig")
        return evaluate_hypernet(model, config, clips, degradation, with_ssim=with_ssim)
    nerv = config.nerv if isinstance(config, HypernetConfig) else config
    weights: Sequence[NervWeights] = model if isinstance(model, (list, tuple)) else [model]
    if len(weights) != len(clips):
        raise DataError(f"{len(weights)} weight sets for {len(clips)} clips")
    report = MetricsReport()
    for w, clip in zip(weights, clips):
        report.add(clip, decode_video(nerv, w), with_ssim)
    return report


def train_hypernet(dataset: ToyDataset | np.ndarray, config: HypernetConfig, train: TrainConfig,
                   params: HypernetParams | None = None, test_clips: np.ndarray | None = None,
                   callback: Callable[[int, dict], None] | None = None,
                   time_budget: float | None = None) -> tuple[HypernetParams, History]:
    """Minimise the summed frame MSE over the train split jointly in phi, theta0, theta1.

    Each step draws a batch of clips, optionally augments and degrades the
    encoder input, decodes every frame of every clip through one grouped
    decoder chain and regresses the clean clips.
    """
    if isinstance(dataset, ToyDataset):
        clips = dataset.train
        if test_clips is None and dataset.test_idx:
            test_clips = dataset.test
    else:
        clips = np.asarray(dataset)
    if len(clips) == 0:
        raise DataError("training split is empty")
    if train.dropout is not None:
        config = config.with_(dropout=train.dropout)
    rng = np.random.default_rng(train.seed)
    if params is None:
        params = init_params(config, rng)
    opt = AdamW(params.parameters(), lr=train.lr, weight_decay=train.weight_decay)
    history = History()
    batches = _batches(len(clips), train.batch_size, rng)
    started = time.perf_counter()
    for step in range(train.steps):
        opt.lr = lr_at(step, train.steps, train.lr, train.decay_at, train.decay_factor)
        clean = clips[next(batches)]
        if train.augment:
            clean = augment_batch(clean, rng)
        inputs = degrade_batch(clean, train.degradation, rng)
        opt.zero_grad()
        out = reconstruct(inputs, params, config, training=True, rng=rng)
        loss = mse_loss(out, clean)
        value = float(loss.item())
        if not math.isfinite(value):
            raise TrainingError("non-finite loss while training the hyper-network", step)
        loss.backward()
        opt.step()
        record = {"step": step, "loss": value, "lr": opt.lr, "psnr": _loss_psnr(value)}
        last = step == train.steps - 1
        if test_clips is not None and train.eval_every and (step % train.eval_every == 0 or last):
            record["test_psnr"] = evaluate_hypernet(params, config, test_clips, train.degradation,
                                                    with_ssim=False).mean_psnr
        history.append(**record)
        if callback is not None:
            callback(step, record)
        if time_budget is not None and time.perf_counter() - started > time_budget:
            logger.warning("time budget exhausted after %d steps", step + 1)
            break
    return params, history
