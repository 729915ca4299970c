"""Grouped decoding of many videos at once, plus a throughput benchmark.

G decoders that share one config are concatenated along the output-channel
axis of every layer. One time embedding is computed per frame index, tiled G
times along channels, and every convolution runs with ``groups=G``, so the
whole stack behaves like G independent decoders in a single pass.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import runtime
from .errors import ConfigError, FrameIndexError
from .nerv import NervConfig, NervWeights, embedding_batch, init_weights, repeat_embedding, run_blocks
from .tensor import Tensor, no_grad


@dataclass
class WeightBatch:
    config: NervConfig
    groups: int
    kernels: list[np.ndarray]
    biases: list[np.ndarray]

    def unstack(self) -> list[NervWeights]:
        out = []
        for g in range(self.groups):
            ks, bs = [], []
            for k, b in zip(self.kernels, self.biases):
                cout = k.shape[0] // self.groups
                ks.append(k[g * cout : (g + 1) * cout].copy())
                bs.append(b[g * cout : (g + 1) * cout].copy())
            out.append(NervWeights.from_arrays(ks, bs))
        return out

    def select(self, start: int, stop: int) -> "WeightBatch":
        """The sub-batch of videos [start, stop)."""
        ks, bs = [], []
        for k, b in zip(self.kernels, self.biases):
            cout = k.shape[0] // self.groups
            ks.append(np.ascontiguousarray(k[start * cout : stop * cout]))
            bs.append(np.ascontiguousarray(b[start * cout : stop * cout]))
        return WeightBatch(self.config, stop - start, ks, bs)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in self.kernels + self.biases:
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def stack_weights(weights: Sequence[NervWeights], config: NervConfig | Sequence[NervConfig]) -> WeightBatch:
    """Concatenate G decoders layer by layer along the output channels, in order."""
    if not weights:
        raise ConfigError("cannot stack an empty list of decoders")
    configs = list(config) if isinstance(config, (list, tuple)) else [config] * len(weights)
    if len(configs) != len(weights):
        raise ConfigError(f"{len(configs)} configs for {len(weights)} decoders")
    base = configs[0]
    for c in configs[1:]:
        if c != base:
            raise ConfigError("all decoders in a batch must share one config")
    for w in weights:
        w.check(base)
    kernels = [np.concatenate([w.kernels[l].data for w in weights], axis=0) for l in range(base.block_count)]
    biases = [np.concatenate([w.biases[l].data for w in weights], axis=0) for l in range(base.block_count)]
    return WeightBatch(base, len(weights), kernels, biases)


def decode_frames_batch(batch: WeightBatch, ts: Sequence[int], clamp: bool = True) -> np.ndarray:
    """Frames ``ts`` of every video in one grouped pass: G x len(ts) x 3 x H x W."""
    cfg = batch.config
    for t in ts:
        if not 0 <= t < cfg.frame_count:
            raise FrameIndexError(f"frame index {t} outside [0, {cfg.frame_count})")
    g = batch.groups
    dtype = batch.kernels[0].dtype if batch.kernels else np.float32
    with no_grad():
        emb = repeat_embedding(Tensor(embedding_batch(cfg, ts, dtype)), g)
        out = run_blocks(cfg, [Tensor(k) for k in batch.kernels], [Tensor(b) for b in batch.biases],
                         emb, groups=g).data
    f, _, h, w = out.shape
    frames = out.reshape(f, g, cfg.out_channels, h, w).transpose(1, 0, 2, 3, 4)
    return np.clip(frames, 0.0, 1.0) if clamp else frames


def decode_batch(batch: WeightBatch, t: int, clamp: bool = True) -> np.ndarray:
    """Frame ``t`` of all G videos: G x 3 x H x W."""
    return decode_frames_batch(batch, [t], clamp)[:, 0]


def decode_all(batch: WeightBatch, threads: int | None = None, clamp: bool = True) -> np.ndarray:
    """Every frame of every video, G x F x 3 x H x W, split over worker threads.

    Work is tiled over (frame range, video chunk); a single tile covers
    everything when only one thread is available.
    """
    threads = runtime.thread_count() if threads is None else max(1, threads)
    cfg = batch.config
    frames = list(range(cfg.frame_count))
    if threads == 1:
        return decode_frames_batch(batch, frames, clamp)
    chunk = max(1, math.ceil(batch.groups / threads))
    video_tiles = [(s, min(s + chunk, batch.groups)) for s in range(0, batch.groups, chunk)]
    frame_splits = max(1, threads // len(video_tiles))
    frame_tiles = [list(part) for part in np.array_split(frames, min(frame_splits, len(frames))) if len(part)]
    subs = {vt: batch.select(*vt) for vt in video_tiles}
    out = np.empty((batch.groups, cfg.frame_count, cfg.out_channels, cfg.frame_size, cfg.frame_size),
                   dtype=batch.kernels[0].dtype)

    def work(vt, ft):
        out[vt[0] : vt[1], ft[0] : ft[-1] + 1] = decode_frames_batch(subs[vt], ft, clamp)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(work, vt, ft) for vt in video_tiles for ft in frame_tiles]
        for fut in futures:
            fut.result()
    return out


@dataclass
class ThroughputReport:
    group_size: int
    videos: int
    seconds: float
    threads: int

    @property
    def vps(self) -> float:
        return self.videos / self.seconds if self.seconds > 0 else float("inf")


def _time_decode(batches: Sequence[WeightBatch], threads: int, repeats: int) -> float:
    for b in batches:  # warm-up, excluded from timing
        decode_all(b, threads)
    start = time.perf_counter()
    for _ in range(repeats):
        for b in batches:
            decode_all(b, threads)
    return time.perf_counter() - start


def bench(config: NervConfig, group_sizes: Sequence[int] = (1, 2, 4, 8, 16), thread_counts: Sequence[int] = (1,),
          videos: int = 16, repeats: int = 3, seed: int = 0) -> list[ThroughputReport]:
    """Decode ``videos`` synthetic decoders in batches of G and report videos per second.

    G = 1 is the plain per-video loop.
    """
    rng = np.random.default_rng(seed)
    models = [init_weights(config, rng) for _ in range(videos)]
    reports = []
    for threads in thread_counts:
        for g in group_sizes:
            batches = [stack_weights(models[s : s + g], config) for s in range(0, videos, g)]
            decoded = sum(b.groups for b in batches) * repeats
            seconds = _time_decode(batches, threads, repeats)
            reports.append(ThroughputReport(g, decoded, seconds, threads))
    return reports


def format_reports(reports: Sequence[ThroughputReport]) -> str:
    lines = ["group\tthreads\tvideos\tseconds\tvps"]
    for r in reports:
        lines.append(f"{r.group_size}\t{r.threads}\t{r.videos}\t{r.seconds:.6f}\t{r.vps:.2f}")
    return "\n".join(lines)
