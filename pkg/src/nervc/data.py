"""Procedural toy clips and input degradations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError

DEGRADATIONS = ("none", "downsample", "blur", "mask")


@dataclass
class ToyDataset:
    """Moving-rectangle clips with a fixed train/test split.

    ``clips`` is count x F x 3 x H x W float32 in [0, 1].
    """

    clips: np.ndarray
    train_idx: list[int]
    test_idx: list[int]
    params: dict = field(default_factory=dict)

    def split(self, name: str) -> np.ndarray:
        idx = {"train": self.train_idx, "test": self.test_idx}.get(name)
        if idx is None:
            raise DataError(f"unknown split {name!r}")
        if not idx:
            raise DataError(f"split {name!r} is empty")
        return self.clips[idx]

    @property
    def train(self) -> np.ndarray:
        return self.split("train")

    @property
    def test(self) -> np.ndarray:
        return self.split("test")


def render_clip(rng: np.random.Generator, frames: int, height: int, width: int) -> np.ndarray:
    """1-3 flat-coloured rectangles gliding at constant velocity over a flat background."""
    clip = np.empty((frames, 3, height, width), dtype=np.float32)
    background = rng.uniform(0.0, 1.0, 3)
    count = int(rng.integers(1, 4))
    rects = []
    for _ in range(count):
        rh = int(rng.integers(max(2, height // 6), max(3, height // 2) + 1))
        rw = int(rng.integers(max(2, width // 6), max(3, width // 2) + 1))
        y0 = rng.uniform(-rh / 2, height - rh / 2)
        x0 = rng.uniform(-rw / 2, width - rw / 2)
        vy, vx = rng.uniform(-height / 16, height / 16, 2)
        rects.append((rh, rw, y0, x0, vy, vx, rng.uniform(0.0, 1.0, 3)))
    for t in range(frames):
        frame = np.broadcast_to(background[:, None, None], (3, height, width)).copy()
        for rh, rw, y0, x0, vy, vx, color in rects:
            top = int(round(y0 + vy * t))
            left = int(round(x0 + vx * t))
            ys, ye = max(0, top), min(height, top + rh)
            xs, xe = max(0, left), min(width, left + rw)
            if ys < ye and xs < xe:
                frame[:, ys:ye, xs:xe] = color[:, None, None]
        clip[t] = frame
    return clip


def synth_dataset(count: int = 64, frames: int = 4, height: int = 32, width: int = 32,
                  seed: int = 0, train_fraction: float = 0.75) -> ToyDataset:
    """Deterministic corpus; the first ``train_fraction`` of clips form the train split."""
    if count < 1 or frames < 1 or height < 1 or width < 1:
        raise DataError("count, frames, height and width must be positive")
    rng = np.random.default_rng(seed)
    clips = np.stack([render_clip(rng, frames, height, width) for _ in range(count)])
    n_train = int(round(count * train_fraction))
    return ToyDataset(
        clips=clips,
        train_idx=list(range(n_train)),
        test_idx=list(range(n_train, count)),
        params={"count": count, "frames": frames, "height": height, "width": width, "seed": seed},
    )


def mean_frame_baseline(clip: np.ndarray) -> np.ndarray:
    """The clip's temporal mean repeated over every frame."""
    return np.broadcast_to(clip.mean(axis=0, keepdims=True), clip.shape).copy()


# -- degradations ---------------------------------------------------------


def _bilinear_axis(x: np.ndarray, out_size: int, axis: int) -> np.ndarray:
    """Half-pixel-centred linear resampling along one axis with edge clamping."""
    in_size = x.shape[axis]
    pos = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    pos = np.clip(pos, 0.0, in_size - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = (pos - lo).astype(x.dtype)
    shape = [1] * x.ndim
    shape[axis] = out_size
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1 - frac) + np.take(x, hi, axis=axis) * frac


def resize_bilinear(x: np.ndarray, height: int, width: int) -> np.ndarray:
    return _bilinear_axis(_bilinear_axis(x, height, -2), width, -1)


def gaussian_blur(x: np.ndarray, size: int = 5, sigma: float = 2.0) -> np.ndarray:
    """Per-frame Gaussian blur with reflect padding.

    Written as x + sum_i w_i (x_i - x) so a flat region stays bit-exactly flat.
    """
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g = (g / g.sum()).astype(x.dtype)
    half = size // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (half, half)]
    xp = np.pad(x, pad, mode="symmetric")
    h, w = x.shape[-2:]
    acc = np.zeros_like(x)
    for i in range(size):
        for j in range(size):
            acc += (g[i] * g[j]) * (xp[..., i : i + h, j : j + w] - x)
    return x + acc


def degrade(video: np.ndarray, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Corrupt an F x 3 x H x W clip for restoration training."""
    video = np.asarray(video)
    if mode == "none":
        return video
    if mode == "downsample":
        h, w = video.shape[-2:]
        small = resize_bilinear(video, max(1, h // 4), max(1, w // 4))
        out = resize_bilinear(small, h, w)
    elif mode == "blur":
        out = gaussian_blur(video)
    elif mode == "mask":
        if rng is None:
            raise ParameterError("mask degradation needs a random generator")
        h, w = video.shape[-2:]
        mh, mw = h // 2, w // 2
        top = int(rng.integers(0, h - mh + 1))
        left = int(rng.integers(0, w - mw + 1))
        out = video.copy()
        out[..., top : top + mh, left : left + mw] = 0.0
    else:
        raise ParameterError(f"unknown degradation {mode!r}; expected one of {DEGRADATIONS}")
    return np.clip(out, 0.0, 1.0).astype(video.dtype, copy=False)
