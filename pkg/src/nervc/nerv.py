"""The NeRV frame decoder: frame index -> full RGB frame.

A frame index is normalised to [-1, 1], expanded into a sinusoidal time
embedding, viewed as a 1x1 feature map and pushed through a chain of
conv -> pixel-shuffle -> GELU blocks. The last block skips the activation and
adds a constant output bias of 0.5 instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, FrameIndexError, WeightError
from .tensor import Tensor, add, conv2d, gelu, no_grad, pixel_shuffle, tile


@dataclass(frozen=True)
class NervConfig:
    pe_dim: int = 16
    pe_base: float = 1.25
    upscales: tuple[int, ...] = (4, 4, 4, 4)
    kernels: tuple[int, ...] = (1, 3, 3, 3)
    width: int = 16
    out_channels: int = 3
    frame_count: int = 8
    output_bias: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "upscales", tuple(int(s) for s in self.upscales))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        self.validate()

    @property
    def block_count(self) -> int:
        return len(self.upscales)

    @property
    def frame_size(self) -> int:
        """Output height (= width); the spatial chain starts at 1x1."""
        return math.prod(self.upscales)

    def validate(self) -> None:
        if len(self.upscales) != len(self.kernels):
            raise ConfigError(
                f"upscales ({len(self.upscales)}) and kernels ({len(self.kernels)}) must have one entry per block"
            )
        if self.pe_dim <= 0 or self.pe_dim % 2:
            raise ConfigError(f"pe_dim must be a positive even number, got {self.pe_dim}")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ConfigError(f"kernel sizes must be odd, got {self.kernels}")
        if any(s < 1 for s in self.upscales):
            raise ConfigError(f"upscale factors must be positive, got {self.upscales}")
        if self.width < 1 or self.out_channels < 1 or self.frame_count < 1:
            raise ConfigError("width, out_channels and frame_count must be positive")

    @classmethod
    def full_scale(cls) -> "NervConfig":
        return cls()

    @classmethod
    def desk(cls, frame_count: int = 4) -> "NervConfig":
        """8-wide decoder producing 32x32 frames."""
        return cls(pe_dim=8, width=8, upscales=(2, 2, 2, 4), kernels=(1, 3, 3, 3), frame_count=frame_count)


def layer_channels(config: NervConfig) -> list[tuple[int, int, int, int]]:
    """(C_out, C_in, K, S) for every block."""
    dims = []
    for i, (s, k) in enumerate(zip(config.upscales, config.kernels)):
        last = i == config.block_count - 1
        cin = config.pe_dim if i == 0 else config.width
        cout = (config.out_channels if last else config.width) * s * s
        dims.append((cout, cin, k, s))
    return dims


def shapes_of(config: NervConfig) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    return [((cout, cin, k, k), (cout,)) for cout, cin, k, _ in layer_channels(config)]


def kernel_param_counts(config: NervConfig) -> list[int]:
    return [math.prod(kshape) for kshape, _ in shapes_of(config)]


def param_count(config: NervConfig, include_bias: bool = True) -> int:
    total = sum(kernel_param_counts(config))
    if include_bias:
        total += sum(bshape[0] for _, bshape in shapes_of(config))
    return total


@dataclass
class NervWeights:
    """Kernels and biases of one decoder, one entry per block."""

    kernels: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    def check(self, config: NervConfig) -> None:
        shapes = shapes_of(config)
        if len(self.kernels) != len(shapes) or len(self.biases) != len(shapes):
            raise WeightError(f"expected {len(shapes)} blocks, got {len(self.kernels)} kernels / {len(self.biases)} biases")
        for i, ((kshape, bshape), k, b) in enumerate(zip(shapes, self.kernels, self.biases)):
            if k.shape != kshape or b.shape != bshape:
                raise WeightError(f"block {i}: expected kernel {kshape} / bias {bshape}, got {k.shape} / {b.shape}")

    def tensors(self) -> list[Tensor]:
        return [t for pair in zip(self.kernels, self.biases) for t in pair]

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors()]

    def detach(self) -> "NervWeights":
        return NervWeights([Tensor(k.data.copy()) for k in self.kernels], [Tensor(b.data.copy()) for b in self.biases])

    @classmethod
    def from_arrays(cls, kernels: Sequence[np.ndarray], biases: Sequence[np.ndarray], requires_grad: bool = False):
        return cls([Tensor(k, requires_grad=requires_grad) for k in kernels],
                   [Tensor(b, requires_grad=requires_grad) for b in biases])


def init_weights(config: NervConfig, rng: np.random.Generator, dtype=np.float32,
                 requires_grad: bool = False) -> NervWeights:
    """Fan-in uniform initialisation U(-1/sqrt(C_in K^2), 1/sqrt(C_in K^2))."""
    kernels, biases = [], []
    for (kshape, bshape) in shapes_of(config):
        bound = 1.0 / math.sqrt(kshape[1] * kshape[2] * kshape[3])
        kernels.append(rng.uniform(-bound, bound, kshape).astype(dtype))
        biases.append(rng.uniform(-bound, bound, bshape).astype(dtype))
    return NervWeights.from_arrays(kernels, biases, requires_grad=requires_grad)


def zero_weights(config: NervConfig, dtype=np.float32) -> NervWeights:
    return NervWeights.from_arrays([np.zeros(k, dtype) for k, _ in shapes_of(config)],
                                   [np.zeros(b, dtype) for _, b in shapes_of(config)])


def normalized_time(t: int, frame_count: int) -> float:
    if not 0 <= t < frame_count:
        raise FrameIndexError(f"frame index {t} outside [0, {frame_count})")
    if frame_count == 1:
        return 0.0
    return 2.0 * t / (frame_count - 1) - 1.0


def time_embedding(t: int, frame_count: int, pe_dim: int, pe_base: float = 1.25) -> np.ndarray:
    """Interleaved [sin(pi b^j t~), cos(pi b^j t~)] for j = 0 .. pe_dim/2 - 1."""
    if pe_dim % 2:
        raise ConfigError(f"pe_dim must be even, got {pe_dim}")
    tn = normalized_time(t, frame_count)
    freqs = math.pi * np.power(float(pe_base), np.arange(pe_dim // 2, dtype=np.float64))
    out = np.empty(pe_dim, dtype=np.float64)
    out[0::2] = np.sin(freqs * tn)
    out[1::2] = np.cos(freqs * tn)
    return out


def embedding_batch(config: NervConfig, ts: Sequence[int], dtype=np.float32) -> np.ndarray:
    """Stack of time embeddings as a B x pe_dim x 1 x 1 feature map."""
    emb = np.stack([time_embedding(t, config.frame_count, config.pe_dim, config.pe_base) for t in ts])
    return emb.astype(dtype).reshape(len(ts), config.pe_dim, 1, 1)


def run_blocks(config: NervConfig, kernels: Sequence[Tensor], biases: Sequence[Tensor],
               features: Tensor, groups: int = 1) -> Tensor:
    """Apply the block chain to a B x (G*pe_dim) x 1 x 1 input.

    With ``groups`` > 1 the kernels are the output-channel concatenation of G
    decoders and every convolution is grouped, so group g only ever sees
    channels belonging to decoder g.
    """
    x = features
    last = config.block_count - 1
    for i, (k, b, s) in enumerate(zip(kernels, biases, config.upscales)):
        x = conv2d(x, k, b, groups=groups)
        x = pixel_shuffle(x, s)
        if i < last:
            x = gelu(x)
    return add(x, config.output_bias)


def decode_frames(config: NervConfig, weights: NervWeights, ts: Sequence[int]) -> Tensor:
    """Unclamped frames for every index in ``ts`` as a B x 3 x H x W tensor."""
    weights.check(config)
    dtype = weights.kernels[0].dtype if weights.kernels else np.float32
    emb = Tensor(embedding_batch(config, ts, dtype))
    return run_blocks(config, weights.kernels, weights.biases, emb)


def nerv_forward(config: NervConfig, weights: NervWeights, t: int, clamp: bool = True) -> np.ndarray:
    """Decode a single frame; the result is clamped to [0, 1] unless ``clamp`` is False."""
    with no_grad():
        frame = decode_frames(config, weights, [t]).data[0]
    return np.clip(frame, 0.0, 1.0) if clamp else frame


def decode_video(config: NervConfig, weights: NervWeights, clamp: bool = True) -> np.ndarray:
    """All ``frame_count`` frames as an F x 3 x H x W array."""
    with no_grad():
        frames = decode_frames(config, weights, range(config.frame_count)).data
    return np.clip(frames, 0.0, 1.0) if clamp else frames


def repeat_embedding(emb: Tensor, groups: int) -> Tensor:
    """Tile a B x pe x 1 x 1 embedding to B x (G*pe) x 1 x 1."""
    return tile(emb, groups, axis=1) if groups > 1 else emb

