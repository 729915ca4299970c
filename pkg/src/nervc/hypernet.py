"""Transformer hyper-network that emits NeRV weights in one forward pass.

A clip is cut into P x P patches, each patch is projected to a d-wide token
and given a learned position embedding. Learned initial weight tokens are
appended, the whole sequence goes through a pre-norm transformer encoder, and
the trailing weight tokens are projected per decoder layer into modulation
rows. Each row modulates a slice of the shared (video-agnostic) kernels, and
the product is L2-normalised per output filter.

Everything here accepts a leading batch of videos so that training can decode
a whole batch with one grouped convolution chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, SpecError
from .nerv import NervConfig, NervWeights, layer_channels, repeat_embedding, run_blocks, embedding_batch
from .tensor import (
    Tensor,
    add,
    concat,
    dropout,
    gelu,
    l2_normalize,
    layer_norm,
    linear,
    matmul,
    mul,
    no_grad,
    repeat,
    reshape,
    scale,
    softmax,
    swapaxes,
    tile,
    transpose,
)

TOKEN_MODES = ("uniform", "layer-specific", "layer-adaptive")
EXPANSION_MODES = ("repeat-outchannel", "repeat-inchannel", "repeat-kernel")


@dataclass(frozen=True)
class TokenSpec:
    """How many weight tokens each decoder layer receives.

    A layer with ``counts[l] > 0`` gets tokens of width C_in * K^2, and its
    C_out output filters are shared out among the tokens in runs of
    C_out / counts[l].
    """

    counts: tuple[int, ...]
    mode: str = "layer-adaptive"

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(n) for n in self.counts))
        if self.mode not in TOKEN_MODES:
            raise SpecError(f"unknown token distribution mode {self.mode!r}; expected one of {TOKEN_MODES}")
        if any(n < 0 for n in self.counts):
            raise SpecError(f"token counts must be non-negative, got {self.counts}")

    @property
    def total(self) -> int:
        return sum(self.counts)

    def dims(self, nerv: NervConfig) -> list[int]:
        return [cin * k * k if n else 0 for n, (_, cin, k, _) in zip(self.counts, layer_channels(nerv))]

    def repetitions(self, nerv: NervConfig) -> list[int]:
        return [cout // n if n else 0 for n, (cout, _, _, _) in zip(self.counts, layer_channels(nerv))]

    def validate(self, nerv: NervConfig) -> None:
        if len(self.counts) != nerv.block_count:
            raise SpecError(f"token spec has {len(self.counts)} layers, decoder has {nerv.block_count}")
        for layer, (n, (cout, _, _, _)) in enumerate(zip(self.counts, layer_channels(nerv))):
            if n and cout % n:
                raise SpecError(f"layer {layer + 1}: C_out={cout} is not divisible by {n} tokens")

    def video_specific_params(self, nerv: NervConfig) -> int:
        """Number of video-specific weights, sum over layers of N_l * d_l."""
        return sum(n * d for n, d in zip(self.counts, self.dims(nerv)))

    def per_layer_params(self, nerv: NervConfig) -> list[int]:
        return [n * d for n, d in zip(self.counts, self.dims(nerv))]

    # presets matching the 32x32 desk decoder (layer C_out = 32, 32, 32, 48)
    @classmethod
    def desk(cls, mode: str = "layer-adaptive") -> "TokenSpec":
        presets = {
            "uniform": (4, 4, 4, 4),
            "layer-specific": (0, 16, 0, 0),
            "layer-adaptive": (2, 8, 4, 0),
        }
        return cls(presets[mode], mode)

    # presets for the 256x256, 16-wide decoder (layer C_out = 256, 256, 256, 48)
    @classmethod
    def full_scale(cls, mode: str = "layer-adaptive") -> "TokenSpec":
        presets = {
            "uniform": (256, 64, 64, 48),
            "layer-specific": (0, 256, 0, 0),
            "layer-adaptive": (64, 128, 32, 0),
        }
        return cls(presets[mode], mode)

    @classmethod
    def full_scale_listed(cls) -> "TokenSpec":
        """Token counts as listed in the implementation-details table."""
        return cls((4, 128, 64, 0), "layer-adaptive")


def default_heads(dim: int) -> int:
    """d/64 rounded to the nearest divisor of d (at least 1)."""
    target = max(1, round(dim / 64))
    divisors = [h for h in range(1, dim + 1) if dim % h == 0]
    return min(divisors, key=lambda h: (abs(h - target), h))


@dataclass(frozen=True)
class HypernetConfig:
    nerv: NervConfig
    tokens: TokenSpec
    patch_size: int = 16
    dim: int = 64
    depth: int = 2
    heads: int = 0
    ffn_dim: int = 128
    dropout: float = 0.0
    expansion: str = "repeat-outchannel"
    normalize: bool = True
    theta1_init: str = "conv"

    def __post_init__(self):
        if self.heads == 0:
            object.__setattr__(self, "heads", default_heads(self.dim))
        self.validate()

    @property
    def frames(self) -> int:
        return self.nerv.frame_count

    @property
    def height(self) -> int:
        return self.nerv.frame_size

    @property
    def width(self) -> int:
        return self.nerv.frame_size

    @property
    def patch_count(self) -> int:
        p = self.patch_size
        return self.frames * (self.height // p) * (self.width // p)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def validate(self) -> None:
        p = self.patch_size
        if p < 1 or self.height % p or self.width % p:
            raise ConfigError(f"frame {self.height}x{self.width} is not divisible into {p}x{p} patches")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"model dim {self.dim} is not divisible by {self.heads} heads")
        if self.depth < 0 or self.ffn_dim < 1:
            raise ConfigError("depth must be >= 0 and ffn_dim >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.expansion not in EXPANSION_MODES:
            raise ConfigError(f"unknown expansion mode {self.expansion!r}; expected one of {EXPANSION_MODES}")
        if self.theta1_init not in ("conv", "normal"):
            raise ConfigError(f"theta1_init must be 'conv' or 'normal', got {self.theta1_init!r}")
        try:
            self.tokens.validate(self.nerv)
        except SpecError as exc:
            raise ConfigError(str(exc)) from exc

    def with_(self, **changes) -> "HypernetConfig":
        return replace(self, **changes)

    @classmethod
    def desk(cls, mode: str = "layer-adaptive", **overrides) -> "HypernetConfig":
        return cls(nerv=NervConfig.desk(), tokens=TokenSpec.desk(mode), **overrides)


@dataclass
class HypernetParams:
    """Named learnables of the hyper-network, in a stable order.

    Names: ``patch.w``/``patch.b`` (patch embedder), ``pos`` (position
    embeddings), ``enc.{i}.*`` (encoder layers), ``theta0`` (initial weight
    tokens, one row per token), ``head.{l}.w``/``head.{l}.b`` (token heads),
    ``theta1.{l}`` (shared kernels) and ``bias.{l}`` (decoder biases).
    """

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def groups(self) -> dict[str, list[str]]:
        """Partition of names into phi, theta0 and theta1 (incl. decoder biases)."""
        out: dict[str, list[str]] = {"phi": [], "theta0": [], "theta1": []}
        for name in self.tensors:
            if name == "theta0":
                out["theta0"].append(name)
            elif name.startswith(("theta1.", "bias.")):
                out["theta1"].append(name)
            else:
                out["phi"].append(name)
        return out

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "HypernetParams":
        return HypernetParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()})

    def astype(self, dtype) -> "HypernetParams":
        return HypernetParams({k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.tensors.items()})


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(config: HypernetConfig, rng: np.random.Generator, dtype=np.float32) -> HypernetParams:
    """Fresh parameters; the same generator state always gives the same result."""
    d, f = config.dim, config.ffn_dim
    patch_in = 3 * config.patch_size**2
    arrays: dict[str, np.ndarray] = {
        "patch.w": _uniform(rng, patch_in, (patch_in, d)),
        "patch.b": np.zeros(d),
        "pos": rng.normal(0.0, 0.02, (config.patch_count, d)),
    }
    for i in range(config.depth):
        p = f"enc.{i}."
        arrays[p + "ln1.g"] = np.ones(d)
        arrays[p + "ln1.b"] = np.zeros(d)
        for proj in ("q", "k", "v", "o"):
            arrays[p + proj + ".w"] = _uniform(rng, d, (d, d))
            arrays[p + proj + ".b"] = np.zeros(d)
        arrays[p + "ln2.g"] = np.ones(d)
        arrays[p + "ln2.b"] = np.zeros(d)
        arrays[p + "ff1.w"] = _uniform(rng, d, (d, f))
        arrays[p + "ff1.b"] = np.zeros(f)
        arrays[p + "ff2.w"] = _uniform(rng, f, (f, d))
        arrays[p + "ff2.b"] = np.zeros(d)
    arrays["theta0"] = rng.normal(0.0, 0.02, (config.tokens.total, d))
    for layer, (n, width) in enumerate(zip(config.tokens.counts, config.tokens.dims(config.nerv))):
        if n:
            arrays[f"head.{layer}.w"] = _uniform(rng, d, (d, width))
            # modulation starts near 1 so the shared kernels carry the initial decoder
            arrays[f"head.{layer}.b"] = np.ones(width)
    for layer, (cout, cin, k, _) in enumerate(layer_channels(config.nerv)):
        fan_in = cin * k * k
        if config.theta1_init == "conv":
            arrays[f"theta1.{layer}"] = _uniform(rng, fan_in, (cout, cin, k, k))
        else:
            arrays[f"theta1.{layer}"] = rng.normal(0.0, 0.02, (cout, cin, k, k))
        arrays[f"bias.{layer}"] = _uniform(rng, fan_in, (cout,))
    return HypernetParams({k: Tensor(v.astype(dtype), requires_grad=True) for k, v in arrays.items()})


def patchify(videos: np.ndarray, patch: int) -> np.ndarray:
    """B x F x 3 x H x W -> B x M x 3P^2, frame-major then row-major patch order."""
    b, f, c, h, w = videos.shape
    x = videos.reshape(b, f, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(b, f * (h // patch) * (w // patch), c * patch * patch)


def _as_batch(video: np.ndarray, config: HypernetConfig) -> tuple[np.ndarray, bool]:
    video = np.asarray(video)
    single = video.ndim == 4
    batch = video[None] if single else video
    expected = (config.frames, 3, config.height, config.width)
    if batch.ndim != 5 or batch.shape[1:] != expected:
        raise ConfigError(f"video shape {video.shape} does not match F x 3 x H x W = {expected}")
    return batch, single


def tokenize(video: np.ndarray, params: HypernetParams, config: HypernetConfig) -> Tensor:
    """Patch tokens plus the initial weight tokens: (M + N) x d, or B x (M + N) x d."""
    batch, single = _as_batch(video, config)
    dtype = params["patch.w"].dtype
    patches = Tensor(patchify(batch, config.patch_size).astype(dtype, copy=False))
    tokens = add(linear(patches, params["patch.w"], params["patch.b"]), params["pos"])
    if config.tokens.total:
        t0 = reshape(params["theta0"], (1, config.tokens.total, config.dim))
        tokens = concat([tokens, tile(t0, batch.shape[0], axis=0)], axis=1)
    return reshape(tokens, tokens.shape[1:]) if single else tokens


def _attention(x: Tensor, params: HypernetParams, prefix: str, config: HypernetConfig) -> Tensor:
    b, n, d = x.shape
    h, dh = config.heads, config.head_dim

    def heads(name: str) -> Tensor:
        y = linear(x, params[prefix + name + ".w"], params[prefix + name + ".b"])
        return transpose(reshape(y, (b, n, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    out = matmul(softmax(scores, axis=-1), v)
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, n, d))
    return linear(out, params[prefix + "o.w"], params[prefix + "o.b"])


def encoder_forward(tokens: Tensor, params: HypernetParams, config: HypernetConfig,
                    training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm transformer: x + MHA(LN(x)), then x + FFN(LN(x)), per layer."""
    single = tokens.ndim == 2
    x = reshape(tokens, (1,) + tokens.shape) if single else tokens
    p_drop = config.dropout
    for i in range(config.depth):
        pre = f"enc.{i}."
        h = layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        x = add(x, dropout(_attention(h, params, pre, config), p_drop, training, rng))
        h = layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        h = gelu(linear(h, params[pre + "ff1.w"], params[pre + "ff1.b"]))
        h = linear(h, params[pre + "ff2.w"], params[pre + "ff2.b"])
        x = add(x, dropout(h, p_drop, training, rng))
    return reshape(x, x.shape[1:]) if single else x


def extract_weight_tokens(encoded: Tensor, params: HypernetParams, config: HypernetConfig) -> list[Tensor | None]:
    """Project the trailing N_total rows into one N_l x d_l matrix per layer.

    Layers without tokens yield ``None``.
    """
    total = config.tokens.total
    if encoded.shape[-1] != config.dim or encoded.shape[-2] < total:
        raise ConfigError(f"encoded tokens {encoded.shape} cannot hold {total} weight tokens of width {config.dim}")
    rows_end = encoded.shape[-2]
    start = rows_end - total
    out: list[Tensor | None] = []
    for layer, n in enumerate(config.tokens.counts):
        if not n:
            out.append(None)
            continue
        name = f"head.{layer}.w"
        if name not in params:
            raise ConfigError(f"parameters have no token head for layer {layer + 1}")
        rows = encoded[..., start : start + n, :]
        out.append(linear(rows, params[name], params[f"head.{layer}.b"]))
        start += n
    return out


def expand_modulation(rows: Tensor, kernel_shape: tuple[int, ...], mode: str = "repeat-outchannel") -> Tensor:
    """Blow the N x (C_in K^2) rows up to the C_out x C_in x K x K kernel grid.

    ``repeat-outchannel`` repeats every row C_out/N times along the output
    filters (filter c takes row c // g). ``repeat-kernel`` tiles the whole row
    block (filter c takes row c % N). ``repeat-inchannel`` repeats every
    scalar g times in place, so neighbouring taps inside a filter share a
    value.
    """
    cout = kernel_shape[0]
    n = rows.shape[-2]
    if n == 0 or cout % n:
        raise SpecError(f"C_out={cout} is not divisible by {n} tokens")
    g = cout // n
    lead = rows.shape[:-2]
    fiber = int(np.prod(kernel_shape[1:]))
    if rows.shape[-1] != fiber:
        raise SpecError(f"token width {rows.shape[-1]} does not match C_in*K*K = {fiber}")
    if mode == "repeat-outchannel":
        grid = repeat(rows, g, axis=-2)
    elif mode == "repeat-kernel":
        grid = tile(rows, g, axis=-2)
    elif mode == "repeat-inchannel":
        flat = reshape(rows, lead + (n * fiber,))
        grid = repeat(flat, g, axis=-1)
    else:
        raise SpecError(f"unknown expansion mode {mode!r}")
    return reshape(grid, lead + tuple(kernel_shape))


def modulate(rows: Tensor, theta1: Tensor, mode: str = "repeat-outchannel", normalize: bool = True) -> Tensor:
    """theta1 * expand(rows), L2-normalised over each output filter."""
    grid = expand_modulation(rows, theta1.shape, mode)
    out = mul(grid, theta1)
    if not normalize:
        return out
    nd = out.ndim
    return l2_normalize(out, tuple(range(nd - 3, nd)))


def generate_kernels(videos: np.ndarray, params: HypernetParams, config: HypernetConfig,
                     training: bool = False, rng: np.random.Generator | None = None) -> list[Tensor]:
    """Per-layer kernels for a batch: B x C_out x C_in x K x K each."""
    batch, _ = _as_batch(videos, config)
    bsz = batch.shape[0]
    tokens = tokenize(batch, params, config)
    encoded = encoder_forward(tokens, params, config, training, rng)
    rows = extract_weight_tokens(encoded, params, config)
    kernels = []
    for layer, v in enumerate(rows):
        theta1 = params[f"theta1.{layer}"]
        if v is None:
            kernels.append(tile(reshape(theta1, (1,) + theta1.shape), bsz, axis=0))
        else:
            kernels.append(modulate(v, theta1, config.expansion, config.normalize))
    return kernels


def reconstruct(videos: np.ndarray, params: HypernetParams, config: HypernetConfig,
                training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Encode a batch and decode all of its frames with one grouped decoder chain.

    Returns unclamped frames shaped B x F x 3 x H x W.
    """
    batch, _ = _as_batch(videos, config)
    bsz = batch.shape[0]
    nerv = config.nerv
    kernels = generate_kernels(batch, params, config, training, rng)
    stacked = [reshape(k, (bsz * k.shape[1],) + k.shape[2:]) for k in kernels]
    biases = [tile(params[f"bias.{layer}"], bsz, axis=0) for layer in range(nerv.block_count)]
    emb = Tensor(embedding_batch(nerv, range(nerv.frame_count), params["theta1.0"].dtype))
    frames = run_blocks(nerv, stacked, biases, repeat_embedding(emb, bsz), groups=bsz)
    f, _, h, w = frames.shape
    frames = reshape(frames, (f, bsz, nerv.out_channels, h, w))
    return transpose(frames, (1, 0, 2, 3, 4))


def encode_batch(videos: np.ndarray, params: HypernetParams, config: HypernetConfig) -> list[NervWeights]:
    batch, _ = _as_batch(videos, config)
    with no_grad():
        kernels = generate_kernels(batch, params, config)
    out = []
    for i in range(batch.shape[0]):
        out.append(NervWeights(
            [Tensor(k.data[i].copy()) for k in kernels],
            [Tensor(params[f"bias.{layer}"].data.copy()) for layer in range(config.nerv.block_count)],
        ))
    return out


def encode(video: np.ndarray, params: HypernetParams, config: HypernetConfig) -> NervWeights:
    """One hyper-network forward pass: video -> decoder weights (eval mode)."""
    video = np.asarray(video)
    if video.ndim != 4:
        raise ConfigError(f"encode takes one F x 3 x H x W clip, got shape {video.shape}")
    return encode_batch(video[None], params, config)[0]


def video_specific_values(video: np.ndarray, params: HypernetParams, config: HypernetConfig) -> list[np.ndarray]:
    """The raw per-layer token head outputs for one clip (eval mode)."""
    batch, _ = _as_batch(np.asarray(video)[None], config)
    with no_grad():
        encoded = encoder_forward(tokenize(batch, params, config), params, config)
        rows = extract_weight_tokens(encoded, params, config)
    return [r.data[0] for r in rows if r is not None]


def parameter_report(config: HypernetConfig) -> str:
    """One line of token accounting: per-layer N_l*d_l and their sum."""
    per_layer = config.tokens.per_layer_params(config.nerv)
    total = config.tokens.video_specific_params(config.nerv)
    parts = "_".join(str(p) for p in per_layer)
    return f"mode={config.tokens.mode} tokens={config.tokens.counts} layer_params={parts} video_specific={total}"


def stack_videos(videos: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(v) for v in videos])
