"""Four-stage windowed-attention backbone with a parallel conv branch.

Feature maps travel as [B, N, N, C] grids. Each block runs the usual
pre-norm attention + MLP pair (alternating plain and shifted windows)
and, when enabled, a cheap convolutional branch on the block input;
the two results fuse by elementwise addition. Stages end with a 2x2
patch merge that doubles channels and halves the grid.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, ShapeMismatchError
from .tensor import Tensor

HF_MODES = ("depthwise", "full")


@dataclass
class ModelConfig:
    embed_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 6, 2)
    num_heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: int = 4
    patch_size: int = 4
    img_size: int = 224
    num_classes: int = 1000
    hf_branch_enabled: bool = True
    hf_conv_mode: str = "depthwise"

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * (2**i)

    def stage_grid(self, i: int, img_size: int | None = None) -> int:
        img = self.img_size if img_size is None else img_size
        return img // self.patch_size // (2**i)

    def validate(self) -> None:
        if len(self.depths) != len(self.num_heads) or not self.depths:
            raise ConfigError(f"depths {self.depths} and num_heads {self.num_heads} "
                              "must be non-empty and the same length")
        if min(self.depths) < 1 or min(self.num_heads) < 1:
            raise ConfigError("depths and num_heads must be positive")
        if self.patch_size < 1 or self.window_size < 1 or self.mlp_ratio < 1:
            raise ConfigError("patch_size, window_size and mlp_ratio must be positive")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes {self.num_classes} must be >= 1")
        if self.hf_conv_mode not in HF_MODES:
            raise ConfigError(f"hf_conv_mode {self.hf_conv_mode!r} not in {HF_MODES}")
        self.validate_img_size(self.img_size)
        for i in range(self.num_stages):
            dim = self.stage_dim(i)
            if dim % self.num_heads[i]:
                raise ConfigError(f"stage {i}: dim {dim} not divisible by "
                                  f"{self.num_heads[i]} heads")
            if self.hf_branch_enabled and dim % 2:
                raise ConfigError(f"stage {i}: dim {dim} must be even to split "
                                  "for the conv branch")

    def validate_img_size(self, img_size: int) -> None:
        """Check that every stage grid is integral and window-divisible."""
        if img_size < 1 or img_size % self.patch_size:
            raise ConfigError(f"img_size {img_size} not divisible by patch_size "
                              f"{self.patch_size}")
        grid = img_size // self.patch_size
        for i in range(self.num_stages):
            if grid % self.window_size:
                raise ConfigError(f"stage {i} grid {grid} not divisible by "
                                  f"window_size {self.window_size} at img_size {img_size}")
            if i + 1 < self.num_stages:
                if grid % 2:
                    raise ConfigError(f"stage {i} grid {grid} is odd; cannot merge "
                                      f"patches at img_size {img_size}")
                grid //= 2

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(d)


# ---------------------------------------------------------------------------
# parameter containers


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws with |z| > 2 resampled, then scaled by std."""
    out = rng.standard_normal(shape)
    while True:
        bad = np.abs(out) > 2.0
        n = int(bad.sum())
        if not n:
            break
        out[bad] = rng.standard_normal(n)
    return out * std


class Module:
    """Minimal container: parameters are Tensor attributes that require
    gradients, discovered by walking attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, weights: dict[str, np.ndarray]) -> None:
        """Replace every parameter; mismatched names or shapes raise
        ShapeMismatchError listing the offending entries."""
        params = dict(self.named_parameters())
        problems = []
        for name in sorted(set(params) | set(weights)):
            if name not in weights:
                problems.append(f"missing from checkpoint: {name} {params[name].shape}")
            elif name not in params:
                problems.append(f"unexpected in checkpoint: {name} {weights[name].shape}")
            elif tuple(weights[name].shape) != params[name].shape:
                problems.append(f"shape mismatch: {name} checkpoint {tuple(weights[name].shape)} "
                                f"vs model {params[name].shape}")
        if problems:
            raise ShapeMismatchError(
                f"{len(problems)} weight entries do not fit the model", problems)
        for name, p in params.items():
            p.data = weights[name].astype(p.data.dtype).reshape(p.data.shape)


class Linear(Module):
    def __init__(self, rng, in_features: int, out_features: int, bias: bool = True):
        self.weight = Tensor(trunc_normal(rng, (in_features, out_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int,
                 stride: int = 1, padding: int = 0, groups: int = 1, bias: bool = True):
        self.weight = Tensor(trunc_normal(rng, (out_ch, in_ch // groups, kernel, kernel)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)


# ---------------------------------------------------------------------------
# window bookkeeping


def window_partition(grid: Tensor, window: int) -> Tensor:
    """[B, N, N, C] -> [B * (N/window)^2, window^2, C], row-major windows."""
    b, n, n2, c = grid.shape
    if n != n2 or n % window:
        raise ShapeError(f"window_partition: grid {grid.shape} with window {window}")
    m = n // window
    x = T.reshape(grid, (b, m, window, m, window, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * m * m, window * window, c))


def window_reverse(windows: Tensor, window: int, batch: int, n: int) -> Tensor:
    """Exact inverse of window_partition."""
    m = n // window
    c = windows.shape[-1]
    x = T.reshape(windows, (batch, m, m, window, window, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (batch, n, n, c))


def relative_position_index(window: int) -> np.ndarray:
    """[T, T] lookup into the (2w-1)^2-row bias table for every query/key
    offset inside one window."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def build_attention_mask(n: int, window: int, shift: int) -> np.ndarray:
    """[nW, T, T] additive mask for shifted windows: 0 where the pair
    shared a pre-shift window, -inf where it did not."""
    if not 0 < shift < window:
        raise ConfigError(f"shift {shift} must lie in (0, window {window})")
    regions = np.zeros((n, n))
    bounds = (slice(0, n - window), slice(n - window, n - shift), slice(n - shift, n))
    code = 0
    for hs in bounds:
        for ws in bounds:
            regions[hs, ws] = code
            code += 1
    m = n // window
    r = regions.reshape(m, window, m, window).transpose(0, 2, 1, 3).reshape(m * m, window * window)
    blocked = r[:, None, :] != r[:, :, None]
    return np.where(blocked, -np.inf, 0.0)


# ---------------------------------------------------------------------------
# blocks


class WindowAttention(Module):
    """Multi-head attention inside one window with a learned relative
    position bias per head."""

    def __init__(self, rng, dim: int, num_heads: int, window: int):
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by {num_heads} heads")
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.bias_table = Tensor(np.zeros(((2 * window - 1) ** 2, num_heads)),
                                 requires_grad=True)
        self.num_heads = num_heads
        self.window = window
        self.scale = (dim // num_heads) ** -0.5
        self._bias_index = relative_position_index(window)

    def __call__(self, xw: Tensor, mask: np.ndarray | None = None,
                 return_attn: bool = False):
        bw, t, c = xw.shape
        h = self.num_heads
        d = c // h

        qkv = self.qkv(xw)                                  # [Bw, T, 3C]
        qkv = T.reshape(qkv, (bw, t, 3, h, d))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))             # [3, Bw, h, T, d]
        q, k, v = (T.reshape(part, (bw, h, t, d))
                   for part in T.split(qkv, (1, 1, 1), axis=0))

        logits = T.matmul(T.scale(q, self.scale), T.transpose(k, (0, 1, 3, 2)))

        bias = T.take_rows(self.bias_table, self._bias_index.reshape(-1))
        bias = T.reshape(bias, (t, t, h))
        bias = T.transpose(bias, (2, 0, 1))
        bias = T.broadcast_to(T.reshape(bias, (1, h, t, t)), (bw, h, t, t))
        logits = T.add(logits, bias)

        if mask is not None:
            nw = mask.shape[0]
            b = bw // nw
            logits = T.reshape(logits, (b, nw, h, t, t))
            madd = T.broadcast_to(Tensor(mask.reshape(1, nw, 1, t, t)), (b, nw, h, t, t))
            logits = T.reshape(T.add(logits, madd), (bw, h, t, t))

        attn = T.softmax(logits, axis=-1)
        out = T.matmul(attn, v)                             # [Bw, h, T, d]
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bw, t, c))
        out = self.proj(out)
        if return_attn:
            return out, attn.data
        return out


class Mlp(Module):
    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class ConvBranch(Module):
    """High-frequency path: the channels split in half; one half runs
    1x1 -> GELU -> 3x3, the other max-pools then runs 1x1; the halves
    concatenate back. Depthwise mode uses per-channel 1x1 scales and a
    depthwise 3x3; full mode makes the 1x1 convs dense."""

    def __init__(self, rng, dim: int, mode: str):
        if dim % 2:
            raise ConfigError(f"conv branch needs an even dim, got {dim}")
        if mode not in HF_MODES:
            raise ConfigError(f"unknown conv mode {mode!r}")
        half = dim // 2
        pointwise_groups = half if mode == "depthwise" else 1
        self.conv1 = Conv2d(rng, half, half, 1, groups=pointwise_groups)
        self.conv3 = Conv2d(rng, half, half, 3, padding=1, groups=half)
        self.conv2 = Conv2d(rng, half, half, 1, groups=pointwise_groups)
        self.half = half

    def __call__(self, grid: Tensor) -> Tensor:
        x = T.transpose(grid, (0, 3, 1, 2))                 # [B, C, N, N]
        f1, f2 = T.split(x, (self.half, self.half), axis=1)
        a = self.conv3(T.gelu(self.conv1(f1)))
        b = self.conv2(T.maxpool2d(f2, 3, stride=1, padding=1))
        out = T.concat([a, b], axis=1)
        return T.transpose(out, (0, 2, 3, 1))


class HiLoBlock(Module):
    """One fused block: windowed attention + MLP on the low-frequency
    path, optional conv branch on the raw input, elementwise sum."""

    def __init__(self, rng, dim: int, num_heads: int, window: int, shift: int,
                 mlp_ratio: int, grid_size: int, hf_mode: str | None):
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(rng, dim, num_heads, window)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, dim * mlp_ratio)
        self.hf = ConvBranch(rng, dim, hf_mode) if hf_mode else None
        # a shifted window over a single-window grid has nothing to cross;
        # treat it as unshifted, as the plain scheme degenerates there
        self.shift = shift if grid_size > window else 0
        self.window = window
        self.grid_size = grid_size
        self._mask = (build_attention_mask(grid_size, window, self.shift)
                      if self.shift else None)

    def low_freq(self, grid: Tensor, return_attn: bool = False):
        b, n = grid.shape[0], grid.shape[1]
        x = self.norm1(grid)
        if self.shift:
            x = T.roll(x, (-self.shift, -self.shift), (1, 2))
        xw = window_partition(x, self.window)
        if return_attn:
            attn_out, attn = self.attn(xw, self._mask, return_attn=True)
        else:
            attn_out = self.attn(xw, self._mask)
            attn = None
        x = window_reverse(attn_out, self.window, b, n)
        if self.shift:
            x = T.roll(x, (self.shift, self.shift), (1, 2))
        x = T.add(grid, x)
        out = T.add(x, self.mlp(self.norm2(x)))
        return (out, attn) if return_attn else out

    def __call__(self, grid: Tensor) -> Tensor:
        low = self.low_freq(grid)
        if self.hf is None:
            return low
        return T.add(low, self.hf(grid))


class PatchMerging(Module):
    """Concatenate each 2x2 neighborhood, normalize, project 4C -> 2C."""

    def __init__(self, rng, dim: int):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(rng, 4 * dim, 2 * dim, bias=False)

    def __call__(self, grid: Tensor) -> Tensor:
        b, n, _, c = grid.shape
        if n % 2:
            raise ConfigError(f"patch merging needs an even grid, got {n}")
        x = T.reshape(grid, (b, n // 2, 2, n // 2, 2, c))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        x = T.reshape(x, (b, n // 2, n // 2, 4 * c))
        return self.reduction(self.norm(x))


class PatchEmbed(Module):
    """Non-overlapping patch projection (conv k = s = patch) plus LN."""

    def __init__(self, rng, patch_size: int, in_ch: int, dim: int):
        self.proj = Conv2d(rng, in_ch, dim, patch_size, stride=patch_size)
        self.norm = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.proj(x)                          # [B, C, N, N]
        x = T.transpose(x, (0, 2, 3, 1))          # [B, N, N, C]
        return self.norm(x)


class Stage(Module):
    def __init__(self, rng, cfg: ModelConfig, index: int):
        dim = cfg.stage_dim(index)
        grid = cfg.stage_grid(index)
        hf_mode = cfg.hf_conv_mode if cfg.hf_branch_enabled else None
        self.blocks = [
            HiLoBlock(rng, dim, cfg.num_heads[index], cfg.window_size,
                      shift=(cfg.window_size // 2) if j % 2 else 0,
                      mlp_ratio=cfg.mlp_ratio, grid_size=grid, hf_mode=hf_mode)
            for j in range(cfg.depths[index])
        ]
        self.downsample = (PatchMerging(rng, dim)
                           if index + 1 < cfg.num_stages else None)

    def __call__(self, grid: Tensor, trace: list | None = None) -> Tensor:
        for block in self.blocks:
            grid = block(grid)
        if trace is not None:
            trace.append(tuple(grid.shape[1:]))
        if self.downsample is not None:
            grid = self.downsample(grid)
        return grid


class HiLoNet(Module):
    """The full backbone plus a linear classification head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        rng = np.random.default_rng(seed)
        self.config = config
        self.patch_embed = PatchEmbed(rng, config.patch_size, 3, config.embed_dim)
        self.stages = [Stage(rng, config, i) for i in range(config.num_stages)]
        final_dim = config.stage_dim(config.num_stages - 1)
        self.norm = LayerNorm(final_dim)
        self.head = Linear(rng, final_dim, config.num_classes)

    def forward_features(self, x: Tensor, trace: list | None = None) -> Tensor:
        """Images [B, 3, H, W] -> normalized final-stage tokens [B, T, C].

        trace, when given, collects the (N, N, C) shape after each
        stage's blocks.
        """
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.config.img_size \
                or x.shape[3] != self.config.img_size:
            raise ShapeError(f"forward: input {x.shape} does not match "
                             f"[B, 3, {self.config.img_size}, {self.config.img_size}]")
        grid = self.patch_embed(x)
        for stage in self.stages:
            grid = stage(grid, trace)
        b, n, _, c = grid.shape
        tokens = T.reshape(grid, (b, n * n, c))
        return self.norm(tokens)

    def forward_cls(self, x: Tensor) -> Tensor:
        """Logits [B, num_classes] via global average pooling."""
        tokens = self.forward_features(x)
        return self.head(tokens.mean(axis=1))


def init_weights(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Freshly initialized weights for a config, keyed by parameter path."""
    return HiLoNet(config, seed=seed).state()


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under the logits."""
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: labels {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"cross_entropy: label outside [0, {k})")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    logp = T.log_softmax(logits, axis=-1)
    return T.scale(T.reduce_sum(T.mul(logp, Tensor(onehot))), -1.0 / b)
