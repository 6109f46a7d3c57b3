"""Frequency-guided masked-image pretraining.

For every image a seeded plan picks floor(P * ratio) of its non
overlapping patches, classifies each as high or low band from its DFT
energy ratio, and draws the pixels to hide inside each one. Applying a
plan band-filters the selected patches (high-band patches keep only
their high frequencies, low-band only their low), then writes the
learned fill value into the hidden pixels. A linear head regresses raw
pixels from the backbone tokens and an L1 loss counts only hidden
pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import freq
from . import tensor as T
from .datakit import Dataset, ImageRecord
from .errors import ConfigError, DataError
from .model import HiLoNet, Linear, ModelConfig, Module
from .optim import Adam
from .tensor import GradTape, Tensor


@dataclass
class MaskPlan:
    """Everything needed to corrupt one image reproducibly."""

    image_id: str
    mask_patch_size: int
    cutoff: float
    selected: frozenset[tuple[int, int]]
    class_per_patch: dict[tuple[int, int], freq.FreqClass]
    pixel_mask: np.ndarray  # [H, W] bool
    rng_seed: int


@dataclass
class MaskParams:
    mask_patch_size: int = 32
    patch_select_ratio: float = 0.5
    pixel_mask_ratio: float = 0.5
    cutoff: float = freq.DEFAULT_CUTOFF
    threshold: float = freq.DEFAULT_THRESHOLD

    def validate(self) -> None:
        if self.mask_patch_size < 1:
            raise ConfigError(f"mask_patch_size {self.mask_patch_size} must be >= 1")
        for name in ("patch_select_ratio", "pixel_mask_ratio"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} {v} outside (0, 1]")
        if not 0.0 < self.cutoff < 1.0:
            raise ConfigError(f"cutoff {self.cutoff} outside (0, 1)")
        if not 0.0 <= self.threshold < 1.0:
            raise ConfigError(f"threshold {self.threshold} outside [0, 1)")


def plan_mask(height: int, width: int, image: np.ndarray, params: MaskParams,
              seed: int, image_id: str = "") -> MaskPlan:
    """Draw the patch selection, band classes, and hidden pixels.

    The image is consumed at raw intensities, before any normalization.
    """
    params.validate()
    s = params.mask_patch_size
    if height % s or width % s:
        raise ConfigError(f"image extents {height}x{width} not divisible by "
                          f"mask_patch_size {s}")
    image = np.asarray(image)
    if image.shape != (3, height, width):
        raise DataError(f"{image_id or 'image'}: pixels shaped {image.shape}, "
                        f"expected (3, {height}, {width})")
    rows, cols = height // s, width // s
    total = rows * cols
    pick = int(total * params.patch_select_ratio)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=pick, replace=False) if pick else np.empty(0, np.int64)
    selected = frozenset((int(i) // cols, int(i) % cols) for i in chosen)

    classes: dict[tuple[int, int], freq.FreqClass] = {}
    pixel_mask = np.zeros((height, width), dtype=bool)
    per_patch = int(s * s * params.pixel_mask_ratio)
    for r, c in sorted(selected):
        patch = image[:, r * s:(r + 1) * s, c * s:(c + 1) * s].mean(axis=0)
        classes[(r, c)] = freq.classify_patch(patch, params.cutoff, params.threshold)
        flat = rng.choice(s * s, size=per_patch, replace=False)
        local = np.zeros(s * s, dtype=bool)
        local[flat] = True
        pixel_mask[r * s:(r + 1) * s, c * s:(c + 1) * s] = local.reshape(s, s)
    return MaskPlan(image_id, s, params.cutoff, selected, classes, pixel_mask, seed)


def corrupt_pixels(image: np.ndarray, plan: MaskPlan,
                   filter_bands: bool = True) -> np.ndarray:
    """Band-filter the selected patches and zero the hidden pixels.

    Unselected patches pass through bit-exactly.
    """
    out = np.array(image, dtype=np.float64, copy=True)
    s = plan.mask_patch_size
    if filter_bands:
        for r, c in sorted(plan.selected):
            band = plan.class_per_patch[(r, c)].band
            for ch in range(3):
                sl = (ch, slice(r * s, (r + 1) * s), slice(c * s, (c + 1) * s))
                out[sl] = freq.ideal_filter(out[sl], plan.cutoff, band)
    out[:, plan.pixel_mask] = 0.0
    return out


def apply_mask(image, plan: MaskPlan, mask_fill=0.0,
               filter_bands: bool = True) -> Tensor:
    """Corrupt one image; a Tensor mask_fill keeps the fill trainable."""
    pixels = image.data if isinstance(image, Tensor) else np.asarray(image)
    base = corrupt_pixels(pixels, plan, filter_bands)
    h, w = base.shape[1:]
    mask3 = np.broadcast_to(plan.pixel_mask, (3, h, w)).astype(np.float64)
    if isinstance(mask_fill, Tensor):
        fill = T.broadcast_to(T.reshape(mask_fill, (3, 1, 1)), (3, h, w))
        return T.add(Tensor(base), T.mul(fill, Tensor(mask3)))
    return Tensor(base + float(mask_fill) * mask3)


@dataclass
class PretrainBatch:
    corrupted: Tensor          # [B, 3, H, W], filtered and fill-masked
    target: Tensor             # [B, 3, H, W], original pixels
    mask: Tensor               # [B, 1, H, W], 1 where pixels were hidden
    plans: list[MaskPlan] = field(default_factory=list)


def build_pretrain_batch(records: list[ImageRecord], params: MaskParams,
                         seeds, mask_fill=0.0, filter_bands: bool = True) -> PretrainBatch:
    corrupted, targets, masks, plans = [], [], [], []
    for rec, seed in zip(records, seeds):
        plan = plan_mask(rec.height, rec.width, rec.pixels, params,
                         seed=int(seed), image_id=rec.path)
        img = apply_mask(rec.pixels, plan, mask_fill, filter_bands)
        corrupted.append(T.reshape(img, (1, *img.shape)))
        targets.append(rec.pixels)
        masks.append(plan.pixel_mask[None, :, :])
        plans.append(plan)
    return PretrainBatch(
        corrupted=T.concat(corrupted, axis=0),
        target=Tensor(np.stack(targets)),
        mask=Tensor(np.stack(masks).astype(np.float64)),
        plans=plans,
    )


class ReconstructionHead(Module):
    """One linear map from each final token to its pixel footprint."""

    def __init__(self, rng, dim: int, footprint: int, channels: int = 3):
        self.proj = Linear(rng, dim, channels * footprint * footprint)
        self.footprint = footprint
        self.channels = channels

    def __call__(self, tokens: Tensor) -> Tensor:
        b, t, _ = tokens.shape
        g = int(round(t ** 0.5))
        if g * g != t:
            raise ConfigError(f"reconstruction head needs a square token grid, got {t}")
        f, ch = self.footprint, self.channels
        x = self.proj(tokens)                                # [B, T, ch*f*f]
        x = T.reshape(x, (b, g, g, ch, f, f))
        x = T.transpose(x, (0, 3, 1, 4, 2, 5))               # [B, ch, g, f, g, f]
        return T.reshape(x, (b, ch, g * f, g * f))


def l1_masked_loss(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """sum(|pred - target| * mask) / max(masked pixels * channels, 1)."""
    channels = pred.shape[1]
    denom = max(float(mask.data.sum()) * channels, 1.0)
    mask_full = T.broadcast_to(mask, pred.shape)
    total = T.reduce_sum(T.mul(T.absolute(T.sub(pred, target)), mask_full))
    return T.scale(total, 1.0 / denom)


class PretrainModel(Module):
    """Backbone + reconstruction head + the learned per-channel fill."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.backbone = HiLoNet(config, seed=seed)
        head_rng = np.random.default_rng([seed, 1])
        final_dim = config.stage_dim(config.num_stages - 1)
        footprint = config.patch_size * (2 ** (config.num_stages - 1))
        self.recon = ReconstructionHead(head_rng, final_dim, footprint)
        self.mask_fill = Tensor(np.zeros(3), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.recon(self.backbone.forward_features(x))


@dataclass
class PretrainConfig:
    epochs: int = 1
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    max_steps: int | None = None
    norm_mean: float = 0.5
    norm_std: float = 0.5
    filter_bands: bool = True
    mask: MaskParams = field(default_factory=MaskParams)


def normalize(x: Tensor, mean: float, std: float) -> Tensor:
    return T.scale(T.add_scalar(x, -mean), 1.0 / std)


def pretrain_loop(model: PretrainModel, dataset: Dataset,
                  cfg: PretrainConfig) -> list[tuple[int, float]]:
    """Adam over the masked L1 objective; returns the (step, loss) trace.

    Batch order, mask plans, and updates are all driven by cfg.seed, so
    a repeated run reproduces the trace and the weights exactly.
    """
    cfg.mask.validate()
    img = model.backbone.config.img_size
    if img % cfg.mask.mask_patch_size:
        raise ConfigError(f"img_size {img} not divisible by mask_patch_size "
                          f"{cfg.mask.mask_patch_size}")
    for rec in dataset:
        if rec.pixels.shape != (3, img, img):
            raise DataError(f"{rec.path}: extents {rec.pixels.shape[1:]} do not match "
                            f"the configured img_size {img}")
    if not len(dataset):
        raise DataError("pretraining dataset is empty")

    params = dict(model.named_parameters())
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    trace: list[tuple[int, float]] = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for lo in range(0, len(order), cfg.batch_size):
            records = [dataset.records[i] for i in order[lo:lo + cfg.batch_size]]
            seeds = rng.integers(0, 2**31, size=len(records))
            opt.zero_grad()
            with GradTape() as tape:
                batch = build_pretrain_batch(records, cfg.mask, seeds,
                                             mask_fill=model.mask_fill,
                                             filter_bands=cfg.filter_bands)
                net_in = normalize(batch.corrupted, cfg.norm_mean, cfg.norm_std)
                pred = model(net_in)
                loss = l1_masked_loss(pred, batch.target, batch.mask)
            tape.backward(loss)
            opt.step()
            trace.append((step, float(loss.data)))
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return trace
    return trace


def write_loss_csv(trace: list[tuple[int, float]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,loss\n")
        for step, loss in trace:
            f.write(f"{step},{loss:.8f}\n")
