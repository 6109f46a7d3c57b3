"""Closed-form parameter and FLOP accounting, layer by layer.

Counts follow the MAC convention: one multiply-accumulate is one FLOP,
so a conv costs Cout * Cin/groups * kh * kw * H' * W' and a linear
costs in * out * tokens. Normalizations, activations, softmax, pooling
and elementwise additions count zero; the convention string below rides
along in every report so numbers are comparable.

Row paths mirror the instantiated model's parameter paths, which lets
verify_against_model charge every weight tensor to exactly one row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import HiLoNet, ModelConfig

CONVENTION = ("1 MAC = 1 FLOP; matmul/conv/linear MACs only; layer norm, "
              "softmax, activations, pooling, biases and elementwise adds count 0")


@dataclass
class CostRow:
    layer: str
    params: int
    flops: int


@dataclass
class CostReport:
    rows: list[CostRow]
    counting_convention: str
    img_size: int
    hf_overhead: dict | None = None

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "convention": self.counting_convention,
            "img_size": self.img_size,
            "rows": [{"layer": r.layer, "params": r.params, "flops": r.flops}
                     for r in self.rows],
            "totals": {"params": self.total_params, "flops": self.total_flops},
            "hf_overhead": self.hf_overhead,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        width = max(len(r.layer) for r in self.rows) + 2
        lines = [f"{'layer':<{width}}{'params':>14}{'flops':>16}"]
        lines.append("-" * (width + 30))
        for r in self.rows:
            lines.append(f"{r.layer:<{width}}{r.params:>14,}{r.flops:>16,}")
        lines.append("-" * (width + 30))
        lines.append(f"{'total':<{width}}{self.total_params:>14,}{self.total_flops:>16,}")
        lines.append(f"totals: {self.total_params / 1e6:.3f}M params, "
                     f"{self.total_flops / 1e9:.3f}G flops at img_size {self.img_size}")
        lines.append(f"convention: {self.counting_convention}")
        if self.hf_overhead is not None:
            o = self.hf_overhead
            lines.append(f"conv-branch overhead: +{o['params']:,} params, "
                         f"+{o['flops']:,} flops ({o['mode']} mode)")
            lines.append(o["note"])
        return "\n".join(lines)


def _conv_cost(cin: int, cout: int, k: int, groups: int, out_hw: int,
               bias: bool = True) -> tuple[int, int]:
    params = cout * (cin // groups) * k * k + (cout if bias else 0)
    flops = cout * (cin // groups) * k * k * out_hw
    return params, flops


def _linear_cost(fin: int, fout: int, tokens: int, bias: bool = True) -> tuple[int, int]:
    return fin * fout + (fout if bias else 0), fin * fout * tokens


def analyze(config: ModelConfig, img_size: int | None = None,
            with_overhead: bool = True) -> CostReport:
    """Exact closed-form cost rows for a config at one input size."""
    config.validate()
    img = config.img_size if img_size is None else img_size
    config.validate_img_size(img)

    rows: list[CostRow] = []

    def row(layer: str, params: int, flops: int) -> None:
        rows.append(CostRow(layer, int(params), int(flops)))

    c0 = config.embed_dim
    n0 = img // config.patch_size
    p, f = _conv_cost(3, c0, config.patch_size, 1, n0 * n0)
    row("patch_embed.proj", p, f)
    row("patch_embed.norm", 2 * c0, 0)

    w = config.window_size
    for i in range(config.num_stages):
        c = config.stage_dim(i)
        n = config.stage_grid(i, img)
        heads = config.num_heads[i]
        tokens = n * n
        tw = w * w
        n_windows = (n // w) ** 2
        hidden = c * config.mlp_ratio
        for j in range(config.depths[i]):
            base = f"stages.{i}.blocks.{j}"
            row(f"{base}.norm1", 2 * c, 0)
            p, f = _linear_cost(c, 3 * c, tokens)
            row(f"{base}.attn.qkv", p, f)
            row(f"{base}.attn.bias_table", (2 * w - 1) ** 2 * heads, 0)
            # q @ k^T and attn @ v: two T_w x T_w x head_dim products
            # per window per head = 2 * nW * T_w^2 * C MACs
            row(f"{base}.attn.attend", 0, 2 * n_windows * tw * tw * c)
            p, f = _linear_cost(c, c, tokens)
            row(f"{base}.attn.proj", p, f)
            row(f"{base}.norm2", 2 * c, 0)
            p, f = _linear_cost(c, hidden, tokens)
            row(f"{base}.mlp.fc1", p, f)
            p, f = _linear_cost(hidden, c, tokens)
            row(f"{base}.mlp.fc2", p, f)
            if config.hf_branch_enabled:
                half = c // 2
                pw_groups = half if config.hf_conv_mode == "depthwise" else 1
                p, f = _conv_cost(half, half, 1, pw_groups, tokens)
                row(f"{base}.hf.conv1", p, f)
                p, f = _conv_cost(half, half, 3, half, tokens)
                row(f"{base}.hf.conv3", p, f)
                p, f = _conv_cost(half, half, 1, pw_groups, tokens)
                row(f"{base}.hf.conv2", p, f)
        if i + 1 < config.num_stages:
            merged_tokens = (n // 2) ** 2
            row(f"stages.{i}.downsample.norm", 2 * 4 * c, 0)
            p, f = _linear_cost(4 * c, 2 * c, merged_tokens, bias=False)
            row(f"stages.{i}.downsample.reduction", p, f)

    c_final = config.stage_dim(config.num_stages - 1)
    row("norm", 2 * c_final, 0)
    p, f = _linear_cost(c_final, config.num_classes, 1)
    row("head", p, f)

    overhead = (hf_overhead(config, img)
                if config.hf_branch_enabled and with_overhead else None)
    return CostReport(rows, CONVENTION, img, overhead)


def count_params(config: ModelConfig) -> CostReport:
    return analyze(config, config.img_size)


def count_flops(config: ModelConfig, img_size: int) -> CostReport:
    return analyze(config, img_size)


def _with_hf(config: ModelConfig, enabled: bool, mode: str | None = None) -> ModelConfig:
    d = json.loads(config.to_json())
    d["hf_branch_enabled"] = enabled
    if mode is not None:
        d["hf_conv_mode"] = mode
    return ModelConfig.from_dict(d)


def hf_overhead(config: ModelConfig, img_size: int | None = None) -> dict:
    """Cost delta of the conv branch over the attention-only baseline."""
    img = config.img_size if img_size is None else img_size
    base = analyze(_with_hf(config, False), img)
    deltas = {}
    for mode in ("depthwise", "full"):
        on = analyze(_with_hf(config, True, mode), img, with_overhead=False)
        deltas[mode] = (on.total_params - base.total_params,
                        on.total_flops - base.total_flops)
    mode = config.hf_conv_mode
    note = ("note: the +0.006M parameter figure sometimes quoted for this "
            "fusion block is not reproduced by any supported conv mode "
            f"(measured: depthwise +{deltas['depthwise'][0]:,}, "
            f"full +{deltas['full'][0]:,} parameters)")
    return {
        "mode": mode,
        "params": deltas[mode][0],
        "flops": deltas[mode][1],
        "note": note,
    }


@dataclass
class VerifyResult:
    ok: bool
    mismatches: list[str] = field(default_factory=list)
    counted_params: int = 0
    model_params: int = 0


def diff_against_sizes(report: CostReport, named_sizes: dict[str, int]) -> VerifyResult:
    """Charge each weight tensor to its longest-prefix row and compare
    the per-row element totals against the closed-form counts."""
    per_row: dict[str, int] = {r.layer: 0 for r in report.rows}
    mismatches: list[str] = []
    layers = sorted(per_row, key=len, reverse=True)
    for name, size in named_sizes.items():
        target = next((l for l in layers if name == l or name.startswith(l + ".")), None)
        if target is None:
            mismatches.append(f"no report row covers parameter {name} ({size} elements)")
        else:
            per_row[target] += size
    for r in report.rows:
        if per_row[r.layer] != r.params:
            mismatches.append(f"{r.layer}: counted {r.params}, model has {per_row[r.layer]}")
    return VerifyResult(not mismatches, mismatches,
                        report.total_params, sum(named_sizes.values()))


def verify_against_model(config: ModelConfig, img_size: int | None = None,
                         seed: int = 0) -> VerifyResult:
    """Instantiate the model and reconcile it with the closed-form rows.

    Disagreement is reported, not raised, so callers can print the diff.
    """
    report = analyze(config, img_size)
    model = HiLoNet(config, seed=seed)
    sizes = {name: p.size for name, p in model.named_parameters()}
    return diff_against_sizes(report, sizes)
