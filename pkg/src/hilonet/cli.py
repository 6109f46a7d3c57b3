"""Command-line front end.

One executable, verb subcommands. Every run resolves its configuration
from defaults, then an optional JSON config file, then flags (flags
win), echoes the result to stdout, and writes it to run.json beside any
outputs. Exit codes: 0 success, 2 usage or configuration, 3 data,
4 broken internal invariant.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import traceback

import numpy as np

from . import analyzer, datakit, freq, freqmim, gradcheck
from .errors import ConfigError, DataError, ShapeMismatchError
from .model import HF_MODES, HiLoNet, ModelConfig, cross_entropy
from .optim import Adam
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")


def _read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--img-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--depths", type=_int_list, help="e.g. 2,2,6,2")
    p.add_argument("--num-heads", type=_int_list, help="e.g. 3,6,12,24")
    p.add_argument("--window-size", type=int)
    p.add_argument("--mlp-ratio", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--hf", dest="hf_branch_enabled", action=argparse.BooleanOptionalAction,
                   default=None, help="enable/disable the conv branch")
    p.add_argument("--hf-mode", dest="hf_conv_mode", choices=HF_MODES)


_MODEL_FIELDS = [f.name for f in dataclasses.fields(ModelConfig)]


def _resolve_model_config(args, file_cfg: dict, **forced) -> ModelConfig:
    merged = dataclasses.asdict(ModelConfig())
    file_model = file_cfg.get("model", {})
    if not isinstance(file_model, dict):
        raise ConfigError("config file field 'model' must be an object")
    unknown = set(file_model) - set(_MODEL_FIELDS)
    if unknown:
        raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
    merged.update(file_model)
    for name in _MODEL_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    merged.update(forced)
    return ModelConfig.from_dict(merged)


def _resolve_scalars(args, file_cfg: dict, defaults: dict) -> dict:
    out = dict(defaults)
    for key in defaults:
        if key in file_cfg:
            out[key] = file_cfg[key]
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def _echo_run_config(resolved: dict, out_dir: str | None) -> None:
    text = json.dumps(resolved, indent=2, sort_keys=True)
    print("resolved config:")
    print(text)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as f:
            f.write(text + "\n")


# ---------------------------------------------------------------------------
# pretrain


_PRETRAIN_DEFAULTS = dict(epochs=1, batch_size=8, lr=1e-3, seed=0, max_steps=None,
                          mask_patch_size=32, patch_select_ratio=0.5,
                          pixel_mask_ratio=0.5, cutoff=0.25, threshold=0.5,
                          filter_bands=True, norm_mean=0.5, norm_std=0.5)


def _pretrain_config(scalars: dict) -> freqmim.PretrainConfig:
    mask = freqmim.MaskParams(
        mask_patch_size=int(scalars["mask_patch_size"]),
        patch_select_ratio=float(scalars["patch_select_ratio"]),
        pixel_mask_ratio=float(scalars["pixel_mask_ratio"]),
        cutoff=float(scalars["cutoff"]),
        threshold=float(scalars["threshold"]),
    )
    return freqmim.PretrainConfig(
        epochs=int(scalars["epochs"]), batch_size=int(scalars["batch_size"]),
        lr=float(scalars["lr"]), seed=int(scalars["seed"]),
        max_steps=None if scalars["max_steps"] is None else int(scalars["max_steps"]),
        norm_mean=float(scalars["norm_mean"]), norm_std=float(scalars["norm_std"]),
        filter_bands=bool(scalars["filter_bands"]), mask=mask,
    )


def cmd_pretrain(args) -> int:
    file_cfg = _read_config_file(args.config)
    model_cfg = _resolve_model_config(args, file_cfg)
    scalars = _resolve_scalars(args, file_cfg, _PRETRAIN_DEFAULTS)
    resolved = {"command": "pretrain", "data": args.data, "out": args.out,
                "model": dataclasses.asdict(model_cfg), **scalars}
    _echo_run_config(resolved, args.out)
    cfg = _pretrain_config(scalars)

    dataset = datakit.load_image_dir(args.data)
    model = freqmim.PretrainModel(model_cfg, seed=cfg.seed)
    trace = freqmim.pretrain_loop(model, dataset, cfg)

    ckpt_path = os.path.join(args.out, "pretrain.ckpt")
    blob = {"kind": "pretrain", "model": dataclasses.asdict(model_cfg),
            **{k: scalars[k] for k in sorted(scalars)}}
    datakit.save_checkpoint(ckpt_path, model.state(), blob)
    freqmim.write_loss_csv(trace, os.path.join(args.out, "loss.csv"))
    first, last = trace[0][1], trace[-1][1]
    print(f"pretrained {len(trace)} steps: loss {first:.4f} -> {last:.4f}")
    print(f"wrote {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# classifier fine-tuning


_TRAIN_CLS_DEFAULTS = dict(epochs=20, batch_size=8, lr=1e-3, seed=0, val_split=0.2,
                           norm_mean=0.5, norm_std=0.5)


@dataclasses.dataclass
class TrainClsConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    val_split: float = 0.2
    norm_mean: float = 0.5
    norm_std: float = 0.5


def load_backbone_weights(model: HiLoNet, ckpt_weights: dict) -> None:
    """Initialize the backbone from a pretraining checkpoint.

    The reconstruction head and mask fill are dropped and the classifier
    head keeps its fresh initialization; everything else must match.
    """
    wanted = {name: p for name, p in model.named_parameters()
              if not name.startswith("head.")}
    provided = {name.removeprefix("backbone."): w for name, w in ckpt_weights.items()
                if name.startswith("backbone.") and not
                name.removeprefix("backbone.").startswith("head.")}
    problems = []
    for name in sorted(set(wanted) | set(provided)):
        if name not in provided:
            problems.append(f"missing from checkpoint: {name} {wanted[name].shape}")
        elif name not in wanted:
            problems.append(f"unexpected in checkpoint: {name} {tuple(provided[name].shape)}")
        elif tuple(provided[name].shape) != wanted[name].shape:
            problems.append(f"shape mismatch: {name} checkpoint {tuple(provided[name].shape)} "
                            f"vs model {wanted[name].shape}")
    if problems:
        raise ShapeMismatchError(
            f"{len(problems)} backbone entries do not fit the model", problems)
    for name, p in wanted.items():
        p.data = provided[name].astype(p.data.dtype).reshape(p.data.shape)


def _accuracy(model: HiLoNet, records, cfg: TrainClsConfig) -> float:
    correct = 0
    for lo in range(0, len(records), cfg.batch_size):
        chunk = records[lo:lo + cfg.batch_size]
        x = Tensor((datakit.stack_pixels(chunk) - cfg.norm_mean) / cfg.norm_std)
        logits = model.forward_cls(x)
        pred = logits.data.argmax(axis=1)
        correct += int((pred == np.array([r.label for r in chunk])).sum())
    return correct / len(records)


def train_classifier(model: HiLoNet, dataset: datakit.Dataset,
                     cfg: TrainClsConfig, quiet: bool = False) -> list[dict]:
    """Cross-entropy fine-tuning; returns the per-epoch accuracy log."""
    for rec in dataset:
        if rec.label is None:
            raise DataError(f"{rec.path}: record has no class label")
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    perm = rng.permutation(n)
    n_val = int(round(n * cfg.val_split))
    val_records = [dataset.records[i] for i in perm[:n_val]]
    train_records = [dataset.records[i] for i in perm[n_val:]]
    if not train_records:
        raise DataError("no training records left after the validation split")
    if not val_records:
        val_records = train_records

    params = dict(model.named_parameters())
    opt = Adam(params, lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_records))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [train_records[i] for i in order[lo:lo + cfg.batch_size]]
            x = Tensor((datakit.stack_pixels(chunk) - cfg.norm_mean) / cfg.norm_std)
            labels = np.array([r.label for r in chunk])
            opt.zero_grad()
            with GradTape() as tape:
                loss = cross_entropy(model.forward_cls(x), labels)
            tape.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        entry = {"epoch": epoch, "loss": float(np.mean(losses)),
                 "train_acc": _accuracy(model, train_records, cfg),
                 "val_acc": _accuracy(model, val_records, cfg)}
        history.append(entry)
        if not quiet:
            print(f"epoch {epoch}: loss {entry['loss']:.4f} "
                  f"train_acc {entry['train_acc']:.3f} val_acc {entry['val_acc']:.3f}")
    return history


def cmd_train_cls(args) -> int:
    file_cfg = _read_config_file(args.config)
    dataset = datakit.load_image_dir(args.data)
    if dataset.class_names is None:
        raise ConfigError(f"{args.data}: expected one subdirectory per class")

    forced = {}
    explicit_classes = (getattr(args, "num_classes", None) is not None
                        or "num_classes" in file_cfg.get("model", {}))
    if not explicit_classes:
        forced["num_classes"] = len(dataset.class_names)
    model_cfg = _resolve_model_config(args, file_cfg, **forced)
    if model_cfg.num_classes != len(dataset.class_names):
        raise ConfigError(f"config expects {model_cfg.num_classes} classes but "
                          f"{args.data} has {len(dataset.class_names)}: "
                          f"{dataset.class_names}")
    scalars = _resolve_scalars(args, file_cfg, _TRAIN_CLS_DEFAULTS)
    resolved = {"command": "train-cls", "data": args.data, "out": args.out,
                "init": args.init, "model": dataclasses.asdict(model_cfg), **scalars}
    _echo_run_config(resolved, args.out)
    cfg = TrainClsConfig(epochs=int(scalars["epochs"]), batch_size=int(scalars["batch_size"]),
                         lr=float(scalars["lr"]), seed=int(scalars["seed"]),
                         val_split=float(scalars["val_split"]),
                         norm_mean=float(scalars["norm_mean"]), norm_std=float(scalars["norm_std"]))

    model = HiLoNet(model_cfg, seed=cfg.seed)
    if args.init:
        weights, _ = datakit.load_checkpoint(args.init)
        load_backbone_weights(model, weights)
        print(f"initialized backbone from {args.init}")
    history = train_classifier(model, dataset, cfg)

    ckpt_path = os.path.join(args.out, "classifier.ckpt")
    blob = {"kind": "classifier", "model": dataclasses.asdict(model_cfg),
            "class_names": dataset.class_names, **{k: scalars[k] for k in sorted(scalars)}}
    datakit.save_checkpoint(ckpt_path, model.state(), blob)
    with open(os.path.join(args.out, "train_log.csv"), "w", encoding="utf-8") as f:
        f.write("epoch,loss,train_acc,val_acc\n")
        for e in history:
            f.write(f"{e['epoch']},{e['loss']:.6f},{e['train_acc']:.6f},{e['val_acc']:.6f}\n")
    print(f"final train_acc {history[-1]['train_acc']:.3f} "
          f"val_acc {history[-1]['val_acc']:.3f}")
    print(f"wrote {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# mask dump


def cmd_mask_dump(args) -> int:
    params = freqmim.MaskParams(mask_patch_size=args.patch,
                                patch_select_ratio=args.select_ratio,
                                pixel_mask_ratio=args.pixel_ratio,
                                cutoff=args.cutoff, threshold=args.threshold)
    resolved = {"command": "mask-dump", "image": args.image, "out": args.out,
                "seed": args.seed, **dataclasses.asdict(params)}
    _echo_run_config(resolved, args.out)

    pixels = datakit.load_image(args.image)
    h, w = pixels.shape[1:]
    plan = freqmim.plan_mask(h, w, pixels, params, seed=args.seed, image_id=args.image)
    corrupted = freqmim.apply_mask(pixels, plan, mask_fill=0.0).data

    datakit.save_image(np.clip(corrupted, 0.0, 1.0), os.path.join(args.out, "corrupted.png"))
    datakit.save_gray_png(plan.pixel_mask.astype(float), os.path.join(args.out, "pixel_mask.png"))

    gray = pixels.mean(axis=0)
    datakit.save_gray_png(freq.log_magnitude(freq.dft2(gray)),
                          os.path.join(args.out, "spectrum_full.png"))
    s = plan.mask_patch_size
    montage = np.zeros((h, w))
    for r in range(h // s):
        for c in range(w // s):
            spec = freq.log_magnitude(freq.dft2(gray[r * s:(r + 1) * s, c * s:(c + 1) * s]))
            span = spec.max() - spec.min()
            montage[r * s:(r + 1) * s, c * s:(c + 1) * s] = \
                (spec - spec.min()) / span if span > 0 else 0.0
    datakit.save_gray_png(montage, os.path.join(args.out, "patch_spectra.png"))

    patches = [{"row": r, "col": c,
                "band": plan.class_per_patch[(r, c)].band.value,
                "ratio": plan.class_per_patch[(r, c)].ratio}
               for r, c in sorted(plan.selected)]
    plan_doc = {"image": args.image, "mask_patch_size": s, "rng_seed": plan.rng_seed,
                "cutoff": plan.cutoff, "threshold": params.threshold,
                "grid": [h // s, w // s], "selected_count": len(plan.selected),
                "masked_pixels": int(plan.pixel_mask.sum()), "patches": patches}
    with open(os.path.join(args.out, "plan.json"), "w", encoding="utf-8") as f:
        json.dump(plan_doc, f, indent=2)
    print(f"selected {len(plan.selected)} of {(h // s) * (w // s)} patches; "
          f"wrote corrupted.png, pixel_mask.png, plan.json, spectra to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    file_cfg = _read_config_file(args.config)
    forced = {"hf_branch_enabled": False} if args.baseline else {}
    model_cfg = _resolve_model_config(args, file_cfg, **forced)
    img = args.img_size or model_cfg.img_size
    resolved = {"command": "analyze", "baseline": bool(args.baseline),
                "img_size": img, "out": args.out,
                "model": dataclasses.asdict(model_cfg)}
    _echo_run_config(resolved, args.out)

    report = analyzer.analyze(model_cfg, img)
    print(report.to_text())
    if args.verify:
        result = analyzer.verify_against_model(model_cfg, img)
        if result.ok:
            print(f"verified against instantiated model: "
                  f"{result.model_params:,} parameters match")
        else:
            print("MISMATCH against instantiated model:")
            for line in result.mismatches:
                print(f"  {line}")
            return 4
    if args.out:
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as f:
            f.write(report.to_json() + "\n")
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as f:
            f.write(report.to_text() + "\n")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    resolved = {"command": "gradcheck", "seed": args.seed, "e2e": not args.skip_e2e}
    _echo_run_config(resolved, None)
    failures = 0
    print(f"{'op':<16}{'dtype':<10}{'max rel err':>14}  status")
    for dtype in (np.float32, np.float64):
        for res in gradcheck.run_op_suite(dtype, seed=args.seed):
            status = "PASS" if res.ok else f"FAIL ({res.worst})"
            print(f"{res.name:<16}{res.dtype:<10}{res.max_rel_err:>14.3e}  {status}")
            failures += 0 if res.ok else 1
    if not args.skip_e2e:
        res = gradcheck.run_model_check(seed=args.seed)
        status = "PASS" if res.ok else f"FAIL ({res.worst})"
        print(f"{res.name:<16}{res.dtype:<10}{res.max_rel_err:>14.3e}  {status}")
        failures += 0 if res.ok else 1
    if failures:
        print(f"{failures} gradient checks FAILED")
        return 4
    print("all gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hilonet",
        description="frequency-fused window-attention backbone tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="masked-image pretraining")
    _add_model_flags(p)
    p.add_argument("--data", required=True, help="image directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--mask-patch", dest="mask_patch_size", type=int)
    p.add_argument("--select-ratio", dest="patch_select_ratio", type=float)
    p.add_argument("--pixel-ratio", dest="pixel_mask_ratio", type=float)
    p.add_argument("--cutoff", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--filter-bands", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--norm-mean", dest="norm_mean", type=float)
    p.add_argument("--norm-std", dest="norm_std", type=float)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-cls", help="classifier fine-tuning")
    _add_model_flags(p)
    p.add_argument("--data", required=True, help="directory with one subfolder per class")
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="pretraining checkpoint to initialize the backbone")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-split", dest="val_split", type=float)
    p.add_argument("--norm-mean", dest="norm_mean", type=float)
    p.add_argument("--norm-std", dest="norm_std", type=float)
    p.set_defaults(func=cmd_train_cls)

    p = sub.add_parser("mask-dump", help="corrupt one image and dump the plan")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--select-ratio", dest="select_ratio", type=float, default=0.5)
    p.add_argument("--pixel-ratio", dest="pixel_ratio", type=float, default=0.5)
    p.add_argument("--cutoff", type=float, default=freq.DEFAULT_CUTOFF)
    p.add_argument("--threshold", type=float, default=freq.DEFAULT_THRESHOLD)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mask_dump)

    p = sub.add_parser("analyze", help="closed-form parameter/FLOP report")
    _add_model_flags(p)
    p.add_argument("--baseline", action="store_true",
                   help="report the attention-only baseline (conv branch off)")
    p.add_argument("--verify", action="store_true",
                   help="also reconcile against an instantiated model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-e2e", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ShapeMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for line in exc.mismatches:
            print(f"  {line}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception:
        traceback.print_exc()
        return 4


if __name__ == "__main__":
    sys.exit(main())
