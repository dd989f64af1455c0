"""Command-line surface: fixture -> prepare -> pretrain -> train/sweep ->
eval -> report.

Exit codes: 0 success, 1 runtime failure, 2 bad flags (argparse), 3 input
validation failure. Failures print a single machine-parsable JSON line to
stderr. Every command writes exactly one run_manifest.json into its output
directory and refuses to reuse a directory without --force.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .alignment import AdapterConfig
from .archive import ArchiveError
from .backbone import (
    BackboneConfig,
    CheckpointError,
    build_backbone,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    DEFAULT_MIN_AREA,
    ManifestError,
    load_dataset,
    prepare_dataset,
    resize_for_model,
)
from .evaluation import EvalReport, evaluate, report
from .fixture import pretrain_backbone, write_fixture
from .model import (
    build_model,
    build_scratch_model,
    load_model_checkpoint,
    save_model_checkpoint,
)
from .peft import BudgetError, PeftConfig, budget_balance
from .train import TrainConfig, sweep_lr, train

VALIDATION_ERRORS = (
    ManifestError,
    CheckpointError,
    ArchiveError,
    BudgetError,
    FileNotFoundError,
    ValueError,
)


class OutputDirError(ValueError):
    pass


def default_out_root() -> Path:
    return Path(os.environ.get("SIMCMF_OUT", "runs"))


def resolve_input(path_str: str) -> Path:
    """Resolve an input path, falling back to the SIMCMF_CACHE directory."""
    path = Path(path_str)
    if path.exists():
        return path
    cache = os.environ.get("SIMCMF_CACHE")
    if cache:
        candidate = Path(cache) / path_str
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"input not found: {path_str}")


def claim_out_dir(out, command: str, force: bool) -> Path:
    out_dir = Path(out) if out else default_out_root() / command
    marker = out_dir / "run_manifest.json"
    if marker.exists() and not force:
        raise OutputDirError(
            f"output directory {out_dir} already holds a run (use --force to overwrite)"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                       config: dict, started: str) -> None:
    manifest = {
        "command": command,
        "argv": {k: v for k, v in vars(args).items() if k != "func"},
        "config": config,
        "seed": config.get("seed"),
        "code_version": __version__,
        "started_at": started,
        "finished_at": _now(),
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n"
    )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# train/sweep configuration


def load_train_config(args) -> dict:
    config = json.loads(resolve_input(args.config).read_text())
    config.setdefault("mode", "simcmf")
    config.setdefault("variant", "toy")
    config.setdefault("adapter", {})
    config.setdefault("peft", {"strategy": "lora"})
    config.setdefault("train", {})
    # flag overrides
    if getattr(args, "mode", None):
        config["mode"] = args.mode
    if getattr(args, "manifest", None):
        config["manifest"] = args.manifest
    if getattr(args, "checkpoint", None):
        config["checkpoint"] = args.checkpoint
    if getattr(args, "variant", None):
        config["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        config.setdefault("train", {})["seed"] = args.seed
    if "manifest" not in config:
        raise ValueError("train config needs a 'manifest' (file flag --manifest or config key)")
    config["seed"] = config["train"].get("seed", TrainConfig().seed)
    return config


def build_from_config(config: dict):
    """Construct (model, records, train_config) from a resolved train config."""
    import torch

    manifest = resolve_input(config["manifest"])
    records = load_dataset(manifest)
    if not records:
        raise ManifestError(f"manifest {manifest} holds no records")
    channels = {r.channels for r in records}
    if len(channels) != 1:
        raise ManifestError(f"records disagree on channel count: {sorted(channels)}")
    train_cfg = TrainConfig(**config["train"])
    torch.manual_seed(train_cfg.seed)
    adapter_cfg = AdapterConfig(in_channels=channels.pop(), **config["adapter"])

    if config["mode"] == "scratch":
        backbone_cfg = BackboneConfig.for_variant(config["variant"])
        model = build_scratch_model(adapter_cfg, backbone_cfg, seed=train_cfg.seed)
    elif config["mode"] == "simcmf":
        if "checkpoint" not in config:
            raise ValueError("mode 'simcmf' needs a pretrained backbone 'checkpoint'")
        backbone = load_checkpoint(resolve_input(config["checkpoint"]))
        peft_cfg = resolve_peft(config["peft"], backbone)
        model = build_model(adapter_cfg, backbone, peft_cfg)
    else:
        raise ValueError(f"unknown train mode '{config['mode']}' (simcmf or scratch)")

    records = [resize_for_model(r, model.img_size) for r in records]
    return model, records, train_cfg


def resolve_peft(peft: dict, backbone) -> PeftConfig:
    peft = dict(peft)
    strategy = peft.pop("strategy", "lora")
    explicit = {"lora": "lora_rank", "mlp_adapter": "bottleneck_dim",
                "prompt_tuning": "prompt_tokens_per_block"}.get(strategy)
    if strategy == "full_finetune":
        return PeftConfig(strategy="full_finetune")
    if explicit and explicit in peft:
        return PeftConfig(strategy=strategy, **peft)
    return budget_balance(
        backbone, strategy, peft.get("target_fraction", PeftConfig("lora").target_fraction)
    )


# ---------------------------------------------------------------------------
# commands


def cmd_fixture(args) -> int:
    started = _now()
    out_dir = claim_out_dir(args.out, "fixture", args.force)
    manifest = write_fixture(
        out_dir, n_train=args.train, n_val=args.val, seed=args.seed,
        size=args.size, pseudo=args.pseudo,
    )
    write_run_manifest(out_dir, "fixture", args, {
        "seed": args.seed, "n_train": args.train, "n_val": args.val,
        "size": args.size, "pseudo": args.pseudo,
    }, started)
    print(f"fixture manifest: {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    started = _now()
    out_dir = claim_out_dir(args.out, "pretrain", args.force)
    if args.variant != "toy":
        raise ValueError("desk-scale pretraining only supports the toy variant")
    model = pretrain_backbone(
        BackboneConfig.for_variant(args.variant), steps=args.steps, seed=args.seed
    )
    ckpt = out_dir / "backbone.cmf"
    save_checkpoint(model, ckpt)
    write_run_manifest(out_dir, "pretrain", args, {
        "seed": args.seed, "steps": args.steps, "variant": args.variant,
    }, started)
    print(f"pretrained backbone: {ckpt}")
    return 0


def cmd_prepare(args) -> int:
    started = _now()
    out_dir = claim_out_dir(args.out, "prepare", args.force)
    manifest = resolve_input(args.manifest)
    prepared = prepare_dataset(
        manifest, out_dir, min_area=args.min_area, connectivity=args.connectivity
    )
    records = load_dataset(prepared)
    n_inst = sum(len(r.instances) for r in records)
    write_run_manifest(out_dir, "prepare", args, {
        "manifest": str(manifest.resolve()), "min_area": args.min_area,
        "connectivity": args.connectivity, "seed": None,
    }, started)
    print(f"prepared manifest: {prepared} ({len(records)} records, {n_inst} instances)")
    return 0


def cmd_train(args) -> int:
    started = _now()
    config = load_train_config(args)
    out_dir = claim_out_dir(args.out, "train", args.force)
    model, records, train_cfg = build_from_config(config)
    result = train(model, records, train_cfg)
    ckpt = out_dir / "checkpoint.cmf"
    save_model_checkpoint(model, ckpt)
    (out_dir / "history.json").write_text(
        json.dumps(result.history, indent=2, sort_keys=True) + "\n"
    )
    config["train"] = asdict(train_cfg)
    write_run_manifest(out_dir, "train", args, config, started)
    final = result.history[-1]
    print(
        f"checkpoint: {ckpt} (epochs={len(result.history)}, "
        f"last train_loss={final['train_loss']:.4f}, val_miou={final['val_miou']})"
    )
    return 0


def cmd_sweep(args) -> int:
    started = _now()
    config = load_train_config(args)
    out_dir = claim_out_dir(args.out, "sweep", args.force)
    grid = [float(tok) for tok in args.lr_grid.split(",") if tok.strip()]

    def factory():
        model, _, _ = build_from_config(config)
        return model

    _, records, train_cfg = build_from_config(config)
    sweep = sweep_lr(factory, records, grid, train_cfg)
    ckpt = out_dir / "best_checkpoint.cmf"
    save_model_checkpoint(sweep.best_model, ckpt)
    payload = sweep.to_dict()
    payload["best_checkpoint"] = str(ckpt)
    (out_dir / "sweep.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    config["train"] = asdict(train_cfg)
    config["lr_grid"] = grid
    write_run_manifest(out_dir, "sweep", args, config, started)
    print(f"best lr: {sweep.best_lr:g} (val mIoU {sweep.best_miou:.2f}) -> {ckpt}")
    return 0


def cmd_eval(args) -> int:
    started = _now()
    out_dir = claim_out_dir(args.out, "eval", args.force)
    mode = args.mode.replace("-", "_")
    ckpt = resolve_input(args.checkpoint)
    if mode == "zero_shot":
        model = load_checkpoint(ckpt)
    else:
        model = load_model_checkpoint(ckpt)
    records = load_dataset(resolve_input(args.manifest))
    records = [resize_for_model(r, model.cfg.img_size if mode == "zero_shot" else model.img_size)
               for r in records]
    records = [r for r in records if r.split == args.split]
    if not records:
        raise ManifestError(f"no records in split '{args.split}'")
    result = evaluate(model, records, mode=mode, dataset=args.dataset,
                      train_ratio=args.train_ratio)
    (out_dir / "report.json").write_text(
        json.dumps({"reports": [result.to_dict()]}, indent=2, sort_keys=True) + "\n"
    )
    write_run_manifest(out_dir, "eval", args, {
        "checkpoint": str(ckpt.resolve()), "manifest": str(resolve_input(args.manifest).resolve()),
        "mode": mode, "split": args.split, "dataset": args.dataset,
        "train_ratio": args.train_ratio, "seed": None,
    }, started)
    print(f"{args.dataset} [{mode}] mIoU: {result.miou:.2f} ({len(result.entries)} instances)")
    return 0


def cmd_report(args) -> int:
    started = _now()
    out_dir = claim_out_dir(args.out, "report", args.force)
    in_dir = Path(args.in_dir)
    if not in_dir.exists():
        raise FileNotFoundError(f"input directory not found: {in_dir}")
    reports = []
    for path in sorted(in_dir.rglob("report.json")):
        if path.parent.resolve() == out_dir.resolve():
            continue
        payload = json.loads(path.read_text())
        for entry in payload.get("reports", []):
            reports.append(EvalReport.from_dict(entry))
    if not reports:
        raise ManifestError(f"no report.json files found under {in_dir}")
    written = report(reports, out_dir)
    write_run_manifest(out_dir, "report", args, {
        "in_dir": str(in_dir.resolve()), "n_reports": len(reports), "seed": None,
    }, started)
    print("wrote: " + ", ".join(str(p) for p in written.values()))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simcmf",
        description="Cross-modal fine-tuning for promptable segmentation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help="output directory (default: $SIMCMF_OUT/<command>)")
    common.add_argument("--force", action="store_true", help="allow reusing an existing output directory")

    p = sub.add_parser("fixture", parents=[common], help="generate the synthetic multi-channel dataset")
    p.add_argument("--train", type=int, default=8)
    p.add_argument("--val", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pseudo", action="store_true",
                   help="write a 4-channel shuffled natural+derived dataset instead")
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the toy backbone on procedural scenes")
    p.add_argument("--steps", type=int, default=800)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", default="toy", choices=["toy", "vit_b"])
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("prepare", parents=[common], help="build the click-prompt benchmark from a raw manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--min-area", type=int, default=DEFAULT_MIN_AREA, dest="min_area")
    p.add_argument("--connectivity", type=int, default=8, choices=[4, 8])
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="fine-tune on a prepared dataset")
    p.add_argument("--config", required=True, help="JSON file mirroring the train configuration")
    p.add_argument("--mode", choices=["simcmf", "scratch"], default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--checkpoint", default=None, help="pretrained backbone checkpoint")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", default=None, choices=["toy", "vit_b"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", parents=[common], help="learning-rate sweep, one run per value")
    p.add_argument("--config", required=True)
    p.add_argument("--lr-grid", required=True, dest="lr_grid",
                   help="comma-separated learning rates, e.g. '3e-6,1e-5,3e-5'")
    p.add_argument("--mode", choices=["simcmf", "scratch"], default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", default=None, choices=["toy", "vit_b"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", parents=[common], help="click-prompt evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=["simcmf", "scratch", "zero-shot"], default="simcmf")
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--dataset", default="dataset", help="dataset name used in report tables")
    p.add_argument("--train-ratio", type=float, default=None, dest="train_ratio",
                   help="tag this result with a training data ratio for curve plots")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="aggregate evaluation reports into tables and curves")
    p.add_argument("--in", required=True, dest="in_dir")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 3
    except Exception as exc:  # runtime failures
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
