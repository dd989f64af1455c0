"""Fine-tuning loop: focal + dice mask loss with a quality-score regression
head, Adam with step-decay schedule, deterministic ordering, and a learning
rate sweep that tolerates diverging runs."""

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    schedule_step_epochs: int = 10
    schedule_gamma: float = 0.5
    seed: int = 0
    focal_weight: float = 20.0
    dice_weight: float = 1.0
    score_weight: float = 1.0
    max_steps: int | None = None
    eval_every: int = 1  # epochs between val evaluations (final epoch always runs)

    def __post_init__(self):
        for name in (
            "epochs", "batch_size", "learning_rate", "beta1", "beta2",
            "schedule_step_epochs", "schedule_gamma", "focal_weight",
            "dice_weight", "score_weight", "eval_every",
        ):
            if getattr(self, name) <= 0 and name != "learning_rate":
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


class TrainDivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the offending step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss ({value}) at step {step}")
        self.step = step


def schedule_lr(base_lr: float, epoch: int, step_epochs: int = 10, gamma: float = 0.5) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base_lr * gamma ** (epoch // step_epochs)


def focal_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample mean focal loss over pixels; logits and target (..., H, W)."""
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * target + (1 - p) * (1 - target)
    alpha_t = FOCAL_ALPHA * target + (1 - FOCAL_ALPHA) * (1 - target)
    return (alpha_t * (1 - p_t) ** FOCAL_GAMMA * ce).flatten(-2).mean(-1)


def dice_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = torch.sigmoid(logits).flatten(-2)
    t = target.flatten(-2)
    inter = (p * t).sum(-1)
    return 1 - (2 * inter + 1) / (p.sum(-1) + t.sum(-1) + 1)


def mask_iou(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """IoU of boolean masks over the last two dims; empty-vs-empty counts as 1."""
    pred = pred.bool().flatten(-2)
    target = target.bool().flatten(-2)
    inter = (pred & target).sum(-1).float()
    union = (pred | target).sum(-1).float()
    return torch.where(union > 0, inter / union, torch.ones_like(union))


def segmentation_loss(mask_logits, scores, target, config: TrainConfig):
    """SAM-style objective on multi-candidate outputs.

    Per sample, only the candidate with the lowest focal+dice loss is
    supervised; its quality score regresses onto the actual IoU of the
    thresholded mask.
    """
    b, m = mask_logits.shape[:2]
    target_m = target[:, None].expand(-1, m, -1, -1)
    per_mask = config.focal_weight * focal_loss(mask_logits, target_m)
    per_mask = per_mask + config.dice_weight * dice_loss(mask_logits, target_m)
    best = per_mask.argmin(dim=1)
    idx = torch.arange(b)
    chosen_logits = mask_logits[idx, best]
    actual_iou = mask_iou(chosen_logits.detach() > 0, target.bool())
    score_err = (scores[idx, best] - actual_iou) ** 2
    return (per_mask[idx, best] + config.score_weight * score_err).mean()


@dataclass
class TrainResult:
    history: list
    model: object


def _batch_from_records(picks, rng):
    """Stack images, one sampled instance per image, into training tensors."""
    images, clicks, targets = [], [], []
    for rec in picks:
        inst = rec.instances[int(rng.integers(len(rec.instances)))]
        images.append(torch.from_numpy(rec.image))
        clicks.append([float(inst.click[0]), float(inst.click[1])])
        targets.append(torch.from_numpy(inst.mask.astype(np.float32)))
    return (
        torch.stack(images),
        torch.tensor(clicks, dtype=torch.float32),
        torch.stack(targets),
    )


def train(model, records: list, config: TrainConfig) -> TrainResult:
    """Run the fine-tuning recipe on `records` (split tags select train/val).

    Only parameters with requires_grad participate in the optimizer, so the
    freezing contracts of the alignment and PEFT modules carry through.
    Deterministic given the seed: data order, instance sampling, and model
    updates are all fixed.
    """
    from .evaluation import evaluate

    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    if not train_recs:
        raise ValueError("training requires a nonempty train split")
    for rec in train_recs:
        if not rec.instances:
            raise ValueError(f"record '{rec.id}' has no instances to prompt with")

    rng = np.random.default_rng(config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        params, lr=config.learning_rate, betas=(config.beta1, config.beta2)
    )
    history = []
    step = 0
    stop = False
    for epoch in range(config.epochs):
        lr = schedule_lr(
            config.learning_rate, epoch, config.schedule_step_epochs, config.schedule_gamma
        )
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        order = rng.permutation(len(train_recs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            picks = [train_recs[i] for i in order[start : start + config.batch_size]]
            images, clicks, targets = _batch_from_records(picks, rng)
            mask_logits, scores = model(images, clicks)
            loss = segmentation_loss(mask_logits, scores, targets, config)
            if not torch.isfinite(loss):
                raise TrainDivergenceError(step, float(loss))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                stop = True
                break
        entry = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else None,
            "val_miou": None,
            "steps": step,
        }
        last_epoch = stop or epoch == config.epochs - 1
        if val_recs and (epoch % config.eval_every == 0 or last_epoch):
            entry["val_miou"] = evaluate(model, val_recs, mode="simcmf").miou
        history.append(entry)
        if stop:
            break
    return TrainResult(history=history, model=model)


@dataclass
class SweepResult:
    per_lr: dict
    errors: dict
    best_lr: float
    best_miou: float
    best_model: object | None = None

    def to_dict(self) -> dict:
        return {
            "per_lr": {f"{lr:g}": miou for lr, miou in sorted(self.per_lr.items())},
            "errors": {f"{lr:g}": msg for lr, msg in sorted(self.errors.items())},
            "best_lr": self.best_lr,
            "best_miou": self.best_miou,
        }


def final_val_miou(history: list) -> float:
    for entry in reversed(history):
        if entry["val_miou"] is not None:
            return entry["val_miou"]
    raise ValueError("history holds no validation mIoU")


def sweep_lr(model_factory, records: list, grid, config: TrainConfig) -> SweepResult:
    """One independent run per learning rate, best validation mIoU wins.

    A run that diverges is scored -inf (with its error recorded) instead of
    aborting the sweep; ties go to the smaller learning rate.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("learning-rate grid must be nonempty")
    per_lr = {}
    errors = {}
    best = None  # (miou, -lr) maximization with smaller-lr tie-break
    best_model = None
    for lr in grid:
        model = model_factory()
        run_cfg = replace(config, learning_rate=lr)
        try:
            result = train(model, records, run_cfg)
            miou = final_val_miou(result.history)
        except TrainDivergenceError as exc:
            per_lr[lr] = float("-inf")
            errors[lr] = f"lr={lr:g}: {exc}"
            continue
        per_lr[lr] = miou
        if best is None or (miou, -lr) > best:
            best = (miou, -lr)
            best_model = model
    if best is None:
        raise RuntimeError(
            "every learning rate in the sweep diverged: " + "; ".join(errors.values())
        )
    return SweepResult(
        per_lr=per_lr,
        errors=errors,
        best_lr=-best[1],
        best_miou=best[0],
        best_model=best_model,
    )
