"""Parameter-efficient fine-tuning strategies injected into a backbone.

Strategies: low-rank attention updates (lora), bottleneck branches parallel to
each block's MLP (mlp_adapter), learnable per-block tokens (prompt_tuning),
and plain full fine-tuning. For the first two, the injected parameters start
at exact zero effect, so the injected model's first forward pass equals the
base model's; prompt tokens have no such initialization and perturb the
output immediately.
"""

import copy
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .archive import load_archive, save_archive
from .backbone import PromptableSegmenter, total_params

STRATEGIES = ("lora", "mlp_adapter", "prompt_tuning", "full_finetune")


@dataclass
class PeftConfig:
    strategy: str
    lora_rank: int = 4
    lora_targets: tuple = ("q_proj", "v_proj")
    lora_scale: float = 1.0
    bottleneck_dim: int = 16
    prompt_tokens_per_block: int = 10
    target_fraction: float = 0.04

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy '{self.strategy}', expected one of {STRATEGIES}")
        if not 0 < self.target_fraction <= 1:
            raise ValueError(f"target_fraction must be in (0, 1], got {self.target_fraction}")
        self.lora_targets = tuple(self.lora_targets)
        for name, value in (
            ("lora_rank", self.lora_rank),
            ("bottleneck_dim", self.bottleneck_dim),
            ("prompt_tokens_per_block", self.prompt_tokens_per_block),
        ):
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")


class BudgetError(ValueError):
    """Raised when a trainable-parameter target cannot be met."""


class LoraLinear(nn.Module):
    """Linear layer plus a trainable low-rank update; base weights untouched."""

    def __init__(self, base: nn.Linear, rank: int, scale: float = 1.0):
        super().__init__()
        if rank > min(base.in_features, base.out_features):
            raise ValueError(
                f"lora rank {rank} exceeds layer width "
                f"{min(base.in_features, base.out_features)}"
            )
        self.base = base
        self.rank = rank
        self.scale = scale
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))

    def forward(self, x):
        return self.base(x) + self.scale * ((x @ self.lora_a.t()) @ self.lora_b.t())


class ParallelBottleneck(nn.Module):
    """Down/ReLU/up branch added alongside a block's MLP; up is zero-init."""

    def __init__(self, mlp: nn.Module, dim: int, bottleneck: int):
        super().__init__()
        if bottleneck > dim:
            raise ValueError(f"bottleneck {bottleneck} exceeds layer width {dim}")
        self.mlp = mlp
        self.adapter_down = nn.Linear(dim, bottleneck)
        self.adapter_up = nn.Linear(bottleneck, dim)
        nn.init.zeros_(self.adapter_up.weight)
        nn.init.zeros_(self.adapter_up.bias)

    def forward(self, x):
        return self.mlp(x) + self.adapter_up(torch.relu(self.adapter_down(x)))


class PromptedBlock(nn.Module):
    """Prepends learnable tokens to a block's input and strips them after."""

    def __init__(self, block: nn.Module, n_tokens: int, dim: int):
        super().__init__()
        self.block = block
        self.prompt_tokens = nn.Parameter(torch.empty(n_tokens, dim))
        nn.init.trunc_normal_(self.prompt_tokens, std=0.02)

    def forward(self, x):
        n = self.prompt_tokens.shape[0]
        prompts = self.prompt_tokens.unsqueeze(0).expand(x.shape[0], -1, -1)
        out = self.block(torch.cat([prompts, x], dim=1))
        return out[:, n:, :]


INJECTED_MARKERS = ("lora_a", "lora_b", "adapter_down", "adapter_up", "prompt_tokens")


def _is_injected(param_name: str) -> bool:
    return any(marker in param_name for marker in INJECTED_MARKERS)


class InjectedBackbone(nn.Module):
    """A backbone with a fine-tuning strategy applied.

    For PEFT strategies all base parameters are frozen and only injected ones
    train; full_finetune leaves everything trainable with nothing injected.
    """

    def __init__(self, backbone: PromptableSegmenter, config: PeftConfig):
        super().__init__()
        self.backbone = backbone
        self.config = config
        self.strategy = config.strategy

    # The segmentation surface simply delegates.
    @property
    def cfg(self):
        return self.backbone.cfg

    @property
    def image_encoder(self):
        return self.backbone.image_encoder

    @property
    def prompt_encoder(self):
        return self.backbone.prompt_encoder

    @property
    def mask_decoder(self):
        return self.backbone.mask_decoder

    def forward_tokens(self, grid, clicks):
        return self.backbone.forward_tokens(grid, clicks)

    def forward(self, rgb, clicks):
        return self.backbone(rgb, clicks)

    def predict(self, grid, click):
        return self.backbone.predict(grid, click)

    def predict_rgb(self, rgb, click):
        return self.backbone.predict_rgb(rgb, click)

    def injected_state(self) -> dict:
        return {
            name: p.detach().cpu().numpy()
            for name, p in self.backbone.named_parameters()
            if _is_injected(name)
        }


def _encoder_blocks(backbone) -> nn.ModuleList:
    return backbone.image_encoder.blocks


def inject(backbone: PromptableSegmenter, config: PeftConfig) -> InjectedBackbone:
    """Apply `config.strategy` to a copy of `backbone`; the original is untouched."""
    model = copy.deepcopy(backbone)
    blocks = _encoder_blocks(model)
    if config.strategy == "lora":
        for block in blocks:
            for target in config.lora_targets:
                if not hasattr(block.attn, target) or not isinstance(
                    getattr(block.attn, target), nn.Linear
                ):
                    available = [
                        n for n, m in block.attn.named_children() if isinstance(m, nn.Linear)
                    ]
                    raise ValueError(
                        f"unknown lora target '{target}'; attention sublayers are {available}"
                    )
                setattr(
                    block.attn,
                    target,
                    LoraLinear(getattr(block.attn, target), config.lora_rank, config.lora_scale),
                )
    elif config.strategy == "mlp_adapter":
        for block in blocks:
            dim = block.mlp.fc1.in_features
            block.mlp = ParallelBottleneck(block.mlp, dim, config.bottleneck_dim)
    elif config.strategy == "prompt_tuning":
        dim = model.cfg.d_embed
        for i, block in enumerate(blocks):
            blocks[i] = PromptedBlock(block, config.prompt_tokens_per_block, dim)
    # full_finetune: nothing to add.

    if config.strategy == "full_finetune":
        model.requires_grad_(True)
    else:
        model.requires_grad_(False)
        for name, p in model.named_parameters():
            if _is_injected(name):
                p.requires_grad_(True)
    return InjectedBackbone(model, config)


def trainable_report(injected: InjectedBackbone) -> dict:
    """Parameter accounting: per-group counts, totals, and trainable fraction."""
    groups = {}
    trainable = 0
    frozen = 0
    seen = set()
    for name, p in injected.backbone.named_parameters():
        if id(p) in seen:
            continue
        seen.add(id(p))
        if _is_injected(name):
            group = "injected"
        else:
            group = "base"
        key = f"{group}.{'trainable' if p.requires_grad else 'frozen'}"
        groups[key] = groups.get(key, 0) + p.numel()
        if p.requires_grad:
            trainable += p.numel()
        else:
            frozen += p.numel()
    total = trainable + frozen
    return {
        "strategy": injected.strategy,
        "groups": dict(sorted(groups.items())),
        "trainable": trainable,
        "frozen": frozen,
        "total": total,
        "fraction": trainable / total if total else 0.0,
    }


def count_injected(backbone: PromptableSegmenter, strategy: str, value: int,
                   lora_targets=("q_proj", "v_proj")) -> int:
    """Exact injected-parameter count for a strategy hyperparameter `value`,
    computed from the backbone's actual layer dimensions."""
    blocks = _encoder_blocks(backbone)
    if strategy == "lora":
        per_rank = 0
        for block in blocks:
            for target in lora_targets:
                layer = getattr(block.attn, target)
                per_rank += layer.in_features + layer.out_features
        return value * per_rank
    if strategy == "mlp_adapter":
        count = 0
        for block in blocks:
            dim = block.mlp.fc1.in_features
            count += dim * value + value + value * dim + dim
        return count
    if strategy == "prompt_tuning":
        dim = backbone.cfg.d_embed
        return len(blocks) * value * dim
    raise ValueError(f"no injected-parameter count for strategy '{strategy}'")


def _max_hyperparameter(backbone: PromptableSegmenter, strategy: str, lora_targets) -> int:
    blocks = _encoder_blocks(backbone)
    if strategy == "lora":
        return min(
            min(getattr(b.attn, t).in_features, getattr(b.attn, t).out_features)
            for b in blocks
            for t in lora_targets
        )
    if strategy == "mlp_adapter":
        return min(b.mlp.fc1.in_features for b in blocks)
    if strategy == "prompt_tuning":
        # Cap prompts at the encoder's own sequence length.
        return backbone.image_encoder.pos_embed.shape[1]
    raise ValueError(strategy)


def budget_balance(backbone: PromptableSegmenter, strategy: str,
                   target_fraction: float = 0.04,
                   lora_targets=("q_proj", "v_proj")) -> PeftConfig:
    """Smallest hyperparameter whose injected count reaches the budget.

    The count is exact (from the backbone's real layer dimensions) and
    nondecreasing in the hyperparameter, so the search is a deterministic
    scan for the first value meeting `target_fraction * total`.
    """
    if not 0 < target_fraction <= 1:
        raise ValueError(f"target_fraction must be in (0, 1], got {target_fraction}")
    if strategy == "full_finetune":
        return PeftConfig(strategy="full_finetune", target_fraction=target_fraction)
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy '{strategy}'")
    total = total_params(backbone)
    target = target_fraction * total
    hi = _max_hyperparameter(backbone, strategy, lora_targets)
    best = None
    lo, high = 1, hi
    while lo <= high:  # counts are monotone, so bisect for the first hit
        mid = (lo + high) // 2
        if count_injected(backbone, strategy, mid, lora_targets) >= target:
            best = mid
            high = mid - 1
        else:
            lo = mid + 1
    if best is None:
        achievable = count_injected(backbone, strategy, hi, lora_targets)
        raise BudgetError(
            f"target {target_fraction:.2%} of {total} params unreachable with "
            f"{strategy}: maximum achievable is {achievable} "
            f"({achievable / total:.2%}) at hyperparameter {hi}"
        )
    if strategy == "lora":
        return PeftConfig(
            strategy="lora", lora_rank=best, lora_targets=tuple(lora_targets),
            target_fraction=target_fraction,
        )
    if strategy == "mlp_adapter":
        return PeftConfig(
            strategy="mlp_adapter", bottleneck_dim=best, target_fraction=target_fraction
        )
    return PeftConfig(
        strategy="prompt_tuning", prompt_tokens_per_block=best,
        target_fraction=target_fraction,
    )


def save_peft_checkpoint(injected: InjectedBackbone, path) -> None:
    """Store only the injected tensors plus strategy tag and config."""
    save_archive(
        path,
        injected.injected_state(),
        meta={"kind": "peft", "strategy": injected.strategy, "config": asdict(injected.config)},
    )


def attach_peft_checkpoint(backbone: PromptableSegmenter, path) -> InjectedBackbone:
    """Re-attach a PEFT checkpoint to an unmodified base backbone."""
    tensors, meta = load_archive(path)
    if meta.get("kind") != "peft":
        raise ValueError(f"{path} is not a peft checkpoint (kind={meta.get('kind')!r})")
    cfg_dict = dict(meta["config"])
    cfg_dict["lora_targets"] = tuple(cfg_dict.get("lora_targets", ()))
    config = PeftConfig(**cfg_dict)
    injected = inject(backbone, config)
    expected = {n for n, _ in injected.backbone.named_parameters() if _is_injected(n)}
    missing = sorted(expected - set(tensors))
    extra = sorted(set(tensors) - expected)
    if missing or extra:
        raise ValueError(
            f"peft checkpoint {path} mismatch: missing {missing}, unexpected {extra}"
        )
    with torch.no_grad():
        for name, p in injected.backbone.named_parameters():
            if name in expected:
                p.copy_(torch.from_numpy(tensors[name].copy()))
    return injected
