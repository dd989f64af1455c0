"""Full cross-modal segmenter: alignment module feeding a (possibly injected)
promptable backbone, plus builders for the pretrained, scratch, and reload
paths."""

from dataclasses import asdict

import torch
import torch.nn as nn

from .alignment import AdapterConfig, AlignmentModule, build_adapter
from .archive import save_archive, load_archive
from .backbone import (
    BackboneConfig,
    CheckpointError,
    MaskPrediction,
    PromptableSegmenter,
    build_backbone,
    load_checkpoint,
)
from .peft import InjectedBackbone, PeftConfig, inject


class CrossModalSegmenter(nn.Module):
    """adapter -> frozen patch embedding -> encoder -> prompt-driven decoder."""

    def __init__(self, alignment: AlignmentModule, backbone):
        super().__init__()
        self.alignment = alignment
        self.backbone = backbone

    @property
    def img_size(self) -> int:
        return self.backbone.cfg.img_size

    def forward(self, images: torch.Tensor, clicks: torch.Tensor):
        """images (B, C, H, W), clicks (B, 2) -> mask logits (B, M, H, W), scores (B, M)."""
        return self.backbone.forward_tokens(self.alignment(images), clicks)

    @torch.no_grad()
    def predict(self, image: torch.Tensor, click) -> MaskPrediction:
        if image.ndim == 3:
            image = image[None]
        return self.backbone.predict(self.alignment(image), click)


def build_model(
    adapter_config: AdapterConfig,
    backbone,
    peft_config: PeftConfig | None = None,
    freeze_embedding: bool = True,
    adapter_init: str = "default",
) -> CrossModalSegmenter:
    """Assemble the fine-tuning model around an existing (pretrained) backbone.

    The alignment module shares the injected backbone's patch embedding, so
    freezing it excludes exactly one tensor pair from the optimizer. The
    channel adapter always remains trainable.
    """
    if peft_config is not None:
        backbone = inject(backbone, peft_config)
        patch_embed = backbone.backbone.image_encoder.patch_embed
    else:
        patch_embed = backbone.image_encoder.patch_embed
    adapter = build_adapter(adapter_config, init=adapter_init)
    alignment = AlignmentModule(adapter, patch_embed, freeze_embedding=freeze_embedding)
    return CrossModalSegmenter(alignment, backbone)


def build_scratch_model(
    adapter_config: AdapterConfig,
    backbone_config: BackboneConfig,
    seed: int = 0,
) -> CrossModalSegmenter:
    """Same architecture, random initialization, nothing pretrained or frozen."""
    backbone = build_backbone(backbone_config, seed=seed)
    model = build_model(
        adapter_config,
        backbone,
        peft_config=PeftConfig(strategy="full_finetune"),
        freeze_embedding=False,
    )
    # From-scratch training has no zero-init stabilizer to protect, so give
    # the adapter head a signal-carrying start.
    head = model.alignment.adapter.convs[-1]
    nn.init.kaiming_normal_(head.weight, mode="fan_in", nonlinearity="linear")
    return model


def save_model_checkpoint(model: CrossModalSegmenter, path) -> None:
    """Self-contained checkpoint: adapter tensors under the adapter.layer{i}
    convention, everything else under backbone.*, plus the configs needed to
    rebuild."""
    backbone = model.backbone
    if isinstance(backbone, InjectedBackbone):
        peft_meta = asdict(backbone.config)
        backbone_module = backbone.backbone
    else:
        peft_meta = None
        backbone_module = backbone
    tensors = dict(model.alignment.adapter.state_tensors())
    for key, value in backbone_module.state_dict().items():
        tensors[f"backbone.{key}"] = value.detach().cpu().numpy()
    meta = {
        "kind": "crossmodal",
        "adapter_config": asdict(model.alignment.adapter.config),
        "backbone_config": asdict(backbone_module.cfg),
        "peft": peft_meta,
        "freeze_embedding": model.alignment.freeze_embedding,
    }
    save_archive(path, tensors, meta=meta)


def load_model_checkpoint(path) -> CrossModalSegmenter:
    tensors, meta = load_archive(path)
    if meta.get("kind") != "crossmodal":
        raise CheckpointError(f"{path} is not a cross-modal checkpoint (kind={meta.get('kind')!r})")
    adapter_cfg = AdapterConfig(**meta["adapter_config"])
    backbone_cfg = BackboneConfig(**meta["backbone_config"])
    backbone = PromptableSegmenter(backbone_cfg)
    peft_cfg = None
    if meta.get("peft") is not None:
        peft_dict = dict(meta["peft"])
        peft_dict["lora_targets"] = tuple(peft_dict.get("lora_targets", ()))
        peft_cfg = PeftConfig(**peft_dict)
    model = build_model(
        adapter_cfg, backbone, peft_config=peft_cfg,
        freeze_embedding=meta.get("freeze_embedding", True),
    )
    adapter_keys = {k: v for k, v in tensors.items() if k.startswith("adapter.")}
    model.alignment.adapter.load_state_tensors(adapter_keys)
    backbone_module = (
        model.backbone.backbone if isinstance(model.backbone, InjectedBackbone) else model.backbone
    )
    state = backbone_module.state_dict()
    expected = {f"backbone.{k}" for k in state}
    found = {k for k in tensors if k.startswith("backbone.")}
    missing = sorted(expected - found)
    extra = sorted(found - expected)
    if missing or extra:
        raise CheckpointError(
            f"cannot load {path}: missing keys {missing}; unexpected keys {extra}"
        )
    with torch.no_grad():
        for key, value in state.items():
            stored = tensors[f"backbone.{key}"]
            if tuple(stored.shape) != tuple(value.shape):
                raise CheckpointError(
                    f"shape mismatch for 'backbone.{key}': checkpoint "
                    f"{stored.shape} vs model {tuple(value.shape)}"
                )
            value.copy_(torch.from_numpy(stored.copy()))
    return model
