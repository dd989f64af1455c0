"""Promptable segmentation backbone: ViT image encoder, point-prompt encoder,
and a lightweight two-way-attention mask decoder.

Two variants ship: `toy` (desk-scale, trains on CPU in seconds) and `vit_b`
(full-size dimensions, used for parameter accounting and budget math; never
needs a forward pass in the test suite).
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import ArchiveError, load_archive, save_archive

VIT_B_TOTAL_PARAMS = 93_700_000  # published full-size total, +/- 1%


@dataclass
class BackboneConfig:
    patch_size: int = 4
    d_embed: int = 64
    depth: int = 2
    heads: int = 4
    variant: str = "toy"
    img_size: int = 64
    mlp_ratio: float = 2.0
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    decoder_mlp_dim: int = 128
    num_mask_tokens: int = 4

    @classmethod
    def toy(cls) -> "BackboneConfig":
        return cls()

    @classmethod
    def vit_b(cls) -> "BackboneConfig":
        return cls(
            patch_size=16,
            d_embed=768,
            depth=12,
            heads=12,
            variant="vit_b",
            img_size=1024,
            mlp_ratio=4.0,
            decoder_dim=256,
            decoder_depth=2,
            decoder_heads=8,
            decoder_mlp_dim=2048,
        )

    @classmethod
    def for_variant(cls, variant: str) -> "BackboneConfig":
        if variant == "toy":
            return cls.toy()
        if variant == "vit_b":
            return cls.vit_b()
        raise ValueError(f"unknown variant '{variant}', expected 'toy' or 'vit_b'")

    @property
    def grid_size(self) -> int:
        return self.img_size // self.patch_size


@dataclass
class MaskPrediction:
    """One decoded mask at model resolution plus its predicted quality score."""

    logits: torch.Tensor  # H x W
    score: float


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel dim of a B x C x H x W tensor."""

    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection: 3 x H x W -> (H/p) x (W/p) x d tokens."""

    def __init__(self, d_embed: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.d_embed = d_embed
        self.proj = nn.Conv2d(3, d_embed, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != 3:
            raise ValueError(f"patch embedding expects 3 channels, got {x.shape[1]}")
        return self.proj(x).permute(0, 2, 3, 1)  # B, h, w, d


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, internal_dim: int | None = None):
        super().__init__()
        self.internal_dim = internal_dim or dim
        if self.internal_dim % heads:
            raise ValueError(f"attention dim {self.internal_dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = nn.Linear(dim, self.internal_dim)
        self.k_proj = nn.Linear(dim, self.internal_dim)
        self.v_proj = nn.Linear(dim, self.internal_dim)
        self.out_proj = nn.Linear(self.internal_dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, -1).transpose(1, 2)

    def forward(self, q, k, v) -> torch.Tensor:
        q = self._split(self.q_proj(q))
        k = self._split(self.k_proj(k))
        v = self._split(self.v_proj(v))
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        out = attn.softmax(dim=-1) @ v
        b, _, n, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, self.internal_dim))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, act=nn.GELU):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = act()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm transformer block operating on a B x N x d token sequence."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y)
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.d_embed, cfg.patch_size)
        n_tokens = cfg.grid_size * cfg.grid_size
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, cfg.d_embed))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.d_embed, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.neck = nn.Sequential(
            nn.Conv2d(cfg.d_embed, cfg.decoder_dim, kernel_size=1, bias=False),
            LayerNorm2d(cfg.decoder_dim),
            nn.Conv2d(cfg.decoder_dim, cfg.decoder_dim, kernel_size=3, padding=1, bias=False),
            LayerNorm2d(cfg.decoder_dim),
        )

    def encode_tokens(self, grid: torch.Tensor) -> torch.Tensor:
        """Run pre-embedded tokens (B, h, w, d) through the transformer and neck."""
        b, h, w, d = grid.shape
        if h * w != self.pos_embed.shape[1]:
            raise ValueError(
                f"token grid {h}x{w} does not match the encoder's "
                f"{self.cfg.grid_size}x{self.cfg.grid_size} positional embedding"
            )
        x = grid.reshape(b, h * w, d) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = x.reshape(b, h, w, d).permute(0, 3, 1, 2)
        return self.neck(x)  # B, decoder_dim, h, w

    def forward(self, rgb: torch.Tensor) -> torch.Tensor:
        return self.encode_tokens(self.patch_embed(rgb))


class PromptEncoder(nn.Module):
    """Embeds a single positive click via random-Fourier positional encoding."""

    def __init__(self, dim: int, img_size: int):
        super().__init__()
        self.dim = dim
        self.img_size = img_size
        # Frequency matrix is fixed at init and checkpointed as a buffer.
        self.register_buffer("pe_freqs", torch.randn(2, dim // 2))
        self.point_embed = nn.Parameter(torch.zeros(dim))
        nn.init.trunc_normal_(self.point_embed, std=0.02)

    def _encode_coords(self, coords: torch.Tensor) -> torch.Tensor:
        # coords in [0, 1], shape (..., 2) ordered (y, x)
        proj = (2 * coords - 1) @ self.pe_freqs * (2 * math.pi)
        return torch.cat([proj.sin(), proj.cos()], dim=-1)

    def forward(self, clicks: torch.Tensor) -> torch.Tensor:
        """clicks: (B, 2) pixel coordinates (row, col) -> (B, 1, dim) embeddings."""
        if clicks.ndim != 2 or clicks.shape[1] != 2:
            raise ValueError(f"clicks must be (B, 2), got {tuple(clicks.shape)}")
        rows, cols = clicks[:, 0], clicks[:, 1]
        if (rows < 0).any() or (rows >= self.img_size).any() or (cols < 0).any() or (
            cols >= self.img_size
        ).any():
            raise ValueError(
                f"click out of bounds for {self.img_size}x{self.img_size} input: "
                f"{clicks.tolist()}"
            )
        coords = torch.stack([(rows + 0.5) / self.img_size, (cols + 0.5) / self.img_size], -1)
        return (self._encode_coords(coords.to(self.pe_freqs.dtype)) + self.point_embed)[:, None, :]

    def dense_pe(self, h: int, w: int) -> torch.Tensor:
        """Per-pixel positional encoding for the image feature grid: (dim, h, w)."""
        ys = (torch.arange(h, dtype=self.pe_freqs.dtype, device=self.pe_freqs.device) + 0.5) / h
        xs = (torch.arange(w, dtype=self.pe_freqs.dtype, device=self.pe_freqs.device) + 0.5) / w
        grid = torch.stack(torch.meshgrid(ys, xs, indexing="ij"), dim=-1)
        return self._encode_coords(grid).permute(2, 0, 1)


class TwoWayBlock(nn.Module):
    """Decoder block: query self-attention, then token<->image cross-attention."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, downsample: int = 2):
        super().__init__()
        internal = dim // downsample
        self.self_attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_image = Attention(dim, heads, internal_dim=internal)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_dim, act=nn.ReLU)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_image_to_token = Attention(dim, heads, internal_dim=internal)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, queries, keys, query_pe, key_pe):
        q = queries + query_pe
        queries = self.norm1(queries + self.self_attn(q, q, queries))
        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.cross_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))
        q = queries + query_pe
        k = keys + key_pe
        keys = self.norm4(keys + self.cross_image_to_token(k, q, queries))
        return queries, keys


class StackedMlp(nn.Module):
    """n_layers-deep MLP head with ReLU between layers."""

    def __init__(self, dim_in: int, dim_hidden: int, dim_out: int, n_layers: int):
        super().__init__()
        dims = [dim_in] + [dim_hidden] * (n_layers - 1) + [dim_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = F.relu(x)
        return x


class MaskDecoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        dim = cfg.decoder_dim
        self.num_mask_tokens = cfg.num_mask_tokens
        self.iou_token = nn.Parameter(torch.zeros(1, dim))
        self.mask_tokens = nn.Parameter(torch.zeros(cfg.num_mask_tokens, dim))
        nn.init.trunc_normal_(self.iou_token, std=0.02)
        nn.init.trunc_normal_(self.mask_tokens, std=0.02)
        self.blocks = nn.ModuleList(
            TwoWayBlock(dim, cfg.decoder_heads, cfg.decoder_mlp_dim)
            for _ in range(cfg.decoder_depth)
        )
        self.final_token_to_image = Attention(dim, cfg.decoder_heads, internal_dim=dim // 2)
        self.norm_final = nn.LayerNorm(dim)
        self.upscale = nn.ModuleList(
            [
                nn.ConvTranspose2d(dim, dim // 4, kernel_size=2, stride=2),
                LayerNorm2d(dim // 4),
                nn.ConvTranspose2d(dim // 4, dim // 8, kernel_size=2, stride=2),
            ]
        )
        self.hypernet = nn.ModuleList(
            StackedMlp(dim, dim, dim // 8, 3) for _ in range(cfg.num_mask_tokens)
        )
        self.score_head = StackedMlp(dim, dim, cfg.num_mask_tokens, 3)

    def forward(self, image_feats: torch.Tensor, image_pe: torch.Tensor, prompt: torch.Tensor):
        """image_feats (B, d, h, w), image_pe (d, h, w), prompt (B, Np, d).

        Returns mask logits (B, M, 4h, 4w) and quality scores (B, M) in [0, 1].
        """
        b, d, h, w = image_feats.shape
        tokens = torch.cat(
            [
                self.iou_token.expand(b, -1, -1),
                self.mask_tokens.expand(b, -1, -1),
                prompt,
            ],
            dim=1,
        )
        keys = image_feats.flatten(2).transpose(1, 2)  # B, hw, d
        key_pe = image_pe.flatten(1).transpose(0, 1).expand(b, -1, -1)
        queries = tokens
        for blk in self.blocks:
            queries, keys = blk(queries, keys, query_pe=tokens, key_pe=key_pe)
        q = queries + tokens
        k = keys + key_pe
        queries = self.norm_final(queries + self.final_token_to_image(q, k, keys))

        iou_out = queries[:, 0]
        mask_out = queries[:, 1 : 1 + self.num_mask_tokens]

        feats = keys.transpose(1, 2).reshape(b, d, h, w)
        feats = self.upscale[0](feats)
        feats = F.gelu(self.upscale[1](feats))
        feats = F.gelu(self.upscale[2](feats))  # B, d/8, 4h, 4w

        hyper = torch.stack(
            [self.hypernet[m](mask_out[:, m]) for m in range(self.num_mask_tokens)], dim=1
        )  # B, M, d/8
        bb, cc, hh, ww = feats.shape
        masks = (hyper @ feats.reshape(bb, cc, hh * ww)).reshape(bb, -1, hh, ww)
        scores = torch.sigmoid(self.score_head(iou_out))
        return masks, scores


class PromptableSegmenter(nn.Module):
    """Image encoder + prompt encoder + mask decoder behind one roof."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg.decoder_dim, cfg.img_size)
        self.mask_decoder = MaskDecoder(cfg)

    @property
    def blocks(self):
        return self.image_encoder.blocks

    def forward_tokens(self, grid: torch.Tensor, clicks: torch.Tensor):
        """Batched path used in training: token grid (B,h,w,d) + clicks (B,2).

        Returns per-candidate mask logits (B, M, H, W) at model resolution and
        scores (B, M).
        """
        feats = self.image_encoder.encode_tokens(grid)
        _, _, h, w = feats.shape
        pe = self.prompt_encoder.dense_pe(h, w)
        prompt = self.prompt_encoder(clicks)
        masks, scores = self.mask_decoder(feats, pe, prompt)
        if masks.shape[-1] != self.cfg.img_size:
            masks = F.interpolate(
                masks, size=(self.cfg.img_size, self.cfg.img_size), mode="bilinear",
                align_corners=False,
            )
        return masks, scores

    def forward(self, rgb: torch.Tensor, clicks: torch.Tensor):
        return self.forward_tokens(self.image_encoder.patch_embed(rgb), clicks)

    @torch.no_grad()
    def predict(self, grid: torch.Tensor, click) -> MaskPrediction:
        """Single-image prediction from pre-embedded tokens and one click.

        When the decoder emits several candidates the one with the highest
        predicted quality score is returned.
        """
        if grid.ndim == 3:
            grid = grid[None]
        clicks = torch.as_tensor([[int(click[0]), int(click[1])]], dtype=torch.float32)
        masks, scores = self.forward_tokens(grid, clicks)
        best = int(scores[0].argmax())
        return MaskPrediction(logits=masks[0, best], score=float(scores[0, best]))

    @torch.no_grad()
    def predict_rgb(self, rgb: torch.Tensor, click) -> MaskPrediction:
        if rgb.ndim == 3:
            rgb = rgb[None]
        return self.predict(self.image_encoder.patch_embed(rgb), click)


def total_params(module: nn.Module) -> int:
    seen = set()
    total = 0
    for p in module.parameters():
        if id(p) not in seen:
            seen.add(id(p))
            total += p.numel()
    return total


class CheckpointError(Exception):
    """Raised when a checkpoint does not match the model being loaded."""


def build_backbone(variant_or_config, seed: int | None = None) -> PromptableSegmenter:
    cfg = (
        variant_or_config
        if isinstance(variant_or_config, BackboneConfig)
        else BackboneConfig.for_variant(variant_or_config)
    )
    if seed is not None:
        torch.manual_seed(seed)
    model = PromptableSegmenter(cfg)
    if cfg.variant == "vit_b":
        _check_vit_b_total(model)
    return model


def _check_vit_b_total(model: PromptableSegmenter) -> None:
    n = total_params(model)
    if abs(n - VIT_B_TOTAL_PARAMS) > 0.01 * VIT_B_TOTAL_PARAMS:
        raise CheckpointError(
            f"vit_b variant has {n} parameters, expected within 1% of {VIT_B_TOTAL_PARAMS}"
        )


def save_checkpoint(model: PromptableSegmenter, path) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_archive(path, tensors, meta={"kind": "backbone", "config": asdict(model.cfg)})


def load_checkpoint(path, variant: str | None = None) -> PromptableSegmenter:
    """Rebuild a backbone from a checkpoint archive.

    Missing keys, unexpected keys, and shape mismatches are all reported by
    name; nothing partial is ever returned.
    """
    tensors, meta = load_archive(path)
    if meta.get("kind") != "backbone":
        raise CheckpointError(f"{path} is not a backbone checkpoint (kind={meta.get('kind')!r})")
    cfg = BackboneConfig(**meta["config"])
    if variant is not None and variant != cfg.variant:
        raise CheckpointError(
            f"requested variant '{variant}' but {path} stores '{cfg.variant}'"
        )
    model = PromptableSegmenter(cfg)
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    extra = sorted(set(tensors) - set(state))
    mismatched = [
        f"{k}: checkpoint {tensors[k].shape} vs model {tuple(state[k].shape)}"
        for k in sorted(set(state) & set(tensors))
        if tuple(tensors[k].shape) != tuple(state[k].shape)
    ]
    problems = []
    if missing:
        problems.append(f"missing keys: {missing}")
    if extra:
        problems.append(f"unexpected keys: {extra}")
    if mismatched:
        problems.append(f"shape mismatches: {mismatched}")
    if problems:
        raise CheckpointError(f"cannot load {path}: " + "; ".join(problems))
    with torch.no_grad():
        for k, v in state.items():
            v.copy_(torch.from_numpy(tensors[k].copy()))
    if cfg.variant == "vit_b":
        _check_vit_b_total(model)
    return model
