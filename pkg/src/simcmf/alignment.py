"""Cross-modal alignment: a small conv adapter mapping C input channels to the
3 channels a pretrained patch embedding expects, composed with that (frozen)
embedding.

The adapter is a stack of `num_layers` convolutions. With one layer it is a
plain 1x1 projection C -> 3. With two or more, a k-kernel body lifts C to
`hidden_dim`, and a final 1x1 projection maps back down to 3 channels; ReLU
follows every convolution except the last.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .archive import load_archive

NONLINEARITIES = {"relu": nn.ReLU}


@dataclass
class AdapterConfig:
    """Shape of the channel-alignment conv stack."""

    in_channels: int
    num_layers: int = 2
    kernel_size: int = 3
    hidden_dim: int = 64
    nonlinearity: str = "relu"

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be positive, got {self.in_channels}")
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(
                f"kernel_size must be odd and positive so padding can preserve "
                f"spatial size, got {self.kernel_size}"
            )
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be positive, got {self.hidden_dim}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(
                f"unknown nonlinearity '{self.nonlinearity}', "
                f"expected one of {sorted(NONLINEARITIES)}"
            )


def expected_adapter_params(config: AdapterConfig) -> int:
    """Closed-form parameter count for an adapter built from `config`."""
    c, n, k, d = (
        config.in_channels,
        config.num_layers,
        config.kernel_size,
        config.hidden_dim,
    )
    if n == 1:
        return 3 * c + 3
    total = c * d * k * k + d                # C -> d, kernel k
    total += (n - 2) * (d * d * k * k + d)   # d -> d body layers
    total += 3 * d + 3                       # final 1x1 head d -> 3
    return total


class CrossModalAdapter(nn.Module):
    """Learnable conv stack projecting C channels to 3, spatial size preserved."""

    def __init__(self, config: AdapterConfig, init: str = "default"):
        super().__init__()
        self.config = config
        c, n, k, d = (
            config.in_channels,
            config.num_layers,
            config.kernel_size,
            config.hidden_dim,
        )
        convs = []
        if n == 1:
            convs.append(nn.Conv2d(c, 3, kernel_size=1))
        else:
            pad = (k - 1) // 2
            convs.append(nn.Conv2d(c, d, kernel_size=k, padding=pad))
            for _ in range(n - 2):
                convs.append(nn.Conv2d(d, d, kernel_size=k, padding=pad))
            convs.append(nn.Conv2d(d, 3, kernel_size=1))
        self.convs = nn.ModuleList(convs)
        self.act = NONLINEARITIES[config.nonlinearity]()
        self._init_weights(init)

    def _init_weights(self, init: str):
        if init == "identity":
            if self.config.in_channels != 3 or self.config.num_layers != 1:
                raise ValueError("identity init needs in_channels=3 and num_layers=1")
            with torch.no_grad():
                self.convs[0].weight.copy_(torch.eye(3).view(3, 3, 1, 1))
                self.convs[0].bias.zero_()
            return
        if init != "default":
            raise ValueError(f"unknown init '{init}'")
        # Body convs get fan-in scaled random weights; the final projection is
        # zeroed so the adapter starts out emitting a constant image, keeping
        # the pretrained embedding's input distribution undisturbed at step 0.
        for conv in self.convs[:-1]:
            nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        nn.init.zeros_(self.convs[-1].weight)
        nn.init.zeros_(self.convs[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ValueError(f"expected B x C x H x W input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"channel mismatch: adapter expects {self.config.in_channels} "
                f"channels, input has {x.shape[1]}"
            )
        for conv in self.convs[:-1]:
            x = self.act(conv(x))
        return self.convs[-1](x)

    def state_tensors(self) -> dict:
        """Checkpoint tensors under the `adapter.layer{i}` key convention."""
        out = {}
        for i, conv in enumerate(self.convs):
            out[f"adapter.layer{i}.weight"] = conv.weight.detach().cpu().numpy()
            out[f"adapter.layer{i}.bias"] = conv.bias.detach().cpu().numpy()
        return out

    def load_state_tensors(self, tensors: dict) -> None:
        for i, conv in enumerate(self.convs):
            for part, param in (("weight", conv.weight), ("bias", conv.bias)):
                key = f"adapter.layer{i}.{part}"
                if key not in tensors:
                    raise KeyError(f"adapter checkpoint missing key '{key}'")
                value = torch.from_numpy(tensors[key])
                if tuple(value.shape) != tuple(param.shape):
                    raise ValueError(
                        f"shape mismatch for '{key}': checkpoint "
                        f"{tuple(value.shape)} vs model {tuple(param.shape)}"
                    )
                with torch.no_grad():
                    param.copy_(value)


def build_adapter(config: AdapterConfig, init: str = "default") -> CrossModalAdapter:
    return CrossModalAdapter(config, init=init)


# State-dict keys under which a backbone checkpoint stores its patch embedding.
PATCH_EMBED_WEIGHT = "image_encoder.patch_embed.proj.weight"
PATCH_EMBED_BIAS = "image_encoder.patch_embed.proj.bias"


def adopt_pretrained_embedding(checkpoint_path, freeze: bool = True):
    """Load the 3-channel patch embedding out of a backbone checkpoint.

    Returns a PatchEmbed whose weights are bit-identical to the checkpoint and
    which is marked non-trainable unless `freeze` is False.
    """
    from .backbone import PatchEmbed

    tensors, _ = load_archive(checkpoint_path)
    for key in (PATCH_EMBED_WEIGHT, PATCH_EMBED_BIAS):
        if key not in tensors:
            raise KeyError(
                f"checkpoint {checkpoint_path} has no patch embedding: "
                f"missing key '{key}'"
            )
    weight = torch.from_numpy(tensors[PATCH_EMBED_WEIGHT])
    bias = torch.from_numpy(tensors[PATCH_EMBED_BIAS])
    d_embed, in_ch, patch, _ = weight.shape
    if in_ch != 3:
        raise ValueError(f"patch embedding expects 3 input channels, found {in_ch}")
    embed = PatchEmbed(d_embed=d_embed, patch_size=patch)
    with torch.no_grad():
        embed.proj.weight.copy_(weight)
        embed.proj.bias.copy_(bias)
    embed.requires_grad_(not freeze)
    return embed


class AlignmentModule(nn.Module):
    """Adapter composed with a pretrained patch embedding.

    forward(x) is exactly patch_embed(adapter(x)): no normalization or other
    processing is inserted between the two.
    """

    def __init__(self, adapter: CrossModalAdapter, patch_embed, freeze_embedding: bool = True):
        super().__init__()
        self.adapter = adapter
        self.patch_embed = patch_embed
        self.freeze_embedding = freeze_embedding
        self.patch_embed.requires_grad_(not freeze_embedding)

    @property
    def patch_size(self) -> int:
        return self.patch_embed.patch_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Map B x C x H x W input to a B x (H/p) x (W/p) x d_embed token grid."""
        h, w = x.shape[-2], x.shape[-1]
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"spatial size {h}x{w} not divisible by patch size {p}")
        return self.patch_embed(self.adapter(x))


def count_params(module: nn.Module) -> dict:
    """Partition a module's parameters into trainable and frozen totals."""
    trainable = 0
    frozen = 0
    seen = set()
    for p in module.parameters():
        if id(p) in seen:
            continue
        seen.add(id(p))
        if p.requires_grad:
            trainable += p.numel()
        else:
            frozen += p.numel()
    return {"trainable": trainable, "frozen": frozen}
