"""Synthetic desk-scale data: procedural blob scenes, a fixed 3-to-9 channel
mixing that emulates a multi-channel sensor, dataset writers, and a quick
promptable-segmentation pretraining for the toy backbone.

Everything here is seed-deterministic so pipelines built on the fixture are
reproducible end to end.
"""

import json
from pathlib import Path

import numpy as np
import torch

from .archive import save_image
from .backbone import BackboneConfig, build_backbone
from .data import (
    decompose_semantic_to_instances,
    make_pseudo_modality,
    save_id_map_png,
)
from .train import TrainConfig, segmentation_loss

PALETTE = {
    1: (0.85, 0.25, 0.20),
    2: (0.20, 0.80, 0.30),
    3: (0.25, 0.35, 0.90),
}

# Rows 0-2 pass the natural channels through; the rest are correlated mixtures
# with offsets, so the 9-channel signal is an invertible recombination.
MIXING_MATRIX = np.array(
    [
        [1.00, 0.00, 0.00],
        [0.00, 1.00, 0.00],
        [0.00, 0.00, 1.00],
        [0.50, 0.50, 0.00],
        [0.00, 0.50, 0.50],
        [0.50, 0.00, 0.50],
        [1 / 3, 1 / 3, 1 / 3],
        [0.60, -0.40, 0.40],
        [-0.30, 0.70, 0.30],
    ],
    dtype=np.float32,
)
MIXING_OFFSET = np.array(
    [0, 0, 0, 0, 0, 0, 0, 0.30, 0.25], dtype=np.float32
)


def make_scene(rng: np.random.Generator, size: int = 64, max_blobs: int = 3):
    """One procedural scene: (rgb 3xHxW in [0,1], semantic HxW int32).

    Well-separated elliptical blobs from a 3-class palette over a smooth noisy
    background. Classes repeat across blobs, so semantic maps regularly
    contain disconnected same-class regions.
    """
    coarse = rng.uniform(0.20, 0.45, size=(3, 4, 4)).astype(np.float32)
    bg = torch.nn.functional.interpolate(
        torch.from_numpy(coarse)[None], size=(size, size), mode="bilinear",
        align_corners=False,
    )[0].numpy()
    rgb = bg + rng.normal(0, 0.01, size=(3, size, size)).astype(np.float32)
    semantic = np.zeros((size, size), dtype=np.int32)

    ys, xs = np.mgrid[0:size, 0:size]
    n_blobs = int(rng.integers(2, max_blobs + 1))
    placed = []
    for _ in range(n_blobs):
        class_id = int(rng.integers(1, 4))
        color = np.array(PALETTE[class_id]) + rng.uniform(-0.08, 0.08, 3)
        for _ in range(20):  # rejection-sample a center clear of earlier blobs
            cy, cx = rng.uniform(size * 0.2, size * 0.8, 2)
            ry, rx = rng.uniform(size * 0.12, size * 0.21, 2)
            r = max(ry, rx)
            if all((cy - py) ** 2 + (cx - px) ** 2 > (r + pr + 2) ** 2
                   for py, px, pr in placed):
                break
        else:
            continue
        placed.append((cy, cx, r))
        theta = rng.uniform(0, np.pi)
        dy, dx = ys - cy, xs - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        inside = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
        semantic[inside] = class_id
        for c in range(3):
            rgb[c][inside] = color[c]
    rgb += rng.normal(0, 0.015, size=rgb.shape).astype(np.float32)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32), semantic


def mix_to_nine_channels(rgb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Project an RGB scene into the fixed 9-channel sensor space."""
    mixed = np.einsum("kc,chw->khw", MIXING_MATRIX, rgb) + MIXING_OFFSET[:, None, None]
    mixed = mixed + rng.normal(0, 0.01, size=mixed.shape).astype(np.float32)
    return np.clip(mixed, 0.0, 1.0).astype(np.float32)


def write_fixture(out_dir, n_train: int = 8, n_val: int = 4, seed: int = 0,
                  size: int = 64, pseudo: bool = False) -> Path:
    """Write a synthetic multi-channel dataset with semantic labels.

    Default: 9-channel mixed-sensor images. With `pseudo`, 4-channel
    shuffled natural-plus-derived stacks whose permutation is recorded per
    record (so the natural-image reference stays recoverable).
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_train + n_val):
        split = "train" if i < n_train else "val"
        rec_id = f"{split}_{i:03d}"
        rgb, semantic = make_scene(rng, size=size)
        if pseudo:
            derived = (0.5 * rgb[0] + 0.5 * rgb[1])[None]  # luminance-like extra band
            image, perm = make_pseudo_modality(rgb, derived, seed=seed * 1000 + i)
            permutation = [int(p) for p in perm]
        else:
            image = mix_to_nine_channels(rgb, rng)
            permutation = None
        save_image(out_dir / "images" / f"{rec_id}.cmf", image)
        save_id_map_png(out_dir / "labels" / f"{rec_id}.png", semantic.astype(np.uint16))
        entry = {
            "id": rec_id,
            "image_path": f"images/{rec_id}.cmf",
            "channels": int(image.shape[0]),
            "label_path": f"labels/{rec_id}.png",
            "label_kind": "semantic",
            "split": split,
        }
        if permutation is not None:
            entry["permutation"] = permutation
        records.append(entry)
    manifest = {"version": 1, "records": records}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def scene_batch(rng: np.random.Generator, batch_size: int, size: int = 64,
                min_area: int = 12):
    """Fresh training batch of RGB scenes with one sampled instance each."""
    images, clicks, targets = [], [], []
    while len(images) < batch_size:
        rgb, semantic = make_scene(rng, size=size)
        instances = decompose_semantic_to_instances(semantic, min_area=min_area)
        if not instances:
            continue
        inst = instances[int(rng.integers(len(instances)))]
        images.append(torch.from_numpy(rgb))
        clicks.append([float(inst.click[0]), float(inst.click[1])])
        targets.append(torch.from_numpy(inst.mask.astype(np.float32)))
    return (
        torch.stack(images),
        torch.tensor(clicks, dtype=torch.float32),
        torch.stack(targets),
    )


def pretrain_backbone(config: BackboneConfig | None = None, steps: int = 700,
                      batch_size: int = 4, lr: float = 1e-3, seed: int = 0):
    """Pretrain a toy backbone on an endless stream of RGB blob scenes.

    This plays the role of the released foundation checkpoint at desk scale:
    the result segments procedural blobs from a click on natural (3-channel)
    input and is the donor of the pretrained patch embedding.
    """
    config = config or BackboneConfig.toy()
    model = build_backbone(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    loss_cfg = TrainConfig(seed=seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for step in range(steps):
        if step == int(steps * 0.7):
            for group in optimizer.param_groups:
                group["lr"] = lr * 0.3
        images, clicks, targets = scene_batch(rng, batch_size, size=config.img_size)
        mask_logits, scores = model(images, clicks)
        loss = segmentation_loss(mask_logits, scores, targets, loss_cfg)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    model.eval()
    return model
