import numpy as np
import pytest
import torch
from hypothesis import settings

from simcmf.backbone import BackboneConfig
from simcmf.data import InstanceMask, ModalityRecord, decompose_semantic_to_instances
from simcmf.fixture import make_scene, mix_to_nine_channels

settings.register_profile("ci", deadline=None, max_examples=30)
settings.load_profile("ci")


def mini_backbone_config() -> BackboneConfig:
    """Smaller-than-default toy dimensions for fast unit tests."""
    return BackboneConfig(
        patch_size=4, d_embed=32, depth=2, heads=2, variant="toy", img_size=32,
        mlp_ratio=2.0, decoder_dim=32, decoder_depth=2, decoder_heads=2,
        decoder_mlp_dim=64,
    )


@pytest.fixture
def mini_cfg() -> BackboneConfig:
    return mini_backbone_config()


def make_records(n_train=2, n_val=1, channels=3, size=32, seed=0, min_area=12):
    """In-memory records built from procedural scenes."""
    rng = np.random.default_rng(seed)
    records = []
    i = 0
    while len(records) < n_train + n_val:
        rgb, semantic = make_scene(rng, size=size)
        instances = decompose_semantic_to_instances(semantic, min_area=min_area)
        if not instances:
            continue
        if channels == 9:
            image = mix_to_nine_channels(rgb, rng)
        elif channels == 3:
            image = rgb
        else:
            reps = -(-channels // 3)
            image = np.tile(rgb, (reps, 1, 1))[:channels]
        split = "train" if len(records) < n_train else "val"
        records.append(
            ModalityRecord(
                id=f"{split}_{i:03d}", image=image.astype(np.float32),
                channels=channels, instances=instances, split=split,
            )
        )
        i += 1
    return records


@pytest.fixture
def tiny_records():
    return make_records(n_train=2, n_val=1, channels=3, size=32, seed=3)


def single_blob_mask(size=32, center=(16, 16), radius=7) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    return ((ys - center[0]) ** 2 + (xs - center[1]) ** 2 <= radius**2)


def seeded(seed=0):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)
