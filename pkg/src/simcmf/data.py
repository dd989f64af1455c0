"""Dataset ingestion and benchmark construction for multi-channel modalities.

Semantic label maps are decomposed into pixel-connected instances, each of
which gets a deterministic interior click point. Images travel in the tensor
archive format (standard image formats cap at 4 channels); instance id maps
are 16-bit single-channel PNGs.
"""

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .archive import load_image

DEFAULT_MIN_AREA = 20

CONNECTIVITY_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
    8: np.ones((3, 3), dtype=bool),
}


class ManifestError(Exception):
    """Raised for malformed manifests or records that fail validation."""


@dataclass
class InstanceMask:
    """One instance: a binary mask, its pixel area, and the click prompt."""

    mask: np.ndarray
    area: int
    click: tuple
    instance_id: int = 0
    class_id: int = 0


@dataclass
class ModalityRecord:
    """One multi-channel sample with its decomposed instances."""

    id: str
    image: np.ndarray  # C x H x W float32
    channels: int
    instances: list
    split: str = "train"
    permutation: list | None = None
    rgb_path: str | None = None
    _base_dir: Path | None = None

    def rgb_reference(self) -> np.ndarray:
        """Recover the 3-channel natural-image reference of a pseudo-modality.

        Uses an explicit rgb_path when the manifest provides one; otherwise
        inverts the recorded channel permutation (the first three channels of
        the unshuffled stack are the natural image).
        """
        if self.rgb_path is not None:
            base = self._base_dir or Path(".")
            return _load_image_any(base / self.rgb_path).astype(np.float32)
        if self.permutation is not None:
            inverse = np.argsort(np.asarray(self.permutation))
            return self.image[inverse][:3]
        raise ManifestError(
            f"record '{self.id}' has no natural-image reference "
            f"(no rgb_path and no recorded channel permutation)"
        )


def compute_click(mask: np.ndarray) -> tuple:
    """Interior pixel farthest from the mask boundary (image border counts as
    boundary). Ties break to the smallest row, then column, so the point is
    deterministic; for concave shapes it is still guaranteed to lie inside."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not mask.any():
        raise ValueError("cannot place a click in an empty mask")
    padded = np.pad(mask, 1)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    flat = int(np.argmax(dist))  # argmax returns the first max in row-major order
    r, c = np.unravel_index(flat, mask.shape)
    return (int(r), int(c))


def decompose_semantic_to_instances(
    semantic_map: np.ndarray,
    min_area: int = DEFAULT_MIN_AREA,
    connectivity: int = 8,
) -> list:
    """Split a semantic label grid (0 = background) into connected instances.

    Every maximal pixel-connected component of every nonzero class becomes one
    instance; components smaller than `min_area` are dropped.
    """
    semantic_map = np.asarray(semantic_map)
    if not np.issubdtype(semantic_map.dtype, np.integer):
        raise ValueError(f"semantic map must be integer-typed, got {semantic_map.dtype}")
    if connectivity not in CONNECTIVITY_STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = CONNECTIVITY_STRUCTURES[connectivity]
    instances = []
    next_id = 1
    for class_id in sorted(int(v) for v in np.unique(semantic_map) if v != 0):
        labeled, n_comp = ndimage.label(semantic_map == class_id, structure=structure)
        for comp in range(1, n_comp + 1):
            mask = labeled == comp
            area = int(mask.sum())
            if area < min_area:
                continue
            instances.append(
                InstanceMask(
                    mask=mask,
                    area=area,
                    click=compute_click(mask),
                    instance_id=next_id,
                    class_id=class_id,
                )
            )
            next_id += 1
    return instances


def instances_to_id_map(instances: list, shape: tuple) -> np.ndarray:
    """Pack instances into a uint16 id map (0 = background)."""
    id_map = np.zeros(shape, dtype=np.uint16)
    for inst in instances:
        id_map[inst.mask] = inst.instance_id
    return id_map


def id_map_to_instances(id_map: np.ndarray, min_area: int = 1) -> list:
    instances = []
    for instance_id in sorted(int(v) for v in np.unique(id_map) if v != 0):
        mask = id_map == instance_id
        area = int(mask.sum())
        if area < min_area or area == 0:
            continue
        instances.append(
            InstanceMask(mask=mask, area=area, click=compute_click(mask),
                         instance_id=instance_id)
        )
    return instances


def save_id_map_png(path, id_map: np.ndarray) -> None:
    if id_map.max() > np.iinfo(np.uint16).max:
        raise ValueError("more than 65535 instances cannot be stored in a 16-bit PNG")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(id_map.astype(np.uint16), mode="I;16").save(path)


def load_id_map_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint16)


def make_pseudo_modality(rgb: np.ndarray, extra: np.ndarray, seed: int):
    """Concatenate a natural image with another modality and shuffle channels.

    The permutation is seed-deterministic and returned so the manifest can
    record it; indexing with its argsort recovers the concatenation exactly.
    """
    rgb = np.asarray(rgb)
    extra = np.asarray(extra)
    if rgb.ndim != 3 or extra.ndim != 3:
        raise ValueError("expected C x H x W arrays")
    if rgb.shape[1:] != extra.shape[1:]:
        raise ValueError(
            f"spatial shape mismatch: rgb {rgb.shape[1:]} vs extra {extra.shape[1:]}"
        )
    stacked = np.concatenate([rgb, extra], axis=0)
    perm = np.random.default_rng(seed).permutation(stacked.shape[0])
    return stacked[perm], perm


def subsample(records: list, ratio: float, seed: int) -> list:
    """Deterministic training subset of ceil(ratio * N) records.

    Records are ranked by the SHA-256 of "{seed}:{record id}"; the first
    ceil(ratio * N) in that ranking are kept, in their original order.
    """
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    k = math.ceil(ratio * len(records))

    def key(record):
        return hashlib.sha256(f"{seed}:{record.id}".encode()).hexdigest()

    keep = {r.id for r in sorted(records, key=key)[:k]}
    return [r for r in records if r.id in keep]


def _load_image_any(path: Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".cmf":
        return load_image(path)
    arr = np.asarray(Image.open(path)).astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def load_manifest(manifest_path) -> dict:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    if "records" not in manifest or not isinstance(manifest["records"], list):
        raise ManifestError(f"manifest {manifest_path} has no 'records' list")
    return manifest


def load_dataset(manifest_path, min_area: int = DEFAULT_MIN_AREA,
                 connectivity: int = 8) -> list:
    """Load every record in a manifest at native resolution.

    Semantic labels are decomposed on the fly; instance labels are read from
    their 16-bit id maps. Per-channel normalization recorded in the manifest
    is applied to the images.
    """
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    norm = manifest.get("normalization")
    records = []
    for entry in manifest["records"]:
        rec_id = entry.get("id", "<missing id>")
        for req in ("id", "image_path", "channels", "label_path", "label_kind", "split"):
            if req not in entry:
                raise ManifestError(f"record '{rec_id}' missing field '{req}'")
        image_path = base / entry["image_path"]
        if not image_path.exists():
            raise ManifestError(f"record '{rec_id}': image file not found: {image_path}")
        image = _load_image_any(image_path).astype(np.float32)
        if image.shape[0] != entry["channels"]:
            raise ManifestError(
                f"record '{rec_id}': manifest claims {entry['channels']} channels "
                f"but {image_path.name} has {image.shape[0]}"
            )
        if norm is not None:
            image = apply_normalization(image, norm)
        label_path = base / entry["label_path"]
        if not label_path.exists():
            raise ManifestError(f"record '{rec_id}': label file not found: {label_path}")
        id_or_sem = load_id_map_png(label_path)
        if id_or_sem.shape != image.shape[1:]:
            raise ManifestError(
                f"record '{rec_id}': label shape {id_or_sem.shape} does not match "
                f"image spatial shape {image.shape[1:]}"
            )
        if entry["label_kind"] == "semantic":
            instances = decompose_semantic_to_instances(
                id_or_sem.astype(np.int32), min_area=min_area, connectivity=connectivity
            )
        elif entry["label_kind"] == "instance":
            instances = id_map_to_instances(id_or_sem)
        else:
            raise ManifestError(
                f"record '{rec_id}': label_kind must be 'semantic' or 'instance', "
                f"got {entry['label_kind']!r}"
            )
        records.append(
            ModalityRecord(
                id=entry["id"],
                image=image,
                channels=entry["channels"],
                instances=instances,
                split=entry["split"],
                permutation=entry.get("permutation"),
                rgb_path=entry.get("rgb_path"),
                _base_dir=base,
            )
        )
    return records


def compute_normalization(records: list) -> dict:
    """Per-channel min/max over the training split (falls back to all records)."""
    train = [r for r in records if r.split == "train"] or records
    mins = np.min([r.image.min(axis=(1, 2)) for r in train], axis=0)
    maxs = np.max([r.image.max(axis=(1, 2)) for r in train], axis=0)
    return {"min": [float(v) for v in mins], "max": [float(v) for v in maxs]}


def apply_normalization(image: np.ndarray, norm: dict) -> np.ndarray:
    mins = np.asarray(norm["min"], dtype=np.float32)[:, None, None]
    maxs = np.asarray(norm["max"], dtype=np.float32)[:, None, None]
    span = np.where(maxs - mins > 0, maxs - mins, 1.0)
    return ((image - mins) / span).astype(np.float32)


def resize_for_model(record: ModalityRecord, size: int = 1024) -> ModalityRecord:
    """Resize a record: bilinear for the image, nearest for masks (so they stay
    binary). Clicks are recomputed on the resized masks; instances that vanish
    at the new resolution are dropped."""
    image = torch.from_numpy(record.image)[None]
    resized = F.interpolate(image, size=(size, size), mode="bilinear", align_corners=False)
    id_map = instances_to_id_map(record.instances, record.image.shape[1:])
    ids = torch.from_numpy(id_map.astype(np.int32))[None, None].float()
    ids_resized = F.interpolate(ids, size=(size, size), mode="nearest")
    id_map_resized = ids_resized[0, 0].numpy().astype(np.uint16)
    instances = []
    for inst in record.instances:
        mask = id_map_resized == inst.instance_id
        area = int(mask.sum())
        if area == 0:
            continue
        instances.append(
            InstanceMask(mask=mask, area=area, click=compute_click(mask),
                         instance_id=inst.instance_id, class_id=inst.class_id)
        )
    return ModalityRecord(
        id=record.id,
        image=resized[0].numpy().astype(np.float32),
        channels=record.channels,
        instances=instances,
        split=record.split,
        permutation=record.permutation,
        rgb_path=record.rgb_path,
        _base_dir=record._base_dir,
    )


def prepare_dataset(manifest_path, out_dir, min_area: int = DEFAULT_MIN_AREA,
                    connectivity: int = 8) -> Path:
    """Materialize a click-prompt benchmark from a raw manifest.

    Semantic labels become instance id maps on disk, per-channel min/max
    normalization is computed from the train split, and a prepared manifest
    referencing the original images is written under `out_dir`.
    """
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    labels_dir = out_dir / "labels"
    labels_dir.mkdir(parents=True, exist_ok=True)

    raw_records = load_dataset(manifest_path, min_area=min_area, connectivity=connectivity)
    norm = manifest.get("normalization")
    if norm is None:
        # no normalization in the raw manifest means raw_records hold raw pixels
        norm = compute_normalization(raw_records)
    entries = []
    for entry, record in zip(manifest["records"], raw_records):
        id_map = instances_to_id_map(record.instances, record.image.shape[1:])
        label_rel = f"labels/{record.id}.png"
        save_id_map_png(out_dir / label_rel, id_map)
        image_abs = (base / entry["image_path"]).resolve()
        new_entry = dict(entry)
        new_entry["image_path"] = _relative_or_absolute(image_abs, out_dir)
        new_entry["label_path"] = label_rel
        new_entry["label_kind"] = "instance"
        entries.append(new_entry)
    prepared = {
        "version": 1,
        "normalization": norm,
        "min_area": min_area,
        "connectivity": connectivity,
        "records": entries,
    }
    out_path = out_dir / "manifest.json"
    out_path.write_text(json.dumps(prepared, indent=2, sort_keys=True) + "\n")
    return out_path


def _relative_or_absolute(target: Path, start: Path) -> str:
    try:
        return str(Path(target).resolve().relative_to(Path(start).resolve()))
    except ValueError:
        import os

        return os.path.relpath(Path(target).resolve(), Path(start).resolve())
