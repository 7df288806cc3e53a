"""
Phantom data generator for the LoGoNet toolkit
Rasterizes synthetic volumes with known organ-like objects (ellipsoids,
bent tubes, blobs with corners), adds smoothing and noise in Hounsfield-like
units, scales intensities to [0, 1] and writes LGV1 image/label pairs plus a
manifest
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter
from tqdm import tqdm

from config import RunConfig
from utils.errors import ArgumentError
from utils.storage import (atomic_write, label_path_for, list_volumes, read_volume, scale_intensity,
                           write_resolved_config, write_volume)
from utils.tensor import make_rng

logger = logging.getLogger(__name__)

OBJECT_KINDS = ("ellipsoid", "tube", "blob")

# Stream key of the phantom generator inside make_rng(seed, key, index)
DATA_STREAM = 1

BACKGROUND_HU = -200.0
NOISE_HU = 20.0
SMOOTHING_SIGMA = 0.75


@dataclass
class PhantomObject:
    """One organ-like object of a phantom"""
    kind: str
    center: tuple
    radii: tuple
    class_id: int
    intensity: float


@dataclass
class PhantomSpec:
    """Extents, objects and noise level of one phantom volume"""
    extents: tuple
    objects: list = field(default_factory=list)
    noise_sigma: float = NOISE_HU

    def validate(self, num_classes):
        for obj in self.objects:
            if not 1 <= obj.class_id < num_classes:
                raise ArgumentError(f"object class {obj.class_id} outside [1, {num_classes})")
            if obj.kind not in OBJECT_KINDS:
                raise ArgumentError(f"unknown object kind '{obj.kind}'")


def random_phantom_spec(extents, num_classes, rng, noise_sigma=NOISE_HU):
    """
    One object per foreground class, each placed in its own region of the cube

    Kinds cycle through ellipsoid, tube and blob; intensities are spaced so
    that every class is separable from the background and from the others.
    """
    s, h, w = extents
    objects = []
    foreground = num_classes - 1
    if s * h * w < foreground:
        raise ArgumentError(f"extents {tuple(extents)} hold fewer voxels than {foreground} foreground classes")
    slots = rng.permutation(8)
    for index in range(foreground):
        kind = OBJECT_KINDS[index % len(OBJECT_KINDS)]
        octant = int(slots[index % 8])
        corner = np.array([(octant >> 2) & 1, (octant >> 1) & 1, octant & 1], dtype=np.float64)
        half = np.array([s, h, w], dtype=np.float64) / 2.0
        center = half * (0.5 + corner) + rng.uniform(-0.1, 0.1, size=3) * half
        radii = half * rng.uniform(0.25, 0.4, size=3)
        if kind == "tube":
            radii[0] = half[0] * rng.uniform(0.4, 0.45)
            radii[1:] = half[1:] * 0.15
        intensity = 100.0 + 600.0 * (index + 1) / foreground
        objects.append(PhantomObject(kind, tuple(np.round(center, 3)), tuple(np.round(radii, 3)),
                                     index + 1, float(intensity)))
    spec = PhantomSpec(tuple(extents), objects, noise_sigma)
    spec.validate(num_classes)
    return spec


def _grid(extents):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) + 0.5 for n in extents), indexing="ij")


def rasterize_object(obj, extents):
    """Boolean occupancy of one object"""
    z, y, x = _grid(extents)
    cz, cy, cx = obj.center
    rz, ry, rx = obj.radii
    if obj.kind == "ellipsoid":
        return ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0
    if obj.kind == "tube":
        # centreline bends along y as it runs through the slices
        bend = 0.5 * ry * np.sin(np.pi * (z - cz) / rz)
        inside = ((y - cy - bend) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0
        return inside & (np.abs(z - cz) <= rz)
    body = ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0
    for sign in (-1.0, 1.0):
        lobe = (np.abs(z - (cz + sign * 0.6 * rz)) <= 0.35 * rz) & \
               (np.abs(y - (cy + sign * 0.6 * ry)) <= 0.35 * ry) & \
               (np.abs(x - (cx - sign * 0.6 * rx)) <= 0.35 * rx)
        body |= lobe
    return body


def _reserve_voxel(labels, preferred, center):
    """
    Voxel for a class that lost all of its voxels to later objects

    Picks the voxel nearest `center`, inside `preferred` when possible, whose
    current class still keeps other voxels.
    """
    counts = np.bincount(labels.ravel(), minlength=256)
    free = (labels == 0) | (counts[labels] > 1)
    candidates = free & preferred if (free & preferred).any() else free
    z, y, x = _grid(labels.shape)
    distance = (z - center[0]) ** 2 + (y - center[1]) ** 2 + (x - center[2]) ** 2
    distance[~candidates] = np.inf
    return np.unravel_index(int(np.argmin(distance)), labels.shape)


def rasterize(spec, rng):
    """
    Render a phantom

    Objects are stamped in order, so later objects overwrite earlier ones;
    every object keeps at least one voxel of its class.

    Returns:
        (raw intensities in HU as float64 (S, H, W), labels uint8 (S, H, W))
    """
    labels = np.zeros(spec.extents, dtype=np.uint8)
    raw = np.full(spec.extents, BACKGROUND_HU, dtype=np.float64)
    occupancy = []
    for obj in spec.objects:
        occupied = rasterize_object(obj, spec.extents)
        labels[occupied] = obj.class_id
        raw[occupied] = obj.intensity
        occupancy.append(occupied)
    for obj, occupied in zip(spec.objects, occupancy):
        if (labels == obj.class_id).any():
            continue
        voxel = _reserve_voxel(labels, occupied, obj.center)
        labels[voxel] = obj.class_id
        raw[voxel] = obj.intensity
    raw = gaussian_filter(raw, sigma=SMOOTHING_SIGMA)
    raw += rng.normal(0.0, spec.noise_sigma, size=spec.extents)
    return raw, labels


def make_phantom(index, extents, cfg, seed):
    """
    Deterministic phantom number `index` of a corpus

    Returns:
        (PhantomSpec, image float32 (1, S, H, W) in [b_min, b_max], labels uint8 (S, H, W))
    """
    rng = make_rng(seed, DATA_STREAM, index)
    spec = random_phantom_spec(extents, cfg.num_classes, rng)
    raw, labels = rasterize(spec, rng)
    image = scale_intensity(raw, cfg.a_min, cfg.a_max, cfg.b_min, cfg.b_max, cfg.clip)[None]
    return spec, image, labels


def generate_phantoms(out_dir, count, extents=(32, 32, 32), cfg=None, seed=0):
    """
    Write `count` phantom image/label pairs and their manifest

    Args:
        out_dir: Output directory (created if needed)
        count: Number of volumes; 0 writes nothing
        extents: (S, H, W)
        cfg: RunConfig providing num_classes and the intensity window
        seed: Corpus seed

    Returns:
        Manifest DataFrame (one row per object)
    """
    cfg = cfg or RunConfig()
    if count < 0:
        raise ArgumentError(f"count must be >= 0, got {count}")
    rows = []
    if count == 0:
        return pd.DataFrame(rows, columns=["volume", "object", "kind", "class_id", "center", "radii", "voxels"])
    out_dir = Path(out_dir)
    for index in tqdm(range(count), desc="phantoms", disable=not cfg.progress):
        spec, image, labels = make_phantom(index, extents, cfg, seed)
        name = f"phantom_{index:03d}"
        write_volume(out_dir / f"{name}_image.lgv", image, "f32")
        write_volume(out_dir / f"{name}_label.lgv", labels[None], "u8")
        for position, obj in enumerate(spec.objects):
            rows.append({
                "volume": name,
                "object": position,
                "kind": obj.kind,
                "class_id": obj.class_id,
                "center": " ".join(f"{c:.3f}" for c in obj.center),
                "radii": " ".join(f"{r:.3f}" for r in obj.radii),
                "voxels": int((labels == obj.class_id).sum()),
            })
    manifest = pd.DataFrame(rows)
    with atomic_write(out_dir / "manifest.csv") as handle:
        handle.write(manifest.to_csv(index=False).encode("utf-8"))
    write_resolved_config(cfg, out_dir)
    logger.info("wrote %d phantoms to %s", count, out_dir)
    return manifest


def load_dataset(data_dir, with_labels=True):
    """
    Read every image (and label) volume of a phantom directory

    Returns:
        List of (image float32 (C, S, H, W), labels int64 (S, H, W) or None)
    """
    pairs = []
    for image_path in list_volumes(data_dir):
        image = read_volume(image_path).astype(np.float32)
        labels = None
        if with_labels:
            labels = read_volume(label_path_for(image_path))[0].astype(np.int64)
        pairs.append((image, labels))
    return pairs


def main():
    """Generate a small phantom corpus into ./data/phantoms"""
    print("=" * 60)
    print("LOGONET - PHANTOM GENERATION")
    print("=" * 60)
    print()
    cfg = RunConfig(num_classes=3)
    manifest = generate_phantoms(Path("data") / "phantoms", count=8, cfg=cfg, seed=0)
    print(f"[OK] Successfully created {manifest['volume'].nunique()} phantoms\n")
    print(manifest.groupby("kind")["voxels"].describe().to_string())


if __name__ == "__main__":
    main()
