"""Dataset layout scanning, synthetic desk-scale data, and persistence.

Dataset layout on disk::

    <root>/{train,test}/images/*.png|*.tif|*.tiff
    <root>/{train,test}/masks/<image-stem>_mask*.png

A flat ``<root>/images`` + ``<root>/masks`` layout (no split directories)
is also accepted and tagged ``unsplit``.  Every image needs at least one
mask; images without one are reported and skipped.

Checkpoints are single ``.npz`` archives: a JSON header (format version,
variant, input size, seed, build options) plus every parameter and
batch-norm buffer keyed by its module path.  Writes go through a
temp-file rename so a crash cannot leave a torn file.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CheckpointError, InputError
from .models import ModelGraph, build_model
from .preprocessing import CasePair

CHECKPOINT_VERSION = 1

IMAGE_EXTENSIONS = (".png", ".tif", ".tiff")


# --------------------------------------------------------------- image I/O


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale image as an unsigned integer array."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.int64)
            if arr.min() < 0 or arr.max() > 65535:
                raise InputError(f"{path}: pixel values outside 16-bit range")
            return arr.astype(np.uint16)
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8)


def save_image_u8(path, array01: np.ndarray) -> None:
    """Write a [0,1] float array as an 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(array01), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    return (load_image(path) > 0).astype(np.uint8)


# ----------------------------------------------------------------- layouts


@dataclass
class ManifestEntry:
    source_id: str
    image_path: str
    mask_paths: list[str]
    split_tag: str = "unsplit"


@dataclass
class DatasetManifest:
    root: str
    profile: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split_tag == tag]

    def to_json(self) -> str:
        return json.dumps(
            {
                "root": self.root,
                "profile": self.profile,
                "entries": [vars(e) for e in self.entries],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        return cls(
            root=raw["root"],
            profile=raw["profile"],
            entries=[ManifestEntry(**e) for e in raw["entries"]],
        )


def _scan_split(images_dir: Path, masks_dir: Path, tag: str) -> list[ManifestEntry]:
    entries = []
    for img_path in sorted(images_dir.iterdir()):
        if img_path.suffix.lower() not in IMAGE_EXTENSIONS or img_path.name.startswith("."):
            continue
        stem = img_path.stem
        if "_mask" in stem:
            continue
        masks = sorted(masks_dir.glob(f"{stem}_mask*")) if masks_dir.is_dir() else []
        masks = [m for m in masks if m.suffix.lower() in IMAGE_EXTENSIONS]
        if not masks:
            warnings.warn(f"{img_path}: no mask files matched {stem}_mask*; skipping")
            continue
        entries.append(
            ManifestEntry(
                source_id=f"{tag}/{stem}" if tag != "unsplit" else stem,
                image_path=str(img_path),
                mask_paths=[str(m) for m in masks],
                split_tag=tag,
            )
        )
    return entries


def scan_dataset(root, profile: str = "none") -> DatasetManifest:
    """Pair every image under ``root`` with its ``_mask*`` files."""
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"dataset root does not exist: {root}")
    entries: list[ManifestEntry] = []
    split_dirs = [d for d in ("train", "test", "val") if (root / d / "images").is_dir()]
    if split_dirs:
        for tag in split_dirs:
            entries.extend(_scan_split(root / tag / "images", root / tag / "masks", tag))
    elif (root / "images").is_dir():
        entries.extend(_scan_split(root / "images", root / "masks", "unsplit"))
    else:
        raise InputError(
            f"{root}: expected <root>/{{train,test}}/images or <root>/images layout"
        )
    entries.sort(key=lambda e: e.source_id)
    if not entries:
        raise InputError(f"{root}: no valid image/mask pairs found")
    return DatasetManifest(root=str(root), profile=profile, entries=entries)


def load_case_files(entry: ManifestEntry) -> tuple[np.ndarray, list[np.ndarray]]:
    img = load_image(entry.image_path)
    masks = [load_mask(p) for p in entry.mask_paths]
    return img, masks


# ------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    """Recipe for a reproducible blob-segmentation dataset."""

    n_cases: int = 20
    size: int = 64
    blob_count_range: tuple[int, int] = (1, 3)
    blob_radius_range: tuple[int, int] | None = None
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.size < 32 or self.size % 16:
            raise InputError(f"synthetic size must be a multiple of 16 >= 32, got {self.size}")
        if self.blob_radius_range is None:
            self.blob_radius_range = (max(3, self.size // 10), max(4, self.size // 5))
        lo, hi = self.blob_radius_range
        if not 0 < lo <= hi < self.size / 2:
            raise InputError(f"blob radii must satisfy 0 < lo <= hi < size/2, got {self.blob_radius_range}")
        if self.n_cases < 1:
            raise InputError("n_cases must be >= 1")


def generate_synthetic(spec: SyntheticSpec) -> list[CasePair]:
    """Bright rotated ellipses on a dark noisy background, exact masks.

    Foreground fraction is kept inside (0, 0.5) by construction: blobs are
    redrawn until the union stays under half the image.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cases = []
    for idx in range(spec.n_cases):
        while True:
            mask = np.zeros((size, size), dtype=bool)
            n_blobs = int(rng.integers(spec.blob_count_range[0], spec.blob_count_range[1] + 1))
            for _ in range(n_blobs):
                cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
                a = rng.uniform(*spec.blob_radius_range)
                b = rng.uniform(*spec.blob_radius_range)
                theta = rng.uniform(0.0, np.pi)
                ct, st = np.cos(theta), np.sin(theta)
                u = (yy - cy) * ct + (xx - cx) * st
                v = -(yy - cy) * st + (xx - cx) * ct
                mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
            frac = mask.mean()
            if 0.0 < frac < 0.5:
                break
        image = np.full((size, size), 0.12, dtype=np.float64)
        image[mask] = 0.85
        image += rng.normal(0.0, spec.noise_std, size=(size, size))
        image = np.clip(image, 0.0, 1.0)
        cases.append(
            CasePair(
                image=image,
                mask=mask.astype(np.uint8),
                source_id=f"synthetic_{idx:04d}",
                applied_steps=[{"step": "synthetic", "seed": spec.seed, "index": idx}],
            )
        )
    return cases


def write_dataset(cases: list[CasePair], out_root, split: str | None = None) -> Path:
    """Write cases to the standard on-disk layout; returns the images dir."""
    out_root = Path(out_root)
    base = out_root / split if split else out_root
    images = base / "images"
    masks = base / "masks"
    images.mkdir(parents=True, exist_ok=True)
    masks.mkdir(parents=True, exist_ok=True)
    for case in cases:
        stem = case.source_id.replace("/", "_")
        save_image_u8(images / f"{stem}.png", case.image)
        save_mask(masks / f"{stem}_mask.png", case.mask)
    return images


# ------------------------------------------------------------ checkpoints


def save_checkpoint(graph: ModelGraph, path) -> None:
    """Persist a built graph: header + parameters + batch-norm buffers."""
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "variant": graph.variant,
        "input_size": graph.input_size,
        "input_channels": graph.input_channels,
        "seed": graph.seed,
        "dtype": graph.dtype,
        "options": graph.options,
    }
    arrays = {f"param/{k}": p.data for k, p in graph.net.named_parameters()}
    arrays.update({f"buffer/{k}": b for k, b in graph.net.named_buffers()})
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, expect_variant: str | None = None) -> ModelGraph:
    """Rebuild the graph described by a checkpoint, restoring every array."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        if "header" not in archive:
            raise CheckpointError(f"{path}: missing checkpoint header")
        header = json.loads(bytes(archive["header"]).decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {header.get('format_version')}"
            )
        if expect_variant is not None and header["variant"] != expect_variant:
            raise CheckpointError(
                f"checkpoint holds variant {header['variant']!r} but {expect_variant!r} "
                f"was requested"
            )
        graph = build_model(
            header["variant"],
            header["input_size"],
            seed=header["seed"],
            input_channels=header["input_channels"],
            dtype=np.dtype(header["dtype"]),
            **header["options"],
        )
        params = dict(graph.net.named_parameters())
        buffers = dict(graph.net.named_buffers())
        for key in archive.files:
            if key == "header":
                continue
            kind, _, name = key.partition("/")
            if kind == "param":
                if name not in params:
                    raise CheckpointError(f"{path}: unknown parameter {name!r}")
                if params[name].data.shape != archive[key].shape:
                    raise CheckpointError(f"{path}: shape mismatch for {name!r}")
                params[name].data = archive[key].copy()
            elif kind == "buffer":
                if name not in buffers:
                    raise CheckpointError(f"{path}: unknown buffer {name!r}")
                buffers[name][...] = archive[key]
            else:
                raise CheckpointError(f"{path}: unexpected key {key!r}")
        missing = set(params) - {k.partition("/")[2] for k in archive.files if k.startswith("param/")}
        if missing:
            raise CheckpointError(f"{path}: checkpoint missing parameters: {sorted(missing)[:5]}")
    return graph
