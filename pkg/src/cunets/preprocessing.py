"""Whole-mammogram preprocessing.

Raw scans come in as unsigned-integer grayscale arrays with scanner
borders, label tags, and poor contrast.  The pipeline steps here are all
pure functions over arrays; :func:`preprocess_case` chains them per
dataset profile and records exactly what was applied:

``cbis_ddsm``   crop borders, drop background artifacts, scale to [0,1],
                CLAHE, fuse masks, pad square, resize
``inbreast``    scale to [0,1], CLAHE, fuse masks, pad square, resize
``none``        scale to [0,1], fuse masks, pad square, resize

Masks ride along through every geometric step (crop, pad, resize) so
image/mask alignment is preserved; intensity steps never touch them.

The numeric defaults (border fraction 0.02 per edge, CLAHE clip limit
0.01 with an 8x8 tile grid) are working assumptions, not measured
values; all are overridable per call and from the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

PROFILES = ("cbis_ddsm", "inbreast", "none")

MIN_DIM = 64

DEFAULT_BORDER_FRACTION = 0.02
DEFAULT_CLIP_LIMIT = 0.01
DEFAULT_TILES = (8, 8)
CLAHE_BINS = 256


@dataclass
class CasePair:
    """One model-ready case: square [0,1] image, binary mask, provenance."""

    image: np.ndarray
    mask: np.ndarray
    source_id: str
    applied_steps: list = field(default_factory=list)

    def validate(self) -> None:
        if self.image.shape != self.mask.shape:
            raise InputError(
                f"{self.source_id}: image {self.image.shape} vs mask {self.mask.shape}"
            )
        if self.image.shape[0] != self.image.shape[1]:
            raise InputError(f"{self.source_id}: case is not square: {self.image.shape}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise InputError(f"{self.source_id}: image values leave [0,1]")
        if not np.isin(self.mask, (0, 1)).all():
            raise InputError(f"{self.source_id}: mask is not binary")


def crop_borders(img: np.ndarray, fraction: float) -> np.ndarray:
    """Strip floor(fraction * dim) pixels from each of the four edges."""
    if not 0.0 <= fraction < 0.25:
        raise InputError(f"border fraction must be in [0, 0.25), got {fraction}")
    h, w = img.shape
    dh, dw = int(fraction * h), int(fraction * w)
    out = img[dh: h - dh, dw: w - dw]
    if out.shape[0] < MIN_DIM or out.shape[1] < MIN_DIM:
        raise InputError(
            f"border crop of {fraction} leaves {out.shape[0]}x{out.shape[1]}, "
            f"smaller than {MIN_DIM}x{MIN_DIM}"
        )
    return out


def border_crop_amounts(shape: tuple[int, int], fraction: float) -> tuple[int, int]:
    """(rows, cols) removed per edge; shared by image and mask crops."""
    return int(fraction * shape[0]), int(fraction * shape[1])


def otsu_threshold(img: np.ndarray, bins: int = 256) -> float:
    """Otsu's between-class-variance threshold on the image histogram."""
    flat = np.asarray(img).ravel()
    lo, hi = float(flat.min()), float(flat.max())
    if hi <= lo:
        return lo
    hist, edges = np.histogram(flat, bins=bins, range=(lo, hi))
    p = hist.astype(np.float64) / flat.size
    omega = np.cumsum(p)
    centers = (edges[:-1] + edges[1:]) / 2.0
    mu = np.cumsum(p * centers)
    mu_total = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_total * omega - mu) ** 2 / (omega * (1.0 - omega))
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(np.argmax(between))])


def _runs_of_row(row: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate(([False], row, [False]))
    changes = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(changes[0::2], changes[1::2]))


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected component labels via run-length union-find.

    Returns (labels, count); labels are 1..count, background 0.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    runs = []  # (row, start, end, run_id)
    row_runs: list[list[int]] = []
    for r in range(h):
        ids = []
        for start, end in _runs_of_row(mask[r]):
            ids.append(len(runs))
            runs.append((r, int(start), int(end)))
        row_runs.append(ids)

    parent = list(range(len(runs)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[rj] = ri

    for r in range(1, h):
        for i in row_runs[r]:
            _, s1, e1 = runs[i]
            for j in row_runs[r - 1]:
                _, s2, e2 = runs[j]
                # 8-connectivity: half-open column ranges touch or overlap diagonally
                if e1 >= s2 and e2 >= s1:
                    union(i, j)

    labels = np.zeros((h, w), dtype=np.int32)
    root_label: dict[int, int] = {}
    for idx, (r, s, e) in enumerate(runs):
        root = find(idx)
        lab = root_label.setdefault(root, len(root_label) + 1)
        labels[r, s:e] = lab
    return labels, len(root_label)


def remove_artifacts(img: np.ndarray) -> np.ndarray:
    """Keep the largest 8-connected above-Otsu component; zero the rest.

    Scanner tags and border remnants are smaller bright components than
    the breast, so the area argmax isolates the breast region.
    """
    img = np.asarray(img)
    thr = otsu_threshold(img)
    fg = img > thr
    if not fg.any():
        raise InputError("artifact removal found no foreground above the Otsu threshold")
    labels, count = label_components(fg)
    areas = np.bincount(labels.ravel(), minlength=count + 1)
    areas[0] = 0
    keep = int(np.argmax(areas))
    out = np.where(labels == keep, img, 0)
    return out.astype(img.dtype)


def normalize(img: np.ndarray) -> np.ndarray:
    """Scale unsigned-integer pixels into [0,1] by the dtype maximum."""
    img = np.asarray(img)
    if img.dtype.kind == "u":
        denom = float(np.iinfo(img.dtype).max)
    elif img.dtype.kind == "i":
        denom = float(np.iinfo(img.dtype).max)
    elif img.dtype.kind == "f":
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise InputError("float input to normalize must already lie in [0,1]")
        return img.astype(np.float64)
    else:
        raise InputError(f"cannot normalize dtype {img.dtype}")
    return img.astype(np.float64) / denom


def apply_clahe(
    img: np.ndarray,
    clip_limit: float = DEFAULT_CLIP_LIMIT,
    tiles: tuple[int, int] = DEFAULT_TILES,
) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on a [0,1] image.

    Classic tile scheme: clip each tile histogram at ``clip_limit`` times
    the tile pixel count, redistribute the excess uniformly, equalize,
    and blend neighboring tile mappings bilinearly.  Tiles with zero
    contrast map identically, so constant images pass through unchanged.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.min() < 0.0 or img.max() > 1.0:
        raise InputError("CLAHE input must lie in [0,1]")
    ty, tx = int(tiles[0]), int(tiles[1])
    h, w = img.shape
    if ty < 1 or tx < 1:
        raise InputError(f"tile grid must be positive, got {tiles}")
    if ty > h or tx > w:
        raise InputError(f"tile grid {tiles} exceeds image size {h}x{w}")

    tile_h = -(-h // ty)  # ceil
    tile_w = -(-w // tx)
    pad_h, pad_w = tile_h * ty - h, tile_w * tx - w
    work = np.pad(img, ((0, pad_h), (0, pad_w)), mode="reflect") if (pad_h or pad_w) else img
    hp, wp = work.shape

    bins = np.minimum((work * CLAHE_BINS).astype(np.int64), CLAHE_BINS - 1)
    luts = np.empty((ty, tx, CLAHE_BINS), dtype=np.float64)
    flat = np.zeros((ty, tx), dtype=bool)
    npix = tile_h * tile_w
    clip_count = max(1.0, clip_limit * npix)
    for i in range(ty):
        for j in range(tx):
            tile_bins = bins[i * tile_h:(i + 1) * tile_h, j * tile_w:(j + 1) * tile_w]
            hist = np.bincount(tile_bins.ravel(), minlength=CLAHE_BINS).astype(np.float64)
            if np.count_nonzero(hist) <= 1:
                flat[i, j] = True
                continue
            excess = np.maximum(hist - clip_count, 0.0).sum()
            hist = np.minimum(hist, clip_count) + excess / CLAHE_BINS
            cdf = np.cumsum(hist)
            cmin = cdf[np.searchsorted(cdf, 0.0, side="right")] if cdf[0] == 0.0 else cdf[0]
            denom = max(cdf[-1] - cmin, 1e-12)
            luts[i, j] = np.clip((cdf - cmin) / denom, 0.0, 1.0)

    if flat.all():
        return img.copy()  # no tile has contrast: exact identity

    # bilinear blend between the four surrounding tile centers
    yy = (np.arange(hp) + 0.5) / tile_h - 0.5
    xx = (np.arange(wp) + 0.5) / tile_w - 0.5
    y0 = np.clip(np.floor(yy).astype(np.int64), 0, ty - 1)
    x0 = np.clip(np.floor(xx).astype(np.int64), 0, tx - 1)
    y1 = np.minimum(y0 + 1, ty - 1)
    x1 = np.minimum(x0 + 1, tx - 1)
    wy = np.clip(yy - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xx - x0, 0.0, 1.0)[None, :]

    out = np.zeros_like(work)
    for tyi, txi, wgt in (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x1, (1 - wy) * wx),
        (y1, x0, wy * (1 - wx)),
        (y1, x1, wy * wx),
    ):
        iy = tyi[:, None] if tyi.ndim == 1 else tyi
        ix = txi[None, :] if txi.ndim == 1 else txi
        value = luts[iy, ix, bins]
        is_flat = flat[iy, ix]
        out += wgt * np.where(is_flat, work, value)
    return np.clip(out[:h, :w], 0.0, 1.0)


def fuse_masks(masks: list[np.ndarray]) -> np.ndarray:
    """Pixelwise union of all annotator masks for one image."""
    if not masks:
        raise InputError("fuse_masks needs at least one mask")
    first = np.asarray(masks[0])
    out = first.astype(bool)
    for m in masks[1:]:
        m = np.asarray(m)
        if m.shape != first.shape:
            raise InputError(f"mask shapes differ: {first.shape} vs {m.shape}")
        out |= m.astype(bool)
    return out.astype(np.uint8)


def pad_to_square(img: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad the shorter dimension symmetrically (extra pixel trails)."""
    img, mask = np.asarray(img), np.asarray(mask)
    if img.shape != mask.shape:
        raise InputError(f"image {img.shape} and mask {mask.shape} differ")
    h, w = img.shape
    if h == w:
        return img, mask
    if h < w:
        diff = w - h
        pad = ((diff // 2, diff - diff // 2), (0, 0))
    else:
        diff = h - w
        pad = ((0, 0), (diff // 2, diff - diff // 2))
    return np.pad(img, pad), np.pad(mask, pad)


def square_pad_offsets(shape: tuple[int, int]) -> tuple[int, int]:
    """(row, col) offset of the original content inside the padded square."""
    h, w = shape
    if h < w:
        return (w - h) // 2, 0
    if w < h:
        return 0, (h - w) // 2
    return 0, 0


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-center bilinear resample to size x size."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h == size and w == size:
        return img.copy()
    sy, sx = h / size, w / size
    yy = (np.arange(size) + 0.5) * sy - 0.5
    xx = (np.arange(size) + 0.5) * sx - 0.5
    y0 = np.clip(np.floor(yy), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xx), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(yy - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xx - x0, 0.0, 1.0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bottom = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-center nearest-neighbor resample (for masks)."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if h == size and w == size:
        return mask.copy()
    yy = np.clip(np.floor((np.arange(size) + 0.5) * h / size), 0, h - 1).astype(np.int64)
    xx = np.clip(np.floor((np.arange(size) + 0.5) * w / size), 0, w - 1).astype(np.int64)
    return mask[np.ix_(yy, xx)]


def preprocess_case(
    img: np.ndarray,
    masks: list[np.ndarray],
    profile: str = "cbis_ddsm",
    target_size: int = 224,
    source_id: str = "case",
    border_fraction: float = DEFAULT_BORDER_FRACTION,
    clip_limit: float = DEFAULT_CLIP_LIMIT,
    tiles: tuple[int, int] = DEFAULT_TILES,
) -> CasePair:
    """Run the profile's step chain over one image and its masks."""
    if profile not in PROFILES:
        raise InputError(f"unknown profile {profile!r}; choose from {PROFILES}")
    if not masks:
        raise InputError(f"{source_id}: no masks supplied")
    img = np.asarray(img)
    masks = [np.asarray(m) for m in masks]
    for m in masks:
        if m.shape != img.shape:
            raise InputError(f"{source_id}: mask shape {m.shape} != image shape {img.shape}")

    steps: list[dict] = []

    if profile == "cbis_ddsm" and border_fraction > 0:
        img = crop_borders(img, border_fraction)
        masks = [crop_borders(m, border_fraction) for m in masks]
        steps.append({"step": "crop_borders", "fraction": border_fraction})
    if profile == "cbis_ddsm":
        img = remove_artifacts(img)
        steps.append({"step": "remove_artifacts", "method": "otsu+largest_component"})

    image = normalize(img)
    steps.append({"step": "normalize"})

    if profile in ("cbis_ddsm", "inbreast"):
        image = apply_clahe(image, clip_limit=clip_limit, tiles=tiles)
        steps.append({"step": "clahe", "clip_limit": clip_limit, "tiles": list(tiles)})

    mask = fuse_masks([(m > 0).astype(np.uint8) for m in masks])
    steps.append({"step": "fuse_masks", "count": len(masks)})

    image, mask = pad_to_square(image, mask)
    steps.append({"step": "pad_to_square"})

    image = np.clip(resize_bilinear(image, target_size), 0.0, 1.0)
    mask = (resize_nearest(mask, target_size) > 0).astype(np.uint8)
    steps.append({"step": "resize", "size": target_size,
                  "image": "bilinear", "mask": "nearest"})

    pair = CasePair(image=image, mask=mask, source_id=source_id, applied_steps=steps)
    pair.validate()
    return pair
