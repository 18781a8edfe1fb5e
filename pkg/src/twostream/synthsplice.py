"""Ground-truthed synthetic splices: donor regions pasted into host images.

Each output is either an untouched host re-encoded at the host quality
(label authentic) or a composite (label tampered): a donor image is
re-encoded at the donor quality, a region of it is rescaled, alpha-feathered
and pasted into the host, optional noise is added inside the region, and the
result is re-encoded at the host quality.  The JPEG quality asymmetry between
donor and host is the controllable noise-statistics signal; face boxes are
the pasted region's bounding box plus decoy boxes over authentic content.

Per-output randomness comes from (seed, index), so any output can be
regenerated alone and parallel generation agrees with serial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagecore import (
    AUTHENTIC,
    TAMPERED,
    Image,
    ManifestEntry,
    Rect,
    SpliceManifest,
    jpeg_cycle,
    resize_bilinear,
    save_jpeg,
    save_manifest,
    save_png,
)

SHAPES = ("rectangle", "ellipse")


@dataclass(frozen=True)
class SpliceRecipe:
    host_quality: int = 95
    donor_quality: int = 60
    shape: str = "ellipse"
    size_range: tuple[int, int] = (64, 128)
    feather: int = 4
    rescale_range: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 0.0
    decoy_count: int = 1
    seed: int = 0

    def __post_init__(self):
        for name, q in (("host_quality", self.host_quality), ("donor_quality", self.donor_quality)):
            if not 1 <= q <= 100:
                raise ValueError(f"{name} must be in [1, 100], got {q}")
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        lo, hi = self.size_range
        if not (8 <= lo <= hi):
            raise ValueError(f"size_range must satisfy 8 <= lo <= hi, got {self.size_range}")
        if self.feather < 0:
            raise ValueError(f"feather must be >= 0, got {self.feather}")
        rlo, rhi = self.rescale_range
        if not (0 < rlo <= rhi):
            raise ValueError(f"rescale_range must satisfy 0 < lo <= hi, got {self.rescale_range}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.decoy_count < 1:
            raise ValueError(f"decoy_count must be >= 1, got {self.decoy_count}")


@dataclass(frozen=True, eq=False)
class SpliceResult:
    """One generated image: final pixels, pre-encode pixels, truth mask, boxes."""

    composite: Image  # after host-quality re-encode; what a consumer sees
    raw: Image  # before that re-encode; emit writes this as JPEG
    mask: np.ndarray | None  # bool (H, W), None for authentic outputs
    boxes: tuple[Rect, ...]
    tampered_index: int | None
    donor_info: str = ""

    @property
    def label(self) -> str:
        return AUTHENTIC if self.mask is None else TAMPERED


def _index_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def is_tampered_index(recipe: SpliceRecipe, index: int) -> bool:
    """The label draw for one output; synthesize makes the same draw first."""
    return _index_rng(recipe.seed, index).random() < 0.5


def make_alpha(shape: str, size: int, feather: int) -> np.ndarray:
    """Blend weights for a pasted region, on a box that contains the full ramp.

    The ramp is linear over `feather` pixels and centered on the region
    boundary, so alpha > 0.5 exactly inside the nominal shape: an s x s square
    for rectangles, a disc of radius s/2 + 0.5 for ellipses (the half pixel
    keeps small rasterized discs at least pi/4 of the square's area).
    """
    if shape not in SHAPES:
        raise ValueError(f"shape must be one of {SHAPES}, got {shape!r}")
    pad = 0 if feather == 0 else feather // 2 + 1
    box = size + 2 * pad
    c = (box - 1) / 2.0
    di = np.abs(np.arange(box) - c)
    if shape == "rectangle":
        d = size / 2.0 - np.maximum(di[:, None], di[None, :])
    else:
        d = (size / 2.0 + 0.5) - np.sqrt(di[:, None] ** 2 + di[None, :] ** 2)
    if feather == 0:
        return (d > 0).astype(np.float64)
    return np.clip(0.5 + d / feather, 0.0, 1.0)


def compose_splice(
    host: Image,
    donor_patch: np.ndarray,
    x0: int,
    y0: int,
    alpha: np.ndarray,
    noise_sigma: float = 0.0,
    noise_rng: np.random.Generator | None = None,
) -> tuple[Image, np.ndarray]:
    """Alpha-blend a donor patch over the host at (x0, y0).

    donor_patch is float64 with the same box size as alpha; Gaussian noise is
    added only where alpha > 0.5 (the mask).  Returns the uint8 composite and
    the full-size boolean mask.
    """
    box = alpha.shape[0]
    if alpha.shape != (box, box) or donor_patch.shape[:2] != (box, box):
        raise ValueError(f"alpha {alpha.shape} and donor patch {donor_patch.shape} disagree")
    if x0 < 0 or y0 < 0 or x0 + box > host.width or y0 + box > host.height:
        raise ValueError(f"paste box ({x0},{y0},{box}) falls outside {host.width}x{host.height} host")

    out = host.data.astype(np.float64)
    region = out[y0 : y0 + box, x0 : x0 + box]
    a = alpha if host.channels == 1 else alpha[:, :, None]
    blended = a * donor_patch + (1.0 - a) * region
    local_mask = alpha > 0.5
    if noise_sigma > 0.0:
        if noise_rng is None:
            raise ValueError("noise_sigma > 0 requires a noise rng")
        noise = noise_rng.normal(0.0, noise_sigma, size=blended.shape)
        blended = np.where(local_mask if host.channels == 1 else local_mask[:, :, None],
                           blended + noise, blended)
    out[y0 : y0 + box, x0 : x0 + box] = blended
    pixels = np.clip(np.floor(out + 0.5), 0.0, 255.0).astype(np.uint8)
    mask = np.zeros((host.height, host.width), dtype=bool)
    mask[y0 : y0 + box, x0 : x0 + box] = local_mask
    return Image(pixels), mask


def mask_bbox(mask: np.ndarray) -> Rect:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("mask is empty")
    return Rect(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def _place_decoys(
    rng: np.random.Generator,
    width: int,
    height: int,
    count: int,
    size_range: tuple[int, int],
    keep_clear: list[Rect],
) -> list[Rect]:
    """Random boxes that avoid keep_clear and each other; bounded retries."""
    placed: list[Rect] = []
    lo, hi = size_range
    for _ in range(count):
        for _attempt in range(200):
            s = int(rng.integers(lo, hi + 1))
            if s >= width or s >= height:
                continue
            x = int(rng.integers(0, width - s + 1))
            y = int(rng.integers(0, height - s + 1))
            box = Rect(x, y, s, s)
            if all(box.intersection_area(other) == 0 for other in keep_clear + placed):
                placed.append(box)
                break
        else:
            raise RuntimeError(
                f"could not place a decoy box after 200 attempts ({width}x{height}, size {size_range})"
            )
    return placed


def _synth_one(hosts: list[Image], donors: list[Image], recipe: SpliceRecipe, index: int) -> SpliceResult:
    rng = _index_rng(recipe.seed, index)
    tampered = rng.random() < 0.5
    host = hosts[int(rng.integers(len(hosts)))]

    if not tampered:
        boxes = _place_decoys(
            rng, host.width, host.height, recipe.decoy_count + 1, recipe.size_range, []
        )
        return SpliceResult(
            composite=jpeg_cycle(host, recipe.host_quality),
            raw=host,
            mask=None,
            boxes=tuple(boxes),
            tampered_index=None,
        )

    donor_i = int(rng.integers(len(donors)))
    donor = jpeg_cycle(donors[donor_i], recipe.donor_quality)
    size = int(rng.integers(recipe.size_range[0], recipe.size_range[1] + 1))
    rescale = float(rng.uniform(*recipe.rescale_range))
    alpha = make_alpha(recipe.shape, size, recipe.feather)
    box = alpha.shape[0]
    if box > host.width or box > host.height:
        raise ValueError(f"region box {box} exceeds host {host.width}x{host.height}")

    src = max(8, int(round(box / rescale)))
    if src > donor.width or src > donor.height:
        raise ValueError(f"source region {src} exceeds donor {donor.width}x{donor.height}")
    sx = int(rng.integers(0, donor.width - src + 1))
    sy = int(rng.integers(0, donor.height - src + 1))
    source = donor.data[sy : sy + src, sx : sx + src].astype(np.float64)
    if donor.channels == 1:
        patch = resize_bilinear(source, box, box)
    else:
        patch = np.stack([resize_bilinear(source[:, :, ch], box, box) for ch in range(3)], axis=-1)

    x0 = int(rng.integers(0, host.width - box + 1))
    y0 = int(rng.integers(0, host.height - box + 1))
    raw, mask = compose_splice(
        host, patch, x0, y0, alpha, noise_sigma=recipe.noise_sigma, noise_rng=rng
    )
    face = mask_bbox(mask)
    decoys = _place_decoys(
        rng, host.width, host.height, recipe.decoy_count, recipe.size_range, [face]
    )
    slot = int(rng.integers(len(decoys) + 1))
    boxes = decoys[:slot] + [face] + decoys[slot:]
    return SpliceResult(
        composite=jpeg_cycle(raw, recipe.host_quality),
        raw=raw,
        mask=mask,
        boxes=tuple(boxes),
        tampered_index=slot,
        donor_info=f"donor={donor_i};q_d={recipe.donor_quality};size={size};"
        f"rescale={rescale:.4f};shape={recipe.shape}",
    )


def synthesize(hosts: list[Image], donors: list[Image], recipe: SpliceRecipe, n: int) -> list[SpliceResult]:
    """Generate n outputs, each authentic with probability one half."""
    if not hosts or not donors:
        raise ValueError("host and donor pools must be nonempty")
    for pool, name in ((hosts, "host"), (donors, "donor")):
        for img in pool:
            if img.width < 256 or img.height < 256:
                raise ValueError(f"{name} images must be at least 256x256, got {img.width}x{img.height}")
    return [_synth_one(hosts, donors, recipe, i) for i in range(n)]


def emit_manifest(results: list[SpliceResult], recipe: SpliceRecipe, out_dir) -> SpliceManifest:
    """Write images, masks, and manifest.json; returns the manifest.

    Composites are stored as JPEG at the host quality (the raw pixels are
    encoded once, at write time, so the decoded file equals the in-memory
    composite).  Host quality 100 means lossless, so those are PNGs.
    """
    from pathlib import Path

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, res in enumerate(results):
        if recipe.host_quality == 100:
            image_name = f"img_{i:04d}.png"
            save_png(res.raw, root / image_name)
        else:
            image_name = f"img_{i:04d}.jpg"
            save_jpeg(res.raw, root / image_name, recipe.host_quality)
        mask_name = None
        if res.mask is not None:
            mask_name = f"mask_{i:04d}.png"
            save_png(Image(res.mask.astype(np.uint8) * 255), root / mask_name)
        entries.append(
            ManifestEntry(
                image=image_name,
                label=res.label,
                faces=res.boxes,
                tampered_face=res.tampered_index,
                mask=mask_name,
                donor_info=res.donor_info,
            )
        )
    manifest = SpliceManifest(entries=tuple(entries), root=root)
    save_manifest(manifest, root / "manifest.json")
    return manifest


def make_texture_pool(count: int, size: int = 256, seed: int = 0, channels: int = 3) -> list[Image]:
    """Synthetic camera-ish images: smooth color fields, shapes, and grain.

    Stand-ins for photographs in tests and demos.  The grain matters: JPEG
    re-encoding at different qualities must leave measurably different
    noise statistics, which needs high-frequency content to quantize.  Every
    image is drawn from one generative process with a fixed grain amplitude,
    so no image carries a noise-level or sharpness identity of its own:
    content pasted between pool images is never foreign by residual
    statistics alone, which keeps quality asymmetry the controllable signal.
    """
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        base = rng.uniform(40.0, 215.0, size=(4, 4, channels))
        field = np.stack(
            [resize_bilinear(base[:, :, ch], size, size) for ch in range(channels)], axis=-1
        )
        yy, xx = np.mgrid[0:size, 0:size]
        for _shape in range(int(rng.integers(3, 7))):
            cx, cy = rng.uniform(0, size, size=2)
            r = rng.uniform(size / 16, size / 4)
            tint = rng.uniform(-60.0, 60.0, size=channels)
            blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * r * r))
            field += blob[:, :, None] * tint
        field += rng.normal(0.0, 6.0, size=field.shape)
        pixels = np.clip(np.floor(field + 0.5), 0.0, 255.0).astype(np.uint8)
        out.append(Image(pixels[:, :, 0] if channels == 1 else pixels))
    return out
