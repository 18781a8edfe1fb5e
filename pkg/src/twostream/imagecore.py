"""Images, rectangles, sliding-window grids, and dataset manifests.

Everything downstream (residual features, SVM protocol, synthesis) works on
the types defined here.  All types are immutable after construction and all
operations are pure functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage
from PIL import UnidentifiedImageError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

AUTHENTIC = "authentic"
TAMPERED = "tampered"


class DecodeError(ValueError):
    """File exists but its bytes cannot be decoded as PNG/JPEG."""


class UnsupportedImageError(ValueError):
    """Decodable image, but not 8-bit 1- or 3-channel."""


class ManifestError(ValueError):
    """Manifest file violates the documented schema or its invariants."""


@dataclass(frozen=True, eq=False)
class Image:
    """8-bit image, (H, W) or (H, W, 3) uint8 row-major."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.dtype != np.uint8:
            raise ValueError(f"image data must be uint8, got {d.dtype}")
        if d.ndim == 3 and d.shape[2] != 3:
            raise ValueError(f"3-d image data must have 3 channels, got {d.shape[2]}")
        if d.ndim not in (2, 3):
            raise ValueError(f"image data must be 2-d or 3-d, got {d.ndim}-d")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        d.setflags(write=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]


@dataclass(frozen=True, order=True)
class Rect:
    """Axis-aligned rectangle, top-left (x, y), extent (w, h), in pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"rect extent must be >= 1, got {self.w}x{self.h}")

    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    def intersection_area(self, other: "Rect") -> int:
        ix = min(self.x + self.w, other.x + other.w) - max(self.x, other.x)
        iy = min(self.y + self.h, other.y + other.h) - max(self.y, other.y)
        if ix <= 0 or iy <= 0:
            return 0
        return ix * iy


@dataclass(frozen=True)
class PatchGrid:
    """All window placements at offsets k*stride fully inside the image, row-major."""

    window: int
    stride: int
    positions: tuple[Rect, ...]


@dataclass(frozen=True)
class Partition:
    """Indices into a grid's positions, split into face and background patches."""

    face: tuple[int, ...]
    background: tuple[int, ...]


def load_image(path) -> Image:
    """Decode a PNG or JPEG file into an 8-bit 1- or 3-channel Image.

    Raises FileNotFoundError, DecodeError, or UnsupportedImageError so the
    three failure classes stay distinguishable.
    """
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such image file: {p}")
    try:
        with _PILImage.open(p) as pil:
            pil.load()
            mode = pil.mode
            if mode == "P":
                pil = pil.convert("RGB")
                mode = "RGB"
            if mode == "L":
                arr = np.asarray(pil, dtype=np.uint8)
            elif mode == "RGB":
                arr = np.asarray(pil, dtype=np.uint8)
            else:
                raise UnsupportedImageError(
                    f"{p}: mode {mode!r} not supported (8-bit 1- or 3-channel only)"
                )
    except UnsupportedImageError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"{p}: cannot decode: {exc}") from exc
    return Image(np.ascontiguousarray(arr))


def save_png(img: Image, path) -> None:
    """Write a lossless PNG (load_image round-trips it bit-identically)."""
    _PILImage.fromarray(img.data).save(Path(path), format="PNG")


def save_jpeg(img: Image, path, quality: int) -> None:
    """Write a JPEG at the given quality, 1-100."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    _PILImage.fromarray(img.data).save(Path(path), format="JPEG", quality=quality)


def jpeg_cycle(img: Image, quality: int) -> Image:
    """Encode to JPEG in memory at `quality` and decode back.

    Quality 100 is treated as a lossless passthrough so that identity-style
    recipes (self-splice) are exact; Pillow's quality=100 still quantizes.
    """
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    if quality == 100:
        return img
    import io

    buf = io.BytesIO()
    _PILImage.fromarray(img.data).save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    with _PILImage.open(buf) as pil:
        arr = np.asarray(pil.convert("RGB") if img.channels == 3 else pil.convert("L"), dtype=np.uint8)
    return Image(np.ascontiguousarray(arr))


def to_luma(img: Image) -> Image:
    """Collapse to one channel: round(0.299 R + 0.587 G + 0.114 B), clamped.

    1-channel input is returned unchanged (idempotent).
    """
    if img.channels == 1:
        return img
    rgb = img.data.astype(np.float64)
    y = rgb[:, :, 0] * LUMA_WEIGHTS[0] + rgb[:, :, 1] * LUMA_WEIGHTS[1] + rgb[:, :, 2] * LUMA_WEIGHTS[2]
    out = np.clip(np.floor(y + 0.5), 0.0, 255.0).astype(np.uint8)
    return Image(out)


def make_grid(img: Image, window: int = 128, stride: int = 64) -> PatchGrid:
    """Enumerate window placements at multiples of stride, row-major.

    Windows must lie fully inside the image; images smaller than the window
    are rejected rather than padded (padding would fabricate statistics).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if window > img.width or window > img.height:
        raise ValueError(
            f"window {window} exceeds image {img.width}x{img.height}"
        )
    xs = range(0, img.width - window + 1, stride)
    ys = range(0, img.height - window + 1, stride)
    positions = tuple(Rect(x, y, window, window) for y in ys for x in xs)
    return PatchGrid(window=window, stride=stride, positions=positions)


def patch_face_overlap(grid: PatchGrid, face: Rect, threshold: float = 0.5) -> Partition:
    """Partition grid patches by overlap with a face box.

    A patch is a face patch iff area(patch & face) / area(patch) >= threshold.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    face_idx = []
    bg_idx = []
    for i, pos in enumerate(grid.positions):
        frac = pos.intersection_area(face) / pos.area()
        (face_idx if frac >= threshold else bg_idx).append(i)
    return Partition(face=tuple(face_idx), background=tuple(bg_idx))


def background_indices(grid: PatchGrid, faces: list[Rect], threshold: float = 0.5) -> tuple[int, ...]:
    """Patches assigned to none of the given face boxes (negatives in the SVM protocol)."""
    in_any = set()
    for face in faces:
        in_any.update(patch_face_overlap(grid, face, threshold).face)
    return tuple(i for i in range(len(grid.positions)) if i not in in_any)


def crop(img: Image, rect: Rect) -> Image:
    """Cut a rectangle out of an image (copy)."""
    if not rect.inside(img.width, img.height):
        raise ValueError(f"{rect} not inside {img.width}x{img.height} image")
    return Image(np.ascontiguousarray(img.data[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w]))


def expand_rect(rect: Rect, pad_frac: float, width: int, height: int) -> Rect:
    """Grow a rect by pad_frac of its extent on every side, clamped to the image."""
    px = int(round(rect.w * pad_frac))
    py = int(round(rect.h * pad_frac))
    x0 = max(0, rect.x - px)
    y0 = max(0, rect.y - py)
    x1 = min(width, rect.x + rect.w + px)
    y1 = min(height, rect.y + rect.h + py)
    return Rect(x0, y0, x1 - x0, y1 - y0)


def resize_bilinear(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a 2-d array to (out_h, out_w), float64 output.

    Half-pixel-center convention: src = (dst + 0.5) * scale - 0.5, clamped at
    the borders.  The identity mapping (same size) reproduces the input
    exactly.
    """
    if plane.ndim != 2:
        raise ValueError("resize_bilinear expects a 2-d array")
    h, w = plane.shape
    src = plane.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - wx) + src[np.ix_(y0, x1)] * wx
    bot = src[np.ix_(y1, x0)] * (1 - wx) + src[np.ix_(y1, x1)] * wx
    return top * (1 - wy[:, :]) + bot * wy[:, :]


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class ManifestEntry:
    """One dataset image: label, face boxes, and ground truth."""

    image: str
    label: str
    faces: tuple[Rect, ...]
    tampered_face: int | None
    mask: str | None
    donor_info: str = ""


@dataclass(frozen=True)
class SpliceManifest:
    """A list of entries plus the directory their relative paths resolve against."""

    entries: tuple[ManifestEntry, ...]
    root: Path

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def authentic_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label == AUTHENTIC]

    def tampered_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label == TAMPERED]


def _validate_entry(e: ManifestEntry, where: str) -> None:
    if e.label not in (AUTHENTIC, TAMPERED):
        raise ManifestError(f"{where}: label must be authentic|tampered, got {e.label!r}")
    if e.label == TAMPERED:
        if e.tampered_face is None or not 0 <= e.tampered_face < len(e.faces):
            raise ManifestError(
                f"{where}: tampered entry must name exactly one face index, got {e.tampered_face!r}"
            )
    elif e.tampered_face is not None:
        raise ManifestError(f"{where}: authentic entry must not name a tampered face")


def save_manifest(manifest: SpliceManifest, path) -> None:
    """Write the manifest as a UTF-8 JSON array with the documented keys."""
    rows = []
    for e in manifest.entries:
        rows.append(
            {
                "image": e.image,
                "label": e.label,
                "faces": [[r.x, r.y, r.w, r.h] for r in e.faces],
                "tampered_face": e.tampered_face,
                "mask": e.mask,
                "donor_info": e.donor_info,
            }
        )
    Path(path).write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> SpliceManifest:
    """Parse and validate a manifest JSON file.

    With check_files (the default) every referenced image/mask must exist,
    resolved against the manifest's own directory.
    """
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such manifest: {p}")
    try:
        rows = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{p}: invalid JSON: {exc}") from exc
    if not isinstance(rows, list):
        raise ManifestError(f"{p}: top level must be a JSON array")
    entries = []
    for i, row in enumerate(rows):
        where = f"{p} entry {i}"
        try:
            faces = tuple(Rect(int(x), int(y), int(w), int(h)) for x, y, w, h in row["faces"])
            entry = ManifestEntry(
                image=str(row["image"]),
                label=str(row["label"]),
                faces=faces,
                tampered_face=None if row["tampered_face"] is None else int(row["tampered_face"]),
                mask=None if row["mask"] is None else str(row["mask"]),
                donor_info=str(row.get("donor_info", "")),
            )
        except ManifestError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{where}: malformed: {exc}") from exc
        _validate_entry(entry, where)
        entries.append(entry)
    manifest = SpliceManifest(entries=tuple(entries), root=p.parent)
    if check_files:
        missing = []
        for e in manifest.entries:
            if not manifest.resolve(e.image).is_file():
                missing.append(e.image)
            if e.mask is not None and not manifest.resolve(e.mask).is_file():
                missing.append(e.mask)
        if missing:
            raise ManifestError(f"{p}: referenced files missing: {', '.join(missing)}")
    return manifest
