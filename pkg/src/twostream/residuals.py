"""Noise-residual features: filter bank -> quantize/truncate -> co-occurrence.

A patch's feature vector is the concatenation, over (filter, direction) and
optionally over the four pixel-lattice phases, of normalized joint histograms
of 4-tuples of quantized high-pass residuals.  Every kernel in the bank sums
to zero, so the features see sensor noise and processing traces rather than
image content.

Block order inside the vector is fixed: filters in bank order, horizontal
before vertical, phases (0,0), (0,1), (1,0), (1,1).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .imagecore import Image, PatchGrid, Rect

COOC_ORDER = 4
DIRECTIONS = ("horizontal", "vertical")
PHASES = ((0, 0), (0, 1), (1, 0), (1, 1))

FEATURE_MAGIC = b"TSF1"


@dataclass(frozen=True, eq=False)
class ResidualFilter:
    """A high-pass predictor residual: zero-sum kernel plus quantization step."""

    name: str
    kernel: np.ndarray
    q: float

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        object.__setattr__(self, "kernel", k)
        if k.ndim != 2:
            raise ValueError(f"{self.name}: kernel must be 2-d")
        if abs(k.sum()) > 1e-12:
            raise ValueError(f"{self.name}: kernel coefficients must sum to 0, got {k.sum()}")
        if not self.q > 0:
            raise ValueError(f"{self.name}: quantization step must be > 0, got {self.q}")
        k.setflags(write=False)


def default_filter_bank() -> list[ResidualFilter]:
    """The built-in 4-filter bank: 1st/2nd order differences plus a 3x3 predictor.

    Quantization steps are powers of two so that residual/q is exact in
    float64 and histogram bins are reproducible bit-for-bit.
    """
    return [
        ResidualFilter("D1h", np.array([[-1.0, 1.0]]), 1.0),
        ResidualFilter("D1v", np.array([[-1.0], [1.0]]), 1.0),
        ResidualFilter("D2h", np.array([[1.0, -2.0, 1.0]]), 2.0),
        ResidualFilter(
            "KB",
            np.array([[-1.0, 2.0, -1.0], [2.0, -4.0, 2.0], [-1.0, 2.0, -1.0]]),
            4.0,
        ),
    ]


@dataclass(frozen=True)
class FeatureConfig:
    """Residual feature layout: filter bank, truncation, CFA-phase mode."""

    filters: tuple[ResidualFilter, ...] = field(default_factory=lambda: tuple(default_filter_bank()))
    truncation: int = 2
    cfa_aware: bool = False

    def __post_init__(self):
        if self.truncation < 1:
            raise ValueError(f"truncation must be >= 1, got {self.truncation}")
        if len(self.filters) == 0:
            raise ValueError("at least one filter required")

    @property
    def bins_per_block(self) -> int:
        return (2 * self.truncation + 1) ** COOC_ORDER

    @property
    def dimension(self) -> int:
        d = len(self.filters) * len(DIRECTIONS) * self.bins_per_block
        return d * 4 if self.cfa_aware else d


@dataclass(frozen=True, eq=False)
class ResidualFeature:
    """One patch's feature vector plus its (image id, rect) identity."""

    values: np.ndarray
    patch_id: tuple[int, Rect]


def residual_map(plane: Image | np.ndarray, filt: ResidualFilter) -> np.ndarray:
    """Valid-region correlation (no flip, no padding) of the kernel with the plane.

    Output shape is (H-kh+1, W-kw+1).  Pixels and the default kernels are
    integers, so the result is integer-valued float64, exactly.
    """
    arr = plane.data if isinstance(plane, Image) else plane
    if arr.ndim != 2:
        raise ValueError("residual_map expects a 1-channel plane")
    kh, kw = filt.kernel.shape
    h, w = arr.shape
    if h < kh or w < kw:
        raise ValueError(f"plane {h}x{w} smaller than kernel {kh}x{kw}")
    windows = np.lib.stride_tricks.sliding_window_view(arr.astype(np.float64), (kh, kw))
    return np.einsum("ijkl,kl->ij", windows, filt.kernel)


def quantize_truncate(resid: np.ndarray, q: float, t: int) -> np.ndarray:
    """clamp(round_half_away_from_zero(resid / q), -T, T) as int64.

    Half-away-from-zero is stated explicitly because it moves mass between
    histogram bins at quantization boundaries.
    """
    if not q > 0:
        raise ValueError(f"q must be > 0, got {q}")
    if t < 1:
        raise ValueError(f"T must be >= 1, got {t}")
    scaled = np.asarray(resid, dtype=np.float64) / q
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, -t, t).astype(np.int64)


def _tuple_indices(qmap: np.ndarray, direction: str, t: int) -> np.ndarray:
    """Flat histogram index for every 4-tuple of consecutive entries."""
    base = 2 * t + 1
    if direction == "horizontal":
        if qmap.shape[1] < COOC_ORDER:
            raise ValueError(f"need >= {COOC_ORDER} columns for horizontal co-occurrence")
        parts = [qmap[:, k : qmap.shape[1] - COOC_ORDER + 1 + k] for k in range(COOC_ORDER)]
    elif direction == "vertical":
        if qmap.shape[0] < COOC_ORDER:
            raise ValueError(f"need >= {COOC_ORDER} rows for vertical co-occurrence")
        parts = [qmap[k : qmap.shape[0] - COOC_ORDER + 1 + k, :] for k in range(COOC_ORDER)]
    else:
        raise ValueError(f"unknown direction {direction!r}")
    idx = np.zeros(parts[0].shape, dtype=np.int64)
    for k in range(COOC_ORDER):
        idx += (parts[k] + t) * base**k
    return idx.ravel()


def cooccurrence(qmap: np.ndarray, direction: str, t: int) -> np.ndarray:
    """Normalized histogram over 4-tuples along one direction.

    Index of tuple (v0, v1, v2, v3) is sum_k (v_k + T) (2T+1)^k; counts are
    divided by the number of tuples so the block sums to 1 (all-zero only for
    a degenerate zero-site map).
    """
    idx = _tuple_indices(np.asarray(qmap, dtype=np.int64), direction, t)
    bins = (2 * t + 1) ** COOC_ORDER
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    if idx.size > 0:
        hist /= float(idx.size)
    return hist


def cfa_phase_split(qmap: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """The four (row mod 2, col mod 2) sub-lattices, in phase order.

    Co-occurrences computed inside a sub-lattice are between stride-2
    neighbours of the original map, which is what makes the features
    sensitive to 2x2 mosaic phase.
    """
    q = np.asarray(qmap)
    if q.shape[0] < 2 or q.shape[1] < 2:
        raise ValueError(f"qmap must be at least 2x2, got {q.shape}")
    return tuple(q[r::2, c::2] for r, c in PHASES)


def _feature_blocks(qmap: np.ndarray, config: FeatureConfig) -> list[np.ndarray]:
    t = config.truncation
    blocks = []
    for direction in DIRECTIONS:
        if config.cfa_aware:
            for phase in cfa_phase_split(qmap):
                blocks.append(cooccurrence(phase, direction, t))
        else:
            blocks.append(cooccurrence(qmap, direction, t))
    return blocks


def extract_feature(
    patch: Image | np.ndarray,
    config: FeatureConfig,
    patch_id: tuple[int, Rect] | None = None,
) -> ResidualFeature:
    """Full residual feature of one square patch.

    Concatenates, per filter in bank order, the horizontal then vertical
    (then per-phase) co-occurrence blocks of the quantized residual map.
    """
    arr = patch.data if isinstance(patch, Image) else np.asarray(patch)
    if arr.ndim != 2:
        raise ValueError("extract_feature expects a 1-channel patch")
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"patch must be square, got {arr.shape}")
    blocks = []
    for filt in config.filters:
        qmap = quantize_truncate(residual_map(arr, filt), filt.q, config.truncation)
        blocks.extend(_feature_blocks(qmap, config))
    values = np.concatenate(blocks)
    if values.shape[0] != config.dimension:
        raise AssertionError("feature layout does not match config dimension")
    if patch_id is None:
        patch_id = (0, Rect(0, 0, arr.shape[1], arr.shape[0]))
    return ResidualFeature(values=values, patch_id=patch_id)


def extract_grid_features(
    plane: Image | np.ndarray,
    grid: PatchGrid,
    config: FeatureConfig,
    image_id: int = 0,
) -> list[ResidualFeature]:
    """Features for every grid patch, sharing per-image residual maps.

    Valid correlation is local, so slicing the whole-image quantized residual
    map at a patch equals quantizing that patch's own residual map; results
    are bit-identical to per-patch extract_feature (asserted in tests).
    """
    arr = plane.data if isinstance(plane, Image) else np.asarray(plane)
    if arr.ndim != 2:
        raise ValueError("extract_grid_features expects a 1-channel plane")
    qmaps = []
    for filt in config.filters:
        qmaps.append((filt.kernel.shape, quantize_truncate(residual_map(arr, filt), filt.q, config.truncation)))
    out = []
    for pos in grid.positions:
        blocks = []
        for (kh, kw), qmap in qmaps:
            sub = qmap[pos.y : pos.y + pos.h - kh + 1, pos.x : pos.x + pos.w - kw + 1]
            blocks.extend(_feature_blocks(sub, config))
        out.append(ResidualFeature(values=np.concatenate(blocks), patch_id=(image_id, pos)))
    return out


# ---------------------------------------------------------------------------
# Feature files: "TSF1" | u32 count | u32 dim | count*dim float32 LE rows
#                | count records of (u32 image_id, u32 x, u32 y, u32 w, u32 h)


def write_features(path, features: list[ResidualFeature]) -> None:
    """Serialize features to the TSF1 binary layout (float32 rows)."""
    if not features:
        raise ValueError("refusing to write an empty feature file")
    dim = features[0].values.shape[0]
    for f in features:
        if f.values.shape[0] != dim:
            raise ValueError("all features in one file must share a dimension")
    mat = np.stack([f.values for f in features]).astype("<f4")
    recs = np.array(
        [(f.patch_id[0], f.patch_id[1].x, f.patch_id[1].y, f.patch_id[1].w, f.patch_id[1].h) for f in features],
        dtype="<u4",
    )
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", len(features), dim))
        fh.write(mat.tobytes())
        fh.write(recs.tobytes())


def read_features(path) -> list[ResidualFeature]:
    """Read a TSF1 file back into ResidualFeatures (float64 values)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {FEATURE_MAGIC!r}")
    count, dim = struct.unpack_from("<II", blob, 4)
    need = 12 + count * dim * 4 + count * 20
    if len(blob) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(blob)}")
    mat = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=12).reshape(count, dim)
    recs = np.frombuffer(blob, dtype="<u4", count=count * 5, offset=12 + count * dim * 4).reshape(count, 5)
    out = []
    for row, rec in zip(mat, recs):
        rect = Rect(int(rec[1]), int(rec[2]), int(rec[3]), int(rec[4]))
        out.append(ResidualFeature(values=row.astype(np.float64), patch_id=(int(rec[0]), rect)))
    return out
