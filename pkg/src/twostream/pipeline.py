"""End-to-end wiring of the two detection streams over a dataset manifest.

The flow mirrors the deployment protocol: residual features are extracted on
a sliding grid per image, a triplet embedding trained on authentic images
maps them to unit vectors, each test face gets an on-the-fly SVM whose
positives come from other images' background patches, and the appearance
stream scores a resampled crop of the face.  Per-face outputs are fused and
evaluated at face level.  All randomness is derived from one master seed, so
a full rerun is byte-identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import appearance as app
from . import fusion_eval as fe
from . import imagecore as ic
from . import residuals as rd
from . import svmstream as svm
from . import tripletnet as tn


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable in one place; defaults are the pinned operating point."""

    window: int = 128
    stride: int = 64
    truncation: int = 2
    cfa_aware: bool = False
    overlap_threshold: float = 0.5
    margin: float = 0.04
    triplet_count: int = 15000
    triplet_lr0: float = 0.1
    triplet_halve_every: int = 8
    triplet_batch: int = 128
    triplet_epochs: int = 64
    hidden1: int = 1024
    hidden2: int = 512
    svm_c: float = 100.0
    lam: float = 1.0
    lambda_grid: tuple[float, ...] = fe.DEFAULT_LAMBDA_GRID
    appearance_lr0: float = 0.1
    appearance_halve_every: int = 8
    appearance_batch: int = 32
    appearance_epochs: int = 30
    crop_size: int = 64
    crop_pad: float = 0.25
    seed: int = 0
    threads: int = 1


def validate_config(config: PipelineConfig) -> list[str]:
    """Every violated field at once, as 'field: problem' strings."""
    bad = []
    if config.window < 8:
        bad.append(f"window: must be >= 8, got {config.window}")
    if config.stride < 1:
        bad.append(f"stride: must be >= 1, got {config.stride}")
    if config.window >= 8 and config.stride > config.window:
        bad.append(f"stride: must be <= window, got {config.stride} > {config.window}")
    if config.truncation < 1:
        bad.append(f"truncation: must be >= 1, got {config.truncation}")
    if not 0.0 < config.overlap_threshold <= 1.0:
        bad.append(f"overlap_threshold: must be in (0, 1], got {config.overlap_threshold}")
    if not config.margin > 0:
        bad.append(f"margin: must be > 0, got {config.margin}")
    for name in ("triplet_count", "triplet_batch", "triplet_epochs", "hidden1", "hidden2",
                 "appearance_batch", "appearance_epochs"):
        if getattr(config, name) < 1:
            bad.append(f"{name}: must be >= 1, got {getattr(config, name)}")
    for name in ("triplet_lr0", "appearance_lr0", "svm_c"):
        if not getattr(config, name) > 0:
            bad.append(f"{name}: must be > 0, got {getattr(config, name)}")
    for name in ("triplet_halve_every", "appearance_halve_every"):
        if getattr(config, name) < 1:
            bad.append(f"{name}: must be >= 1, got {getattr(config, name)}")
    if config.lam < 0:
        bad.append(f"lam: must be >= 0, got {config.lam}")
    if not config.lambda_grid:
        bad.append("lambda_grid: must be nonempty")
    elif any(g < 0 for g in config.lambda_grid):
        bad.append(f"lambda_grid: values must be >= 0, got {config.lambda_grid}")
    if config.crop_size < 4:
        bad.append(f"crop_size: must be >= 4, got {config.crop_size}")
    if config.crop_pad < 0:
        bad.append(f"crop_pad: must be >= 0, got {config.crop_pad}")
    if config.threads < 1:
        bad.append(f"threads: must be >= 1, got {config.threads}")
    return bad


def derive_seed(master: int, stage: str) -> int:
    """Stable per-stage expansion of the master seed."""
    digest = hashlib.sha256(f"{master}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def feature_config(config: PipelineConfig) -> rd.FeatureConfig:
    return rd.FeatureConfig(truncation=config.truncation, cfa_aware=config.cfa_aware)


def face_id(image: str, index: int) -> str:
    return f"{image}:{index}"


# ---------------------------------------------------------------------------
# Feature extraction


def extract_entry(
    manifest: ic.SpliceManifest, entry: ic.ManifestEntry, config: PipelineConfig, image_index: int = 0
) -> tuple[ic.PatchGrid, list[rd.ResidualFeature]]:
    """Grid plus residual features of one manifest image (luma plane)."""
    img = ic.load_image(manifest.resolve(entry.image))
    grid = ic.make_grid(img, config.window, config.stride)
    feats = rd.extract_grid_features(ic.to_luma(img), grid, feature_config(config), image_id=image_index)
    return grid, feats


def feature_file_name(image: str) -> str:
    return Path(image).stem + ".tsf"


def run_extract(manifest: ic.SpliceManifest, config: PipelineConfig, out_dir) -> dict[str, Path]:
    """One TSF1 file per manifest image; returns image -> file path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for idx, entry in enumerate(manifest.entries):
        _, feats = extract_entry(manifest, entry, config, image_index=idx)
        path = out / feature_file_name(entry.image)
        rd.write_features(path, feats)
        paths[entry.image] = path
    return paths


def load_manifest_features(
    manifest: ic.SpliceManifest, config: PipelineConfig, features_dir=None
) -> dict[str, list[rd.ResidualFeature]]:
    """Features per image: read TSF1 files when present, else extract."""
    out = {}
    for idx, entry in enumerate(manifest.entries):
        if features_dir is not None:
            path = Path(features_dir) / feature_file_name(entry.image)
            if path.is_file():
                out[entry.image] = rd.read_features(path)
                continue
        _, feats = extract_entry(manifest, entry, config, image_index=idx)
        out[entry.image] = feats
    return out


# ---------------------------------------------------------------------------
# Triplet stream


def train_triplet_stream(
    manifest: ic.SpliceManifest,
    features: dict[str, list[rd.ResidualFeature]],
    config: PipelineConfig,
) -> tuple[tn.TripletModel, tn.TrainLog]:
    """Train the embedding on authentic images' patches only."""
    groups = [features[e.image] for e in manifest.authentic_entries() if len(features[e.image]) >= 2]
    if len(groups) < 2:
        raise ValueError(f"need >= 2 authentic images with >= 2 patches, got {len(groups)}")
    triplets = tn.sample_triplets(groups, config.triplet_count, derive_seed(config.seed, "triplets"))
    train_config = tn.TrainConfig(
        margin=config.margin,
        lr0=config.triplet_lr0,
        halve_every=config.triplet_halve_every,
        batch=config.triplet_batch,
        epochs=config.triplet_epochs,
        seed=derive_seed(config.seed, "triplet-train"),
        hidden1=config.hidden1,
        hidden2=config.hidden2,
    )
    return tn.train(triplets, train_config)


@dataclass(frozen=True, eq=False)
class ImageScores:
    """Per-image intermediate state for the patch-SVM protocol."""

    entry: ic.ManifestEntry
    grid: ic.PatchGrid
    embeddings: np.ndarray  # (n_patches, out_dim)
    background: tuple[int, ...]


def prepare_images(
    manifest: ic.SpliceManifest,
    features: dict[str, list[rd.ResidualFeature]],
    model: tn.TripletModel,
    config: PipelineConfig,
) -> list[ImageScores]:
    out = []
    for entry in manifest.entries:
        feats = features[entry.image]
        grid = ic.PatchGrid(
            window=config.window,
            stride=config.stride,
            positions=tuple(f.patch_id[1] for f in feats),
        )
        emb = tn.embed(model, np.stack([f.values for f in feats]))
        background = ic.background_indices(grid, list(entry.faces), config.overlap_threshold)
        out.append(ImageScores(entry=entry, grid=grid, embeddings=emb, background=background))
    return out


def patch_stream_scores(
    images: list[ImageScores], config: PipelineConfig, map_dir=None
) -> dict[str, tuple[float, int]]:
    """Per-face (Sbar, N_q) via one on-the-fly SVM per face.

    Positives are sampled from the pooled patch embeddings of all other
    images, faces included: at scoring time nothing is known about which
    regions of the rest of the corpus are clean, so the foreign class is
    simply "patches of other images".  With map_dir set, a per-image heat
    map PNG averages the per-patch scores of that image's face SVMs.
    """
    out = {}
    for i, img in enumerate(images):
        other = [im.embeddings for j, im in enumerate(images) if j != i and len(im.embeddings)]
        if not other:
            raise ValueError("no other-image patches to draw positives from")
        pool = np.concatenate(other, axis=0)
        per_face_scores = []
        for k, face in enumerate(img.entry.faces):
            partition = ic.Partition(
                face=ic.patch_face_overlap(img.grid, face, config.overlap_threshold).face,
                background=img.background,
            )
            if not partition.face:
                raise ValueError(
                    f"{img.entry.image}: face {k} ({face.w}x{face.h}) covers no grid patch at "
                    f"overlap >= {config.overlap_threshold}; window {config.window} is too large"
                )
            seed = derive_seed(config.seed, f"svm:{img.entry.image}:{k}")
            problem = svm.assemble_problem(img.embeddings, partition, pool, seed=seed)
            model = svm.solve_problem(problem, c=config.svm_c, seed=seed)
            sbar, _ = svm.face_score(model, problem.test)
            out[face_id(img.entry.image, k)] = (sbar, len(partition.face))
            if map_dir is not None:
                per_face_scores.append(svm.score_patches(model, img.embeddings))
        if map_dir is not None and per_face_scores:
            mean_scores = np.mean(per_face_scores, axis=0)
            h = max(p.y + p.h for p in img.grid.positions)
            w = max(p.x + p.w for p in img.grid.positions)
            name = Path(img.entry.image).stem + "_map.png"
            svm.write_score_map(Path(map_dir) / name, img.grid, h, w, mean_scores)
    return out


# ---------------------------------------------------------------------------
# Appearance stream


def collect_crops(
    manifest: ic.SpliceManifest, config: PipelineConfig
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Face crops and labels for appearance training/scoring.

    The crop window is the face box grown by crop_pad on every side so that
    boundary artifacts around a pasted region stay inside the crop.
    """
    crops, labels, ids = [], [], []
    for entry in manifest.entries:
        img = ic.load_image(manifest.resolve(entry.image))
        for k, face in enumerate(entry.faces):
            grown = ic.expand_rect(face, config.crop_pad, img.width, img.height)
            crop = app.crop_resize(img, grown, config.crop_size)
            crops.append(crop.pixels)
            labels.append(1 if entry.tampered_face == k else 0)
            ids.append(face_id(entry.image, k))
    return np.stack(crops), np.array(labels), ids


def train_appearance_stream(
    manifest: ic.SpliceManifest, config: PipelineConfig
) -> tuple[app.AppearanceModel, app.AppearanceTrainLog]:
    crops, labels, _ = collect_crops(manifest, config)
    train_config = app.AppearanceTrainConfig(
        lr0=config.appearance_lr0,
        halve_every=config.appearance_halve_every,
        batch=config.appearance_batch,
        epochs=config.appearance_epochs,
        seed=derive_seed(config.seed, "appearance-train"),
    )
    return app.train_appearance(crops, labels, train_config)


def appearance_scores(
    manifest: ic.SpliceManifest,
    config: PipelineConfig,
    model: app.AppearanceModel | None,
    external: app.ExternalScores | None,
) -> dict[str, float]:
    """Per-face F from the built-in model or an external CSV (identical downstream)."""
    out = {}
    if external is not None:
        for entry in manifest.entries:
            for k in range(len(entry.faces)):
                key = (entry.image, k)
                if key not in external:
                    raise ValueError(f"external scores missing face {key}")
                out[face_id(entry.image, k)] = float(external[key])
        return out
    if model is None:
        raise ValueError("appearance stream needs a model or external scores")
    crops, _, ids = collect_crops(manifest, config)
    scores = app.forward_batch(model, crops)
    return dict(zip(ids, (float(s) for s in scores)))


# ---------------------------------------------------------------------------
# Detection and evaluation


def manifest_face_labels(manifest: ic.SpliceManifest) -> dict[str, int]:
    out = {}
    for entry in manifest.entries:
        for k in range(len(entry.faces)):
            out[face_id(entry.image, k)] = 1 if entry.tampered_face == k else 0
    return out


def build_face_scores(
    manifest: ic.SpliceManifest,
    f_scores: dict[str, float] | None,
    s_scores: dict[str, tuple[float, int]] | None,
    lam: float,
    config: PipelineConfig | None = None,
) -> list[fe.FaceScore]:
    """Join the streams per face; a missing stream contributes 0.

    N_q for faces without patch scores falls back to the geometric patch
    count when a config is supplied, else 1.
    """
    labels = manifest_face_labels(manifest)
    missing = []
    rows = []
    geometry: dict[str, int] = {}
    if s_scores is None and config is not None:
        for entry in manifest.entries:
            img = ic.load_image(manifest.resolve(entry.image))
            grid = ic.make_grid(img, config.window, config.stride)
            for k, face in enumerate(entry.faces):
                part = ic.patch_face_overlap(grid, face, config.overlap_threshold)
                geometry[face_id(entry.image, k)] = max(1, len(part.face))
    for fid, label in sorted(labels.items()):
        f_val = f_scores.get(fid) if f_scores is not None else 0.0
        s_val, n_q = (s_scores.get(fid, (None, 0)) if s_scores is not None else (0.0, geometry.get(fid, 1)))
        if f_val is None or s_val is None:
            missing.append(fid)
            continue
        rows.append(fe.make_face_score(fid, label, f_val, s_val, max(n_q, 1), lam))
    if missing:
        raise ValueError(f"missing scores for faces: {', '.join(missing)}")
    return rows


def detect(
    manifest: ic.SpliceManifest,
    config: PipelineConfig,
    triplet_model: tn.TripletModel | None,
    appearance_model: app.AppearanceModel | None = None,
    external: app.ExternalScores | None = None,
    features_dir=None,
    map_dir=None,
) -> list[fe.FaceScore]:
    """Score every face in the manifest with the available streams."""
    if triplet_model is None and appearance_model is None and external is None:
        raise ValueError("no stream available: need a triplet model, an appearance model, or external scores")
    s_scores = None
    if triplet_model is not None:
        features = load_manifest_features(manifest, config, features_dir)
        images = prepare_images(manifest, features, triplet_model, config)
        s_scores = patch_stream_scores(images, config, map_dir=map_dir)
    f_scores = None
    if appearance_model is not None or external is not None:
        f_scores = appearance_scores(manifest, config, appearance_model, external)
    return build_face_scores(manifest, f_scores, s_scores, config.lam, config)
