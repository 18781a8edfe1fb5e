"""Command-line surface: synth, extract, train-triplet, train-appearance, detect, evaluate.

Every tunable is a config-file key AND a flag with the same name (flags
override the file, the file overrides built-in defaults).  The config file is
flat `key = value` text.  Errors print one line `error:<category>: <message>`
to stderr and exit nonzero; config problems are reported all at once.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import appearance as app
from . import fusion_eval as fe
from . import imagecore as ic
from . import pipeline as pl
from . import synthsplice as ss
from . import tripletnet as tn

# field name -> (type tag, default, help); single source for flags and file keys
_P = pl.PipelineConfig()
CONFIG_FIELDS: dict[str, tuple[str, object, str]] = {
    "window": ("int", _P.window, "patch window side in pixels"),
    "stride": ("int", _P.stride, "grid stride in pixels"),
    "truncation": ("int", _P.truncation, "residual truncation threshold T"),
    "cfa_aware": ("bool", _P.cfa_aware, "split residual co-occurrences by 2x2 lattice phase"),
    "overlap_threshold": ("float", _P.overlap_threshold, "patch/face overlap fraction for face patches"),
    "margin": ("float", _P.margin, "triplet hinge margin m"),
    "triplet_count": ("int", _P.triplet_count, "number of training triplets to sample"),
    "triplet_lr0": ("float", _P.triplet_lr0, "triplet initial learning rate"),
    "triplet_halve_every": ("int", _P.triplet_halve_every, "epochs between triplet lr halvings"),
    "triplet_batch": ("int", _P.triplet_batch, "triplet SGD batch size"),
    "triplet_epochs": ("int", _P.triplet_epochs, "triplet training epochs"),
    "hidden1": ("int", _P.hidden1, "embedding first hidden width"),
    "hidden2": ("int", _P.hidden2, "embedding output width"),
    "svm_c": ("float", _P.svm_c, "SVM regularization C"),
    "lam": ("float", _P.lam, "fusion weight lambda"),
    "lambda_grid": ("floats", _P.lambda_grid, "comma-separated lambda calibration grid"),
    "appearance_lr0": ("float", _P.appearance_lr0, "appearance initial learning rate"),
    "appearance_halve_every": ("int", _P.appearance_halve_every, "epochs between appearance lr halvings"),
    "appearance_batch": ("int", _P.appearance_batch, "appearance SGD batch size"),
    "appearance_epochs": ("int", _P.appearance_epochs, "appearance training epochs"),
    "crop_size": ("int", _P.crop_size, "appearance crop side in pixels"),
    "crop_pad": ("float", _P.crop_pad, "fractional padding around faces before cropping"),
    "seed": ("int", _P.seed, "master seed; per-stage seeds derive from it"),
    "threads": ("int", _P.threads, "worker threads (current implementation is single-threaded)"),
    "out_dir": ("str", "twostream-out", "directory for all outputs"),
    # synthesis recipe
    "host_quality": ("int", 95, "JPEG quality for the final re-encode"),
    "donor_quality": ("int", 60, "JPEG quality applied to donors before pasting"),
    "shape": ("str", "ellipse", "pasted region shape: rectangle or ellipse"),
    "size_range": ("int2", (64, 128), "pasted-region size range lo,hi in pixels"),
    "feather": ("int", 4, "alpha ramp width in pixels (0 = hard seam)"),
    "rescale_range": ("float2", (0.8, 1.2), "donor rescale factor range lo,hi"),
    "noise_sigma": ("float", 0.0, "Gaussian noise sigma inside the pasted region"),
    "decoy_count": ("int", 1, "decoy face boxes per tampered image"),
    "n_images": ("int", 40, "number of images to synthesize"),
    "pool_size": ("int", 8, "generated host/donor pool sizes when no directories are given"),
    "image_size": ("int", 384, "generated pool image side in pixels"),
}

_PIPELINE_KEYS = {f.name for f in dataclass_fields(pl.PipelineConfig)}
_RECIPE_KEYS = {
    "host_quality", "donor_quality", "shape", "size_range", "feather",
    "rescale_range", "noise_sigma", "decoy_count",
}


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


def _parse_value(name: str, tag: str, raw: str):
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"expected true/false, got {raw!r}")
        if tag == "str":
            return raw.strip().strip("\"'")
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if tag == "floats":
            return tuple(float(p) for p in parts)
        if tag in ("int2", "float2"):
            if len(parts) != 2:
                raise ValueError(f"expected two comma-separated values, got {raw!r}")
            cast = int if tag == "int2" else float
            return tuple(cast(p) for p in parts)
        raise AssertionError(f"unknown tag {tag}")
    except ValueError as exc:
        raise ValueError(f"{name}: {exc}") from exc


def parse_config_file(path) -> dict:
    """Flat key = value text; # starts a comment; unknown keys are errors."""
    p = Path(path)
    if not p.is_file():
        raise CliError("io", f"config file not found: {p}", 3)
    values = {}
    problems = []
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            problems.append(f"line {lineno}: expected key = value, got {stripped!r}")
            continue
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in CONFIG_FIELDS:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = _parse_value(key, CONFIG_FIELDS[key][0], raw)
        except ValueError as exc:
            problems.append(f"line {lineno}: {exc}")
    if problems:
        raise CliError("config", "; ".join(problems), 2)
    return values


def _validate_extras(values: dict) -> list[str]:
    bad = []
    checks = {
        "host_quality": lambda v: 1 <= v <= 100,
        "donor_quality": lambda v: 1 <= v <= 100,
        "shape": lambda v: v in ss.SHAPES,
        "size_range": lambda v: 8 <= v[0] <= v[1],
        "feather": lambda v: v >= 0,
        "rescale_range": lambda v: 0 < v[0] <= v[1],
        "noise_sigma": lambda v: v >= 0,
        "decoy_count": lambda v: v >= 1,
        "n_images": lambda v: v >= 1,
        "pool_size": lambda v: v >= 2,
        "image_size": lambda v: v >= 256,
    }
    for key, ok in checks.items():
        if not ok(values[key]):
            bad.append(f"{key}: invalid value {values[key]!r}")
    return bad


def resolve_config(args) -> dict:
    """defaults <- config file <- explicit flags, then validate everything."""
    values = {name: default for name, (_, default, _) in CONFIG_FIELDS.items()}
    if args.config:
        values.update(parse_config_file(args.config))
    for name in CONFIG_FIELDS:
        flag_val = getattr(args, name, None)
        if flag_val is not None:
            values[name] = flag_val
    config = pl.PipelineConfig(**{k: values[k] for k in _PIPELINE_KEYS})
    problems = pl.validate_config(config) + _validate_extras(values)
    if problems:
        raise CliError("config", "; ".join(problems), 2)
    values["_pipeline"] = config
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twostream",
        description="Two-stream tampered-face detection: synthesize data, train, detect, evaluate.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    for name, (tag, default, help_text) in CONFIG_FIELDS.items():
        flag = "--" + name.replace("_", "-")
        if tag == "bool":
            common.add_argument(flag, type=lambda s, n=name: _parse_value(n, "bool", s),
                                metavar="{true,false}", help=f"{help_text} (default {default})")
        elif tag in ("floats", "int2", "float2"):
            common.add_argument(flag, type=lambda s, n=name, t=tag: _parse_value(n, t, s),
                                metavar="V,V", help=f"{help_text} (default {','.join(str(v) for v in default)})")
        else:
            common.add_argument(flag, type=lambda s, n=name, t=tag: _parse_value(n, t, s),
                                help=f"{help_text} (default {default})")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a spliced dataset with ground truth")
    p.add_argument("--hosts", help="directory of host images (default: generated textures)")
    p.add_argument("--donors", help="directory of donor images (default: generated textures)")

    p = sub.add_parser("extract", parents=[common], help="write per-image residual feature files")
    p.add_argument("--manifest", required=True, help="dataset manifest.json")

    p = sub.add_parser("train-triplet", parents=[common], help="train the patch embedding on authentic images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", help="directory of precomputed feature files")

    p = sub.add_parser("train-appearance", parents=[common], help="train the face-crop classifier")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("detect", parents=[common], help="score every face with the available streams")
    p.add_argument("--manifest", required=True)
    p.add_argument("--triplet-model", help="embedding model file for the patch stream")
    p.add_argument("--appearance-model", help="model file for the appearance stream")
    p.add_argument("--external-scores", help="CSV of externally computed appearance scores")
    p.add_argument("--features", help="directory of precomputed feature files")
    p.add_argument("--maps", action="store_true", help="also write per-image SVM score maps")
    p.add_argument("--disable-patch-stream", action="store_true",
                   help="skip patch scores entirely (requires lam=0)")

    p = sub.add_parser("evaluate", parents=[common], help="fuse score CSVs and report face-level ROC/AUC")
    p.add_argument("scores", nargs="+", help="score CSV(s) from detect; columns are summed per face")
    p.add_argument("--manifest", required=True)
    p.add_argument("--calibrate", action="store_true",
                   help="pick lambda from lambda_grid by AUC instead of using lam")
    return parser


def _load_pool(directory, fallback_seed: int, values: dict) -> list[ic.Image]:
    if directory is None:
        return ss.make_texture_pool(values["pool_size"], values["image_size"], seed=fallback_seed)
    paths = sorted(
        p for p in Path(directory).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not paths:
        raise CliError("io", f"no images found in {directory}", 3)
    return [ic.load_image(p) for p in paths]


def _recipe(values: dict) -> ss.SpliceRecipe:
    return ss.SpliceRecipe(
        seed=pl.derive_seed(values["seed"], "synth"),
        **{k: values[k] for k in _RECIPE_KEYS},
    )


def cmd_synth(args, values: dict) -> int:
    out = Path(values["out_dir"]) / "dataset"
    hosts = _load_pool(args.hosts, pl.derive_seed(values["seed"], "hosts"), values)
    donors = _load_pool(args.donors, pl.derive_seed(values["seed"], "donors"), values)
    results = ss.synthesize(hosts, donors, _recipe(values), values["n_images"])
    manifest = ss.emit_manifest(results, _recipe(values), out)
    tampered = len(manifest.tampered_entries())
    print(f"wrote {len(manifest.entries)} images ({tampered} tampered) to {out}")
    return 0


def cmd_extract(args, values: dict) -> int:
    config = values["_pipeline"]
    manifest = ic.load_manifest(args.manifest)
    out = Path(values["out_dir"]) / "features"
    paths = pl.run_extract(manifest, config, out)
    print(f"wrote {len(paths)} feature files to {out}")
    return 0


def cmd_train_triplet(args, values: dict) -> int:
    config = values["_pipeline"]
    manifest = ic.load_manifest(args.manifest)
    features = pl.load_manifest_features(manifest, config, args.features)
    model, log = pl.train_triplet_stream(manifest, features, config)
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "triplet.tsm"
    tn.save_model(model, path)
    print(
        f"wrote {path} (best epoch {log.best_epoch}, "
        f"val loss {log.initial_val_loss:.4f} -> {min(log.val_loss):.4f})"
    )
    return 0


def cmd_train_appearance(args, values: dict) -> int:
    config = values["_pipeline"]
    manifest = ic.load_manifest(args.manifest)
    model, log = pl.train_appearance_stream(manifest, config)
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "appearance.tsa"
    app.save_appearance(model, path)
    print(f"wrote {path} (best epoch {log.best_epoch}, val loss {min(log.val_loss):.4f})")
    return 0


def cmd_detect(args, values: dict) -> int:
    config = values["_pipeline"]
    manifest = ic.load_manifest(args.manifest)
    if args.disable_patch_stream and config.lam != 0.0:
        raise CliError("usage", "patch scores disabled but lam != 0; set --lam 0", 2)
    triplet_model = None
    if not args.disable_patch_stream:
        if args.triplet_model is None:
            raise CliError(
                "usage",
                "triplet stream required: pass --triplet-model, or --disable-patch-stream with lam=0",
                2,
            )
        triplet_model = tn.load_model(args.triplet_model)
    appearance_model = None
    external = None
    if args.external_scores:
        external = app.load_external_scores(args.external_scores)
    elif args.appearance_model:
        appearance_model = app.load_appearance(args.appearance_model)
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    map_dir = None
    if args.maps:
        map_dir = out / "maps"
        map_dir.mkdir(parents=True, exist_ok=True)
    rows = pl.detect(
        manifest,
        config,
        triplet_model,
        appearance_model=appearance_model,
        external=external,
        features_dir=args.features,
        map_dir=map_dir,
    )
    path = out / "scores.csv"
    fe.write_report(rows, path)
    print(f"wrote {path} ({len(rows)} faces)")
    return 0


def _merge_score_csvs(paths: list[str]) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Sum F and Sbar per face across CSVs (disabled streams wrote zeros)."""
    merged: dict[str, list] = {}
    for path in paths:
        for row in fe.read_report(path):
            if row.face_id in merged:
                cur = merged[row.face_id]
                if cur[0] != row.label:
                    raise ValueError(f"{row.face_id}: label disagrees across score files")
                cur[1] += row.f
                cur[2] += row.sbar
                cur[3] = max(cur[3], row.n_q)
            else:
                merged[row.face_id] = [row.label, row.f, row.sbar, row.n_q]
    ids = sorted(merged)
    labels = np.array([merged[i][0] for i in ids])
    f = np.array([merged[i][1] for i in ids])
    sbar = np.array([merged[i][2] for i in ids])
    n_q = np.array([merged[i][3] for i in ids])
    return ids, labels, f, sbar, n_q


def cmd_evaluate(args, values: dict) -> int:
    config = values["_pipeline"]
    manifest = ic.load_manifest(args.manifest)
    ids, labels, f, sbar, n_q = _merge_score_csvs(args.scores)
    expected = pl.manifest_face_labels(manifest)
    missing = sorted(set(expected) - set(ids))
    if missing:
        raise CliError("data", f"missing scores for faces: {', '.join(missing)}", 4)
    lam = config.lam
    if args.calibrate:
        lam = fe.calibrate_lambda(f, sbar, labels, grid=config.lambda_grid)
    rows = [
        fe.make_face_score(i, int(lab), float(fv), float(sv), int(nq), lam)
        for i, lab, fv, sv, nq in zip(ids, labels, f, sbar, n_q)
    ]
    curve = fe.evaluate_faces(rows)
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    fe.write_report(rows, out / "report.csv")
    fe.write_roc(curve, out / "roc.csv")
    print(f"lambda={lam:g} auc={curve.auc:.3f} ({len(rows)} faces) -> {out / 'report.csv'}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train-triplet": cmd_train_triplet,
    "train-appearance": cmd_train_appearance,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        values = resolve_config(args)
        return _COMMANDS[args.command](args, values)
    except CliError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error:io: {exc}", file=sys.stderr)
        return 3
    except (ic.ManifestError, ic.DecodeError, ic.UnsupportedImageError, ValueError) as exc:
        print(f"error:data: {exc}", file=sys.stderr)
        return 4
    except (tn.TrainingDiverged, RuntimeError) as exc:
        print(f"error:runtime: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
