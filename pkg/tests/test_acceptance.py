"""Release gate: each test checks one shipping criterion and prints a verdict line.

Criteria 1-6 are correctness oracles (gradients, norms, losses, features,
solver, AUC), 7-9 are desk-scale behavior runs, 10 is determinism.  Every
test prints ``criterion N: PASS/FAIL (details)`` so a log scrape shows the
whole gate at a glance.
"""

import inspect
import math
import time

import numpy as np

import oracles
from twostream import appearance as ap
from twostream import cli
from twostream import fusion_eval as fe
from twostream import pipeline as pl
from twostream import residuals as rd
from twostream import svmstream as sv
from twostream import synthsplice as sp
from twostream import tripletnet as tn


VERDICTS: list[str] = []


def _verdict(num, ok, detail):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} ({detail})"
    VERDICTS.append(line)
    print(line, flush=True)
    assert ok, line


def _gaussian_problem(rng, n_per_class, d, gap):
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    a = rng.normal(size=(n_per_class, d)) * 0.6 + gap / 2 * direction
    b = rng.normal(size=(n_per_class, d)) * 0.6 - gap / 2 * direction
    x = np.vstack([a, b])
    y = np.concatenate([np.ones(n_per_class), -np.ones(n_per_class)])
    return x, y


def test_01_gradients_match_finite_differences():
    t0 = time.monotonic()
    rng = np.random.default_rng(101)
    worst = 0.0
    instances = 0

    seed = 0
    while instances < 12:
        seed += 1
        model = tn.init_model(6, hidden1=10, hidden2=4, seed=seed)
        a, p, n = (rng.normal(size=(3, 6)) for _ in range(3))
        # Central differences are invalid at the hinge kink; skip batches
        # that land within 1e-3 of it.
        ya, yp, yn = (tn.embed(model, v) for v in (a, p, n))
        slack = 0.04 + np.sum((ya - yp) ** 2, axis=1) - np.sum((ya - yn) ** 2, axis=1)
        if np.any(np.abs(slack) < 1e-3):
            continue
        _, grads = tn.triplet_loss_arrays(model, a, p, n, 0.04)
        err = oracles.grad_check(
            lambda: tn.triplet_loss_arrays(model, a, p, n, 0.04)[0],
            [model.w1, model.b1, model.w2, model.b2],
            [grads.w1, grads.b1, grads.w2, grads.b2],
        )
        worst = max(worst, err)
        instances += 1

    for seed in range(8):
        m = ap.init_appearance(8, seed=200 + seed)
        x = rng.random((2, 8, 8))
        y = np.array([0.0, 1.0])
        _, grads, dbf = ap.bce_loss_grads(m, x, y)
        # eps 1e-5: the smooth BCE tolerates the larger step, and the wider
        # gap keeps float cancellation off the near-zero conv coordinates.
        err = oracles.grad_check(
            lambda: ap.bce_loss_grads(m, x, y)[0], m.params(), grads, eps=1e-5
        )
        eps = 1e-5
        m.bf += eps
        up = ap.bce_loss_grads(m, x, y)[0]
        m.bf -= 2 * eps
        down = ap.bce_loss_grads(m, x, y)[0]
        m.bf += eps
        numeric = (up - down) / (2 * eps)
        bf_err = abs(numeric - dbf) / max(abs(numeric), abs(dbf), 1e-8)
        worst = max(worst, err, bf_err)
        instances += 1

    elapsed = time.monotonic() - t0
    _verdict(
        1,
        worst < 1e-4 and instances >= 20 and elapsed < 60.0,
        f"max rel err {worst:.2e} over {instances} instances in {elapsed:.1f}s",
    )


def test_02_embeddings_are_unit_norm():
    rng = np.random.default_rng(202)
    worst = 0.0
    total = 0
    for i in range(20):
        dim = int(rng.integers(4, 40))
        h1 = int(rng.integers(4, 32))
        h2 = int(rng.integers(2, 16))
        model = tn.init_model(dim, hidden1=h1, hidden2=h2, seed=300 + i)
        x = rng.normal(scale=float(rng.uniform(0.5, 20.0)), size=(50, dim))
        y = tn.embed(model, x)
        worst = max(worst, float(np.abs(np.linalg.norm(y, axis=1) - 1.0).max()))
        total += y.shape[0]
    _verdict(2, total == 1000 and worst <= 1e-6, f"max |norm-1| {worst:.2e} over {total} embeddings")


def test_03_triplet_loss_matches_scalar_oracle():
    rng = np.random.default_rng(303)
    worst = 0.0
    model = None
    for i in range(10):
        model = tn.init_model(5, hidden1=8, hidden2=3, seed=400 + i)
        a, p, n = (rng.normal(size=(4, 5)) for _ in range(3))
        mine = tn.triplet_loss_arrays(model, a, p, n, 0.04)[0]
        ref = oracles.triplet_loss_oracle(
            model.w1, model.b1, model.w2, model.b2, a, p, n, 0.04
        )
        worst = max(worst, abs(mine - ref) / max(1.0, abs(ref)))
    x = rng.normal(size=(1, 5))
    coincident = tn.triplet_loss_arrays(model, x, x, x, 0.04)[0]
    _verdict(
        3,
        worst <= 1e-12 and coincident == 0.04,
        f"max rel err {worst:.2e}; coincident-batch loss {coincident!r}",
    )


def test_04_features_match_double_loop_oracle():
    rng = np.random.default_rng(404)
    config = rd.FeatureConfig()
    bins = config.bins_per_block
    t = config.truncation
    all_zero = sum(t * (2 * t + 1) ** k for k in range(4))  # the (0,0,0,0) tuple's bin
    identical = 0
    worst_sum = 0.0
    for _ in range(10):
        patch = rng.integers(0, 256, size=(128, 128), dtype=np.uint8)
        mine = rd.extract_feature(patch, config).values
        pairs = [(f.kernel, f.q) for f in config.filters]
        ref = oracles.feature_oracle(patch, pairs, config.truncation, config.cfa_aware)
        identical += int(mine.tobytes() == np.asarray(ref, dtype=mine.dtype).tobytes())
        worst_sum = max(worst_sum, float(np.abs(mine.reshape(-1, bins).sum(axis=1) - 1.0).max()))
    onehot_ok = True
    for value in (0, 128, 255):
        flat = rd.extract_feature(np.full((64, 64), value, dtype=np.uint8), config).values
        blocks = flat.reshape(-1, bins)
        onehot_ok &= bool(np.all(blocks[:, all_zero] == 1.0))
        onehot_ok &= bool(np.all(blocks.sum(axis=1) == 1.0))
    _verdict(
        4,
        identical == 10 and worst_sum <= 1e-9 and onehot_ok,
        f"{identical}/10 bit-identical, max |block sum - 1| {worst_sum:.1e}, "
        f"constant patches one-hot at bin {all_zero}: {onehot_ok}",
    )


def test_05_svm_solver_is_sound():
    ok_dual = True
    ok_acc = True
    worst_gap = 0.0
    for seed in range(5):
        rng = np.random.default_rng(700 + seed)
        x, y = _gaussian_problem(rng, n_per_class=12, d=4, gap=3.0)
        svm = sv.solve(x, y, c=100.0, tol=1e-6, max_epochs=20000, seed=seed)
        diffs = np.diff(svm.log.dual_objective)
        ok_dual &= bool(np.all(diffs >= -1e-9))
        ok_acc &= bool(np.all(np.sign(sv.decision(svm, x)) == y))
        ours = sv.primal_objective(svm.w, svm.b, x, y, 100.0)
        ref = oracles.svm_primal_oracle(x, y, 100.0, steps=100_000)
        worst_gap = max(worst_gap, abs(ours - ref) / ref)
    default_c = (
        sv.DEFAULT_C == 100.0
        and inspect.signature(sv.solve_problem).parameters["c"].default == 100.0
    )
    _verdict(
        5,
        ok_dual and ok_acc and worst_gap <= 0.01 and default_c,
        f"dual nondecreasing {ok_dual}, separable accuracy 100% {ok_acc}, "
        f"max primal gap {worst_gap:.2e}, default C=100 {default_c}",
    )


def test_06_auc_matches_all_pairs_brute_force():
    rng = np.random.default_rng(606)
    exact = 0
    for i in range(100):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        if i % 2 == 0:
            scores = rng.integers(0, 8, size=n) / 4.0  # force ties
        else:
            scores = rng.normal(size=n)
        exact += int(fe.auc_rank(scores, labels) == oracles.auc_pairs_oracle(scores, labels))
    _verdict(6, exact == 100, f"{exact}/100 score sets exactly equal")


def _splice_dataset(out_dir, n, seed, **recipe_kw):
    hosts = sp.make_texture_pool(n + 20, 384, seed=pl.derive_seed(seed, "hosts"))
    donors = sp.make_texture_pool(n + 20, 384, seed=pl.derive_seed(seed, "donors"))
    kw = dict(
        host_quality=95, donor_quality=60, shape="ellipse", size_range=(96, 120),
        feather=4, rescale_range=(0.8, 1.2), noise_sigma=0.0, decoy_count=1,
        seed=pl.derive_seed(seed, "synth"),
    )
    kw.update(recipe_kw)
    recipe = sp.SpliceRecipe(**kw)
    results = sp.synthesize(hosts, donors, recipe, n)
    return sp.emit_manifest(results, recipe, out_dir)


def _patch_stream_auc(manifest, config):
    features = pl.load_manifest_features(manifest, config)
    model, _ = pl.train_triplet_stream(manifest, features, config)
    images = pl.prepare_images(manifest, features, model, config)
    scores = pl.patch_stream_scores(images, config)
    labels = pl.manifest_face_labels(manifest)
    fids = sorted(labels)
    sbar = np.array([scores[f][0] for f in fids])
    y = np.array([labels[f] for f in fids])
    return fe.roc_auc(sbar, y).auc


def test_07_patch_stream_detects_quality_gap(tmp_path):
    t0 = time.monotonic()
    config = pl.PipelineConfig(
        window=64, stride=64, hidden1=256, hidden2=128,
        triplet_count=2400, triplet_epochs=20, seed=0,
    )
    main = _patch_stream_auc(
        _splice_dataset(tmp_path / "main", 200, seed=0, noise_sigma=2.0), config
    )
    null = _patch_stream_auc(
        _splice_dataset(tmp_path / "null", 200, seed=0, donor_quality=95), config
    )
    elapsed = time.monotonic() - t0
    _verdict(
        7,
        main >= 0.80 and 0.35 <= null <= 0.65 and elapsed < 1200.0,
        f"main AUC {main:.4f}, null AUC {null:.4f}, {elapsed:.0f}s",
    )


def test_08_appearance_stream_learns_hard_seams(tmp_path):
    t0 = time.monotonic()
    seam = dict(
        donor_quality=95, shape="rectangle", size_range=(64, 96),
        feather=0, rescale_range=(1.0, 1.0),
    )
    train = _splice_dataset(tmp_path / "train", 240, seed=30, **seam)
    val = _splice_dataset(tmp_path / "val", 60, seed=31, **seam)
    config = pl.PipelineConfig(
        appearance_lr0=0.1, appearance_batch=8, appearance_epochs=60,
        appearance_halve_every=16, crop_size=32, crop_pad=0.1, seed=0,
    )
    model, _ = pl.train_appearance_stream(train, config)
    crops, labels, _ = pl.collect_crops(val, config)
    auc = fe.roc_auc(ap.forward_batch(model, crops), labels).auc
    elapsed = time.monotonic() - t0
    _verdict(8, auc >= 0.90 and elapsed < 300.0, f"held-out AUC {auc:.4f} in {elapsed:.0f}s")


def test_09_fusion_beats_both_streams():
    rng = np.random.default_rng(909)
    n = 2000
    # Each stream alone separates the classes at AUC ~0.75: a unit-variance
    # Gaussian pair at distance d has AUC Phi(d / sqrt(2)).
    delta = math.sqrt(2.0) * 0.6744897501960817
    labels = rng.integers(0, 2, size=n)
    f = delta * labels + rng.normal(size=n)
    sbar = delta * labels + rng.normal(size=n)
    auc_f = fe.auc_rank(f, labels)
    auc_s = fe.auc_rank(sbar, labels)
    lam = fe.calibrate_lambda(f, sbar, labels)
    fused = fe.auc_rank(f + lam * sbar, labels)
    single = max(auc_f, auc_s)
    _verdict(
        9,
        fused >= single + 0.03,
        f"F {auc_f:.4f}, Sbar {auc_s:.4f}, fused {fused:.4f} at lambda {lam:g}",
    )


SMOKE_ARGS = [
    "--window", "64", "--stride", "64", "--size-range", "96,120",
    "--image-size", "384", "--pool-size", "3", "--n-images", "10",
    "--triplet-count", "400", "--triplet-epochs", "6", "--hidden1", "96",
    "--hidden2", "48", "--triplet-batch", "64", "--appearance-epochs", "4",
    "--crop-size", "32", "--seed", "0",
]


def _full_cli_run(out):
    args = SMOKE_ARGS + ["--out-dir", str(out)]
    manifest = str(out / "dataset" / "manifest.json")
    features = str(out / "features")
    assert cli.main(["synth"] + args) == 0
    assert cli.main(["extract", "--manifest", manifest] + args) == 0
    assert cli.main(["train-triplet", "--manifest", manifest, "--features", features] + args) == 0
    assert cli.main(["train-appearance", "--manifest", manifest] + args) == 0
    assert cli.main(
        ["detect", "--manifest", manifest, "--triplet-model", str(out / "triplet.tsm"),
         "--appearance-model", str(out / "appearance.tsa"), "--features", features] + args
    ) == 0
    assert cli.main(["evaluate", str(out / "scores.csv"), "--manifest", manifest] + args) == 0


def test_10_full_pipeline_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _full_cli_run(a)
    _full_cli_run(b)
    feature_files = sorted(p.name for p in (a / "features").glob("*.tsf"))
    targets = [f"features/{name}" for name in feature_files]
    targets += ["triplet.tsm", "appearance.tsa", "scores.csv", "report.csv", "roc.csv"]
    diffs = [t for t in targets if (a / t).read_bytes() != (b / t).read_bytes()]
    _verdict(
        10,
        len(feature_files) == 10 and not diffs,
        f"{len(targets)} artifacts byte-identical" if not diffs else f"differs: {diffs}",
    )
