"""Per-face linear SVM trained on the fly over patch embeddings.

Each test face gets its own classifier: background patches of the same image
are the negative class, an equal number of patches sampled from other images
are the positive class.  The sigmoid of the decision value estimates the
probability that a patch came from another image, so high face scores flag
spliced faces.  Models are ephemeral; nothing here persists them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imagecore import Image, Partition, PatchGrid, save_png

DEFAULT_C = 100.0
DEFAULT_TOL = 1e-3
DEFAULT_MAX_EPOCHS = 1000


@dataclass
class SolveLog:
    """Per-epoch solver diagnostics; dual_objective must be nondecreasing."""

    dual_objective: list[float] = field(default_factory=list)
    max_violation: list[float] = field(default_factory=list)
    converged: bool = False
    alpha: np.ndarray | None = None


@dataclass(eq=False)
class LinearSvm:
    w: np.ndarray
    b: float
    C: float
    trained: bool = False
    log: SolveLog | None = None


@dataclass(frozen=True, eq=False)
class FaceSvmProblem:
    """Training material for one face: equal pos/neg classes plus the patches to score."""

    test: np.ndarray  # (m, d) embeddings of the face's own patches
    positives: np.ndarray  # (k, d) from other images, label +1
    negatives: np.ndarray  # (k, d) same-image background, label -1

    def __post_init__(self):
        if self.test.shape[0] < 1:
            raise ValueError("test patch set is empty")
        if self.positives.shape[0] != self.negatives.shape[0]:
            raise ValueError(
                f"class imbalance: {self.positives.shape[0]} positives vs "
                f"{self.negatives.shape[0]} negatives"
            )
        if self.positives.shape[0] < 1:
            raise ValueError("need at least one sample per class")


def solve(
    x: np.ndarray,
    y: np.ndarray,
    c: float = DEFAULT_C,
    tol: float = DEFAULT_TOL,
    max_epochs: int = DEFAULT_MAX_EPOCHS,
    seed: int = 0,
    bias_scale: float = 1.0,
) -> LinearSvm:
    """Dual coordinate descent for the L2-regularized hinge-loss SVM.

    min_w,b  1/2 (|w|^2 + (b/bias_scale)^2) + C sum_i max(0, 1 - y_i (w.x_i + b))

    The bias is a regularized extra coordinate on features augmented with the
    constant bias_scale.  One epoch visits every sample in a seeded random
    order; iteration stops when the largest projected-gradient violation in an
    epoch drops below tol, else at max_epochs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError(f"bad problem shapes x={x.shape} y={y.shape}")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be +1 or -1")
    if np.all(y == y[0]):
        raise ValueError("single-class input: both labels must be present")
    if not bias_scale > 0:
        raise ValueError(f"bias_scale must be > 0, got {bias_scale}")
    if not c > 0:
        raise ValueError(f"C must be > 0, got {c}")

    n = x.shape[0]
    xa = np.concatenate([x, np.full((n, 1), bias_scale)], axis=1)
    yx = xa * y[:, None]  # row i is y_i * augmented x_i
    q = np.einsum("ij,ij->i", xa, xa)
    alpha = np.zeros(n)
    w = np.zeros(xa.shape[1])
    rng = np.random.default_rng(seed)
    log = SolveLog()

    for _ in range(max_epochs):
        worst = 0.0
        for i in rng.permutation(n):
            g = yx[i] @ w - 1.0
            a = alpha[i]
            if a <= 0.0:
                pg = min(g, 0.0)
            elif a >= c:
                pg = max(g, 0.0)
            else:
                pg = g
            worst = max(worst, abs(pg))
            if pg != 0.0:
                new = min(max(a - g / q[i], 0.0), c)
                if new != a:
                    w += (new - a) * yx[i]
                    alpha[i] = new
        log.dual_objective.append(float(alpha.sum() - 0.5 * (w @ w)))
        log.max_violation.append(worst)
        if worst < tol:
            log.converged = True
            break
    log.alpha = alpha
    return LinearSvm(w=w[:-1].copy(), b=float(w[-1] * bias_scale), C=c, trained=True, log=log)


def primal_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, c: float,
                     bias_scale: float = 1.0) -> float:
    """Regularized hinge objective of a candidate (w, b) on the given samples."""
    margins = y * (x @ w + b)
    return float(0.5 * (w @ w + (b / bias_scale) ** 2) + c * np.sum(np.maximum(0.0, 1.0 - margins)))


def decision(svm: LinearSvm, x: np.ndarray) -> np.ndarray:
    """Raw margin w.x + b for one embedding or a batch of rows."""
    return np.atleast_2d(np.asarray(x, dtype=np.float64)) @ svm.w + svm.b


def score_patch(svm: LinearSvm, x: np.ndarray) -> float:
    """S(x) = sigmoid(w.x + b): probability the patch is from another image."""
    if not svm.trained:
        raise ValueError("svm is not trained")
    m = float(decision(svm, x)[0])
    # Branch on sign so exp never overflows.
    if m >= 0:
        return float(1.0 / (1.0 + np.exp(-m)))
    e = float(np.exp(m))
    return e / (1.0 + e)


def score_patches(svm: LinearSvm, xs: np.ndarray) -> np.ndarray:
    if not svm.trained:
        raise ValueError("svm is not trained")
    m = decision(svm, xs)
    out = np.empty_like(m)
    pos = m >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-m[pos]))
    e = np.exp(m[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def face_score(svm: LinearSvm, face_embeddings: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean S(x) over the face's patches, plus the per-patch scores."""
    xs = np.atleast_2d(np.asarray(face_embeddings, dtype=np.float64))
    if xs.shape[0] < 1:
        raise ValueError("face has no patches to score")
    scores = score_patches(svm, xs)
    return float(scores.mean()), scores


def assemble_problem(
    embeddings: np.ndarray,
    partition: Partition,
    other_pool: np.ndarray,
    seed: int = 0,
) -> FaceSvmProblem:
    """Build a FaceSvmProblem from one image's patch embeddings.

    All background patches become negatives; the same count of positives is
    drawn without replacement (seeded) from other_pool, which must contain
    only patches from other images.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if len(partition.face) < 1:
        raise ValueError("face owns no patches")
    if len(partition.background) < 1:
        raise ValueError("no background patches: face covers the whole grid")
    other_pool = np.asarray(other_pool, dtype=np.float64)
    need = len(partition.background)
    if other_pool.shape[0] < need:
        raise ValueError(
            f"positive pool too small: need {need}, have {other_pool.shape[0]}"
        )
    rng = np.random.default_rng(seed)
    pick = rng.choice(other_pool.shape[0], size=need, replace=False)
    return FaceSvmProblem(
        test=embeddings[list(partition.face)],
        positives=other_pool[pick],
        negatives=embeddings[list(partition.background)],
    )


def solve_problem(problem: FaceSvmProblem, c: float = DEFAULT_C, seed: int = 0) -> LinearSvm:
    x = np.concatenate([problem.positives, problem.negatives], axis=0)
    y = np.concatenate(
        [np.ones(problem.positives.shape[0]), -np.ones(problem.negatives.shape[0])]
    )
    return solve(x, y, c=c, seed=seed)


def score_map(grid: PatchGrid, height: int, width: int, scores: np.ndarray) -> Image:
    """Per-pixel mean of S over covering windows as 8-bit grayscale.

    Uncovered pixels stay 0; 0.5 rounds up to 128 (round-half-up on 255*mean).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(grid.positions),):
        raise ValueError(
            f"score count {scores.shape} does not match {len(grid.positions)} grid patches"
        )
    total = np.zeros((height, width))
    cover = np.zeros((height, width), dtype=np.int64)
    for rect, s in zip(grid.positions, scores):
        total[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w] += s
        cover[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w] += 1
    mean = np.divide(total, cover, out=np.zeros_like(total), where=cover > 0)
    pixels = np.floor(255.0 * mean + 0.5).astype(np.uint8)
    return Image(pixels)


def write_score_map(path, grid: PatchGrid, height: int, width: int, scores: np.ndarray) -> None:
    """PNG heat map plus a sidecar .txt of tab-separated per-patch x, y, S."""
    img = score_map(grid, height, width, scores)
    save_png(img, path)
    sidecar = str(path) + ".txt"
    with open(sidecar, "w") as fh:
        for rect, s in zip(grid.positions, np.asarray(scores, dtype=np.float64)):
            fh.write(f"{rect.x}\t{rect.y}\t{s:.6f}\n")
