"""Patch-embedding network trained with a triplet hinge loss.

Two fully connected layers (ReLU after the first, nothing after the second)
followed by L2 normalization.  Triplets pair two patches of one authentic
image (anchor, positive) against a patch of a different image (negative);
minimizing sum max(0, m + d(f_a, f_p) - d(f_a, f_n)) with squared-distance d
pulls same-image patches together.  Negatives are sampled uniformly, never
mined: patches from a different image may still share a camera, and mining
would promote those false negatives until the embedding collapses.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .residuals import ResidualFeature

MODEL_MAGIC = b"TSM1"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(eq=False)
class TripletModel:
    """Embedding parameters plus the input standardization that travels with them."""

    w1: np.ndarray  # (h1, D)
    b1: np.ndarray  # (h1,)
    w2: np.ndarray  # (h2, h1)
    b2: np.ndarray  # (h2,)
    mean: np.ndarray  # (D,)
    std: np.ndarray  # (D,)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def output_dim(self) -> int:
        return self.w2.shape[0]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


@dataclass(frozen=True, eq=False)
class Triplet:
    """Anchor and positive share an image; the negative comes from another."""

    anchor: ResidualFeature
    positive: ResidualFeature
    negative: ResidualFeature


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.04
    lr0: float = 0.1
    halve_every: int = 8  # epochs between halvings of the learning rate
    batch: int = 128
    epochs: int = 64
    seed: int = 0
    hidden1: int = 1024
    hidden2: int = 512

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")


@dataclass
class TrainLog:
    initial_val_loss: float
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1


@dataclass
class Grads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def init_model(dim: int, hidden1: int = 1024, hidden2: int = 512, seed: int = 0) -> TripletModel:
    """Seeded uniform +-sqrt(6/(fan_in+fan_out)) init, identity standardization.

    b2 starts at a small constant so a sample that lands with every ReLU dead
    still has a nonzero vector to normalize (it embeds to a constant unit
    vector rather than aborting training).
    """
    rng = np.random.default_rng(seed)

    def layer(n_out, n_in):
        a = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-a, a, size=(n_out, n_in))

    return TripletModel(
        w1=layer(hidden1, dim),
        b1=np.zeros(hidden1),
        w2=layer(hidden2, hidden1),
        b2=np.full(hidden2, 0.01),
        mean=np.zeros(dim),
        std=np.ones(dim),
    )


def _forward_batch(model: TripletModel, x: np.ndarray):
    """Forward pass keeping intermediates for backprop; rows are samples."""
    z1 = x @ model.w1.T + model.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ model.w2.T + model.b2
    norms = np.linalg.norm(z2, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm pre-normalization vector (degenerate parameters)")
    y = z2 / norms[:, None]
    return y, (x, z1, a1, z2, norms)


def forward(model: TripletModel, r: np.ndarray) -> np.ndarray:
    """Unit-norm embedding of one raw feature vector: normalize(W2 relu(W1 r + b1) + b2)."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] != model.input_dim:
        raise ValueError(f"expected a vector of dim {model.input_dim}, got shape {r.shape}")
    y, _ = _forward_batch(model, r[None, :])
    return y[0]


def embed(model: TripletModel, features: np.ndarray) -> np.ndarray:
    """Standardize rows with the model's mean/std, then embed them."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y, _ = _forward_batch(model, model.standardize(x))
    return y


def _stack(batch: list[Triplet]):
    a = np.stack([t.anchor.values for t in batch]).astype(np.float64)
    p = np.stack([t.positive.values for t in batch]).astype(np.float64)
    n = np.stack([t.negative.values for t in batch]).astype(np.float64)
    return a, p, n


def triplet_loss_arrays(
    model: TripletModel, a: np.ndarray, p: np.ndarray, n: np.ndarray, margin: float
) -> tuple[float, Grads]:
    """Batch hinge loss sum max(0, m + |f_a-f_p|^2 - |f_a-f_n|^2) and its gradient.

    Backprop goes exactly through the normalization (Jacobian (I - y y^T)/|z|),
    layer 2, the ReLU and layer 1; triplets with an inactive hinge contribute
    zero gradient.
    """
    b = a.shape[0]
    if b == 0:
        raise ValueError("batch must be nonempty")
    if a.shape[1] != model.input_dim:
        raise ValueError(f"feature dim {a.shape[1]} does not match model dim {model.input_dim}")
    x = np.concatenate([a, p, n], axis=0)
    y, (x_, z1, a1, z2, norms) = _forward_batch(model, x)
    fa, fp, fn = y[:b], y[b : 2 * b], y[2 * b :]
    d_ap = np.sum((fa - fp) ** 2, axis=1)
    d_an = np.sum((fa - fn) ** 2, axis=1)
    hinge = margin + d_ap - d_an
    active = hinge > 0.0
    # np.maximum propagates NaN, so a non-finite hinge surfaces in the loss
    # instead of being masked as inactive; train() aborts on it.
    loss = float(np.sum(np.maximum(hinge, 0.0)))

    # dL/df for active triplets; exactly zero elsewhere (including NaN rows).
    act = active[:, None]
    dfa = np.where(act, 2.0 * (fn - fp), 0.0)
    dfp = np.where(act, 2.0 * (fp - fa), 0.0)
    dfn = np.where(act, 2.0 * (fa - fn), 0.0)
    dy = np.concatenate([dfa, dfp, dfn], axis=0)

    # Through L2 normalization: dz2 = (dy - (dy . y) y) / |z2|.
    dz2 = (dy - np.sum(dy * y, axis=1, keepdims=True) * y) / norms[:, None]
    dw2 = dz2.T @ a1
    db2 = dz2.sum(axis=0)
    da1 = dz2 @ model.w2
    dz1 = da1 * (z1 > 0.0)
    dw1 = dz1.T @ x_
    db1 = dz1.sum(axis=0)
    return loss, Grads(w1=dw1, b1=db1, w2=dw2, b2=db2)


def triplet_loss(model: TripletModel, batch: list[Triplet], margin: float) -> tuple[float, Grads]:
    """Loss and gradients for a list of Triplets (raw, unstandardized features)."""
    a, p, n = _stack(batch)
    return triplet_loss_arrays(model, a, p, n, margin)


def sample_triplets(
    features_by_image: list[list[ResidualFeature]], count: int, seed: int
) -> list[Triplet]:
    """Uniform triplets: anchor/positive distinct patches of one image, negative from another.

    No hard-negative mining by design.  Every provided image must contribute
    at least two patches and there must be at least two images.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if len(features_by_image) < 2:
        raise ValueError(f"need >= 2 images to form triplets, got {len(features_by_image)}")
    for i, feats in enumerate(features_by_image):
        if len(feats) < 2:
            raise ValueError(f"image {i} yields {len(feats)} patches, need >= 2")
    rng = np.random.default_rng(seed)
    n_img = len(features_by_image)
    out = []
    for _ in range(count):
        ia = int(rng.integers(n_img))
        jn = int(rng.integers(n_img - 1))
        if jn >= ia:
            jn += 1
        anchor_feats = features_by_image[ia]
        k1 = int(rng.integers(len(anchor_feats)))
        k2 = int(rng.integers(len(anchor_feats) - 1))
        if k2 >= k1:
            k2 += 1
        neg_feats = features_by_image[jn]
        kn = int(rng.integers(len(neg_feats)))
        out.append(Triplet(anchor=anchor_feats[k1], positive=anchor_feats[k2], negative=neg_feats[kn]))
    return out


def _mean_loss(model: TripletModel, a, p, n, margin: float) -> float:
    loss, _ = triplet_loss_arrays(model, a, p, n, margin)
    return loss / a.shape[0]


def learning_rate(lr0: float, epoch: int, halve_every: int) -> float:
    """lr0 / 2^floor(epoch / halve_every)."""
    return lr0 / (2.0 ** (epoch // halve_every))


def train(triplets: list[Triplet], config: TrainConfig) -> tuple[TripletModel, TrainLog]:
    """SGD on the triplet loss with an 80/20 train/val split.

    Features are standardized per dimension (statistics from the training
    split, stored on the model, applied everywhere).  The returned parameters
    are the ones with the best validation loss; logged losses are means per
    triplet.  A non-finite loss aborts with TrainingDiverged.
    """
    if len(triplets) < 1:
        raise ValueError("need at least one training triplet")
    a, p, n = _stack(triplets)
    dim = a.shape[1]
    rng = np.random.default_rng(config.seed)

    order = rng.permutation(len(triplets))
    n_val = int(round(0.2 * len(triplets)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:  # tiny inputs: keep at least one training triplet
        train_idx, val_idx = order, order[:0]

    stats_rows = np.concatenate([a[train_idx], p[train_idx], n[train_idx]], axis=0)
    mean = stats_rows.mean(axis=0)
    std = stats_rows.std(axis=0)
    std[std == 0.0] = 1.0
    a = (a - mean) / std
    p = (p - mean) / std
    n = (n - mean) / std

    model = init_model(dim, config.hidden1, config.hidden2, seed=int(rng.integers(2**63)))
    model.mean, model.std = mean, std

    def val_loss(m):
        if val_idx.size == 0:
            return _mean_loss(m, a[train_idx], p[train_idx], n[train_idx], config.margin)
        return _mean_loss(m, a[val_idx], p[val_idx], n[val_idx], config.margin)

    log = TrainLog(initial_val_loss=val_loss(model))
    best = (log.initial_val_loss, [model.w1.copy(), model.b1.copy(), model.w2.copy(), model.b2.copy()])
    log.best_epoch = -1

    for epoch in range(config.epochs):
        lr = learning_rate(config.lr0, epoch, config.halve_every)
        perm = rng.permutation(train_idx)
        epoch_loss = 0.0
        for start in range(0, perm.size, config.batch):
            idx = perm[start : start + config.batch]
            loss, g = triplet_loss_arrays(model, a[idx], p[idx], n[idx], config.margin)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {start // config.batch}")
            epoch_loss += loss
            scale = lr / idx.size
            model.w1 -= scale * g.w1
            model.b1 -= scale * g.b1
            model.w2 -= scale * g.w2
            model.b2 -= scale * g.b2
        vl = val_loss(model)
        if not np.isfinite(vl):
            raise TrainingDiverged(f"non-finite validation loss after epoch {epoch}")
        log.train_loss.append(epoch_loss / max(perm.size, 1))
        log.val_loss.append(vl)
        log.lr.append(lr)
        if vl < best[0]:
            best = (vl, [model.w1.copy(), model.b1.copy(), model.w2.copy(), model.b2.copy()])
            log.best_epoch = epoch

    model.w1, model.b1, model.w2, model.b2 = best[1]
    return model, log


# ---------------------------------------------------------------------------
# Model files: "TSM1" | u32 D | u32 h1 | u32 h2 | float32 LE W1,b1,W2,b2
#              row-major | float32 LE mean, std (D each)


def save_model(model: TripletModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        h1, d = model.w1.shape
        h2 = model.w2.shape[0]
        fh.write(struct.pack("<III", d, h1, h2))
        for arr in (model.w1, model.b1, model.w2, model.b2, model.mean, model.std):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path) -> TripletModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {MODEL_MAGIC!r}")
    d, h1, h2 = struct.unpack_from("<III", blob, 4)
    counts = [h1 * d, h1, h2 * h1, h2, d, d]
    need = 16 + 4 * sum(counts)
    if len(blob) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(blob)}")
    off = 16
    arrs = []
    for c in counts:
        arrs.append(np.frombuffer(blob, dtype="<f4", count=c, offset=off).astype(np.float64))
        off += 4 * c
    return TripletModel(
        w1=arrs[0].reshape(h1, d),
        b1=arrs[1],
        w2=arrs[2].reshape(h2, h1),
        b2=arrs[3],
        mean=arrs[4],
        std=arrs[5],
    )
