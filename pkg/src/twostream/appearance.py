"""Face-appearance stream: crop classifier F(q) plus external-score ingestion.

A small seeded CNN over S x S grayscale face crops stands in for a large
pretrained classifier: scores from any external model can be supplied through
a CSV instead and flow through fusion unchanged.  Architecture: two blocks of
3x3 convolution (8 then 16 maps, zero padding 1) + ReLU + 2x2 max-pool, then
one fully connected logit.  Everything is float64 numpy; convolutions run as
a single matrix product over unrolled 3x3 neighborhoods.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imagecore import Image, Rect, crop, resize_bilinear, to_luma
from .tripletnet import TrainingDiverged, learning_rate

APPEARANCE_MAGIC = b"TSA1"
DEFAULT_CROP_SIZE = 64
CONV1_MAPS = 8
CONV2_MAPS = 16


@dataclass(frozen=True, eq=False)
class FaceCrop:
    """S x S grayscale face region with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError(f"crop must be square 2-d, got shape {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("crop values must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass(eq=False)
class AppearanceModel:
    """Parameters in file order: k1, b1, k2, b2, wf, bf."""

    k1: np.ndarray  # (8, 1, 3, 3)
    b1: np.ndarray  # (8,)
    k2: np.ndarray  # (16, 8, 3, 3)
    b2: np.ndarray  # (16,)
    wf: np.ndarray  # (16 * (S//4)**2,)
    bf: float
    crop_size: int

    def params(self) -> list[np.ndarray]:
        return [self.k1, self.b1, self.k2, self.b2, self.wf]


@dataclass(frozen=True)
class AppearanceTrainConfig:
    lr0: float = 0.1
    halve_every: int = 8
    batch: int = 32
    epochs: int = 30
    seed: int = 0


@dataclass
class AppearanceTrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1


def fc_input_dim(crop_size: int) -> int:
    side = (crop_size // 2) // 2
    return CONV2_MAPS * side * side


def init_appearance(crop_size: int = DEFAULT_CROP_SIZE, seed: int = 0) -> AppearanceModel:
    """Seeded uniform +-sqrt(6/(fan_in+fan_out)) init, zero biases."""
    if crop_size < 4:
        raise ValueError(f"crop size must be >= 4, got {crop_size}")
    rng = np.random.default_rng(seed)

    def u(shape, fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape)

    d = fc_input_dim(crop_size)
    return AppearanceModel(
        k1=u((CONV1_MAPS, 1, 3, 3), 9, CONV1_MAPS * 9),
        b1=np.zeros(CONV1_MAPS),
        k2=u((CONV2_MAPS, CONV1_MAPS, 3, 3), CONV1_MAPS * 9, CONV2_MAPS * 9),
        b2=np.zeros(CONV2_MAPS),
        wf=u((d,), d, 1),
        bf=0.0,
        crop_size=crop_size,
    )


def crop_resize(img: Image, face: Rect, size: int = DEFAULT_CROP_SIZE) -> FaceCrop:
    """Bilinear-resample the face region to size x size luma in [0, 1]."""
    if face.w <= 0 or face.h <= 0:
        raise ValueError(f"degenerate face rect {face}")
    luma = to_luma(crop(img, face))
    plane = resize_bilinear(luma.data.astype(np.float64), size, size)
    return FaceCrop(np.clip(plane / 255.0, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Layers.  x is (batch, channels, h, w) throughout.


def _im2col(x: np.ndarray) -> np.ndarray:
    """Unroll padded 3x3 neighborhoods: (b, c, h, w) -> (b, h*w, c*9)."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (b, c, h, w, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, h * w, c * 9)


def _conv_forward(x: np.ndarray, k: np.ndarray, bias: np.ndarray):
    b, c, h, w = x.shape
    cols = _im2col(x)
    kmat = k.reshape(k.shape[0], -1)
    out = cols @ kmat.T + bias
    return out.reshape(b, h, w, k.shape[0]).transpose(0, 3, 1, 2), cols


def _conv_backward(dout: np.ndarray, cols: np.ndarray, k: np.ndarray, x_shape):
    b, c, h, w = x_shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(b, h * w, k.shape[0])
    db = dmat.sum(axis=(0, 1))
    dk = np.einsum("bpo,bpi->oi", dmat, cols).reshape(k.shape)
    dcols = (dmat @ k.reshape(k.shape[0], -1)).reshape(b, h, w, c, 3, 3)
    dxp = np.zeros((b, c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di : di + h, dj : dj + w] += dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return dxp[:, :, 1 : 1 + h, 1 : 1 + w], dk, db


def _pool_forward(x: np.ndarray):
    b, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    t = x[:, :, : 2 * ho, : 2 * wo]
    t = t.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
    idx = t.argmax(axis=-1)
    out = np.take_along_axis(t, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def _pool_backward(dout: np.ndarray, cache):
    idx, (b, c, h, w) = cache
    ho, wo = h // 2, w // 2
    dt = np.zeros((b, c, ho, wo, 4))
    np.put_along_axis(dt, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros((b, c, h, w))
    dx[:, :, : 2 * ho, : 2 * wo] = (
        dt.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * ho, 2 * wo)
    )
    return dx


def _forward_logits(model: AppearanceModel, x: np.ndarray, keep: bool = False):
    """Logits for a (batch, S, S) stack; keep=True retains backprop caches."""
    x4 = x[:, None, :, :]
    c1, cols1 = _conv_forward(x4, model.k1, model.b1)
    a1 = np.maximum(c1, 0.0)
    p1, pc1 = _pool_forward(a1)
    c2, cols2 = _conv_forward(p1, model.k2, model.b2)
    a2 = np.maximum(c2, 0.0)
    p2, pc2 = _pool_forward(a2)
    flat = p2.reshape(x.shape[0], -1)
    z = flat @ model.wf + model.bf
    if not keep:
        return z, None
    return z, (x4, cols1, c1, pc1, p1, cols2, c2, pc2, p2, flat)


def _backward(model: AppearanceModel, cache, dz: np.ndarray):
    """Gradients of the summed loss given dL/dlogit per sample."""
    x4, cols1, c1, pc1, p1, cols2, c2, pc2, p2, flat = cache
    dwf = flat.T @ dz
    dbf = float(dz.sum())
    dflat = dz[:, None] * model.wf[None, :]
    dp2 = dflat.reshape(p2.shape)
    da2 = _pool_backward(dp2, pc2)
    dc2 = da2 * (c2 > 0.0)
    dp1, dk2, db2 = _conv_backward(dc2, cols2, model.k2, p1.shape)
    da1 = _pool_backward(dp1, pc1)
    dc1 = da1 * (c1 > 0.0)
    _, dk1, db1 = _conv_backward(dc1, cols1, model.k1, x4.shape)
    return [dk1, db1, dk2, db2, dwf], dbf


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def forward_F(model: AppearanceModel, face: FaceCrop) -> float:
    """Tampering score F(q) = sigmoid(logit) for one crop."""
    if face.size != model.crop_size:
        raise ValueError(f"crop size {face.size} does not match model {model.crop_size}")
    z, _ = _forward_logits(model, face.pixels[None, :, :])
    return float(_sigmoid(z)[0])


def forward_batch(model: AppearanceModel, crops: np.ndarray) -> np.ndarray:
    """Scores for a (n, S, S) stack of crops."""
    z, _ = _forward_logits(model, np.asarray(crops, dtype=np.float64))
    return _sigmoid(z)


def bce_loss_grads(model: AppearanceModel, x: np.ndarray, y: np.ndarray):
    """Summed binary cross-entropy and parameter gradients for a batch.

    Computed from logits directly so large margins cannot overflow.
    """
    z, cache = _forward_logits(model, x, keep=True)
    loss = float(np.sum(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    dz = _sigmoid(z) - y
    grads, dbf = _backward(model, cache, dz)
    return loss, grads, dbf


def train_appearance(
    crops: np.ndarray, labels: np.ndarray, config: AppearanceTrainConfig, crop_size: int | None = None
) -> tuple[AppearanceModel, AppearanceTrainLog]:
    """SGD on binary cross-entropy with an 80/20 split and best-val checkpoint.

    crops: (n, S, S) in [0,1]; labels: (n,) of 0 (authentic) and 1 (tampered).
    Deterministic for a given seed; raises on single-class data and on
    non-finite loss.
    """
    crops = np.asarray(crops, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if crops.ndim != 3 or labels.shape != (crops.shape[0],):
        raise ValueError(f"bad shapes crops={crops.shape} labels={labels.shape}")
    if not np.all(np.isin(labels, (0.0, 1.0))):
        raise ValueError("labels must be 0 or 1")
    if np.all(labels == labels[0]):
        raise ValueError("single-class data: both labels must be present")
    size = crop_size if crop_size is not None else crops.shape[1]

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(crops.shape[0])
    n_val = int(round(0.2 * crops.shape[0]))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        train_idx, val_idx = order, order[:0]

    model = init_appearance(size, seed=int(rng.integers(2**63)))
    log = AppearanceTrainLog()

    def val_loss():
        idx = val_idx if val_idx.size else train_idx
        z, _ = _forward_logits(model, crops[idx])
        yv = labels[idx]
        return float(np.mean(np.maximum(z, 0.0) - z * yv + np.log1p(np.exp(-np.abs(z)))))

    best = (val_loss(), [p.copy() for p in model.params()], model.bf)
    for epoch in range(config.epochs):
        lr = learning_rate(config.lr0, epoch, config.halve_every)
        perm = rng.permutation(train_idx)
        epoch_loss = 0.0
        for start in range(0, perm.size, config.batch):
            idx = perm[start : start + config.batch]
            loss, grads, dbf = bce_loss_grads(model, crops[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            epoch_loss += loss
            scale = lr / idx.size
            for p, g in zip(model.params(), grads):
                p -= scale * g
            model.bf -= scale * dbf
        vl = val_loss()
        if not np.isfinite(vl):
            raise TrainingDiverged(f"non-finite validation loss after epoch {epoch}")
        log.train_loss.append(epoch_loss / max(perm.size, 1))
        log.val_loss.append(vl)
        if vl < best[0]:
            best = (vl, [p.copy() for p in model.params()], model.bf)
            log.best_epoch = epoch
    model.k1, model.b1, model.k2, model.b2, model.wf = best[1]
    model.bf = best[2]
    return model, log


# ---------------------------------------------------------------------------
# External scores: CSV "image,face_index,score", one face per row.


class ExternalScores(dict):
    """Map (image path, face index) -> score, loaded from CSV."""


def load_external_scores(path) -> ExternalScores:
    out = ExternalScores()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image", "face_index", "score"]:
            raise ValueError(f"{path}: expected header image,face_index,score, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            image, idx_s, score_s = row
            try:
                idx = int(idx_s)
                score = float(score_s)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if not np.isfinite(score):
                raise ValueError(f"{path}:{lineno}: score {score_s} is not finite")
            key = (image, idx)
            if key in out:
                raise ValueError(f"{path}:{lineno}: duplicate face {key}")
            out[key] = score
    return out


def save_external_scores(scores: ExternalScores, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "face_index", "score"])
        for (image, idx), s in scores.items():
            writer.writerow([image, idx, f"{s:.6f}"])


# ---------------------------------------------------------------------------
# Model files: "TSA1" | u32 S | u32 c1 | u32 c2 | float32 LE k1, b1, k2, b2,
# wf, bf (row-major, the order of AppearanceModel.params() plus bf).


def save_appearance(model: AppearanceModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(APPEARANCE_MAGIC)
        fh.write(struct.pack("<III", model.crop_size, model.k1.shape[0], model.k2.shape[0]))
        for arr in model.params():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        fh.write(np.array([model.bf], dtype="<f4").tobytes())


def load_appearance(path) -> AppearanceModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != APPEARANCE_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {APPEARANCE_MAGIC!r}")
    size, c1, c2 = struct.unpack_from("<III", blob, 4)
    side = (size // 2) // 2
    d = c2 * side * side
    counts = [c1 * 1 * 9, c1, c2 * c1 * 9, c2, d, 1]
    need = 16 + 4 * sum(counts)
    if len(blob) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(blob)}")
    off = 16
    arrs = []
    for cnt in counts:
        arrs.append(np.frombuffer(blob, dtype="<f4", count=cnt, offset=off).astype(np.float64))
        off += 4 * cnt
    return AppearanceModel(
        k1=arrs[0].reshape(c1, 1, 3, 3),
        b1=arrs[1],
        k2=arrs[2].reshape(c2, c1, 3, 3),
        b2=arrs[3],
        wf=arrs[4],
        bf=float(arrs[5][0]),
        crop_size=size,
    )
