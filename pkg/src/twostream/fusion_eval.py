"""Score fusion, lambda calibration, and face-level ROC/AUC evaluation.

The two streams are combined per face as fused = F + lambda * Sbar, where F
is the appearance score and Sbar the mean patch score.  AUC is computed two
independent ways, by the Mann-Whitney rank statistic (ties counted half) and
by trapezoidal integration of the threshold-sweep curve; the pair must agree
to 1e-12, which guards both implementations at once.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

DEFAULT_LAMBDA = 1.0
DEFAULT_LAMBDA_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class FaceScore:
    """Scores of one face: appearance F, mean patch score Sbar over n_q patches."""

    face_id: str
    label: int  # 1 tampered, 0 authentic
    f: float
    sbar: float
    n_q: int
    fused: float

    def __post_init__(self):
        if self.n_q < 1:
            raise ValueError(f"{self.face_id}: patch count must be >= 1, got {self.n_q}")
        if self.label not in (0, 1):
            raise ValueError(f"{self.face_id}: label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def fuse(f: float, sbar: float, lam: float) -> float:
    """Combined score F + lambda * Sbar."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return f + lam * sbar


def make_face_score(face_id: str, label: int, f: float, sbar: float, n_q: int, lam: float) -> FaceScore:
    return FaceScore(face_id=face_id, label=label, f=f, sbar=sbar, n_q=n_q, fused=fuse(f, sbar, lam))


def auc_rank(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC: P(tampered score > authentic score) + half the ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both labels must be present")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    # Midranks: average rank within each tie group, 1-based.
    n = scores.size
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[i : j + 1] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    rank_by_item = np.empty(n)
    rank_by_item[order] = ranks
    r_pos = rank_by_item[labels == 1].sum()
    u = r_pos - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def roc_curve(scores: np.ndarray, labels: np.ndarray) -> RocCurve:
    """Threshold sweep over the distinct scores, plus trapezoidal AUC.

    Points are (fpr, tpr) of the rule "score >= threshold is tampered",
    ordered from (0,0) (threshold above every score) to (1,1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both labels must be present")
    distinct = np.unique(scores)[::-1]  # descending
    thresholds = np.concatenate([[np.inf], distinct])
    fpr = np.empty(thresholds.size)
    tpr = np.empty(thresholds.size)
    for k, t in enumerate(thresholds):
        flag = scores >= t
        tpr[k] = np.sum(flag & (labels == 1)) / n_pos
        fpr[k] = np.sum(flag & (labels == 0)) / n_neg
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> RocCurve:
    """ROC curve whose AUC is cross-checked between the two computations."""
    curve = roc_curve(scores, labels)
    rank = auc_rank(scores, labels)
    if abs(curve.auc - rank) > 1e-12:
        raise AssertionError(
            f"AUC cross-check failed: sweep {curve.auc!r} vs rank {rank!r}"
        )
    return RocCurve(thresholds=curve.thresholds, fpr=curve.fpr, tpr=curve.tpr, auc=rank)


def calibrate_lambda(
    f: np.ndarray, sbar: np.ndarray, labels: np.ndarray, grid=DEFAULT_LAMBDA_GRID
) -> float:
    """Grid value maximizing validation AUC of F + lambda*Sbar; ties go small."""
    grid = tuple(grid)
    if len(grid) == 0:
        raise ValueError("lambda grid is empty")
    f = np.asarray(f, dtype=np.float64)
    sbar = np.asarray(sbar, dtype=np.float64)
    best_lam, best_auc = None, -1.0
    for lam in sorted(grid):
        auc = auc_rank(f + lam * sbar, labels)
        if auc > best_auc:
            best_lam, best_auc = lam, auc
    return float(best_lam)


def evaluate_faces(face_scores: list[FaceScore]) -> RocCurve:
    scores = np.array([fs.fused for fs in face_scores])
    labels = np.array([fs.label for fs in face_scores])
    return roc_auc(scores, labels)


def write_report(face_scores: list[FaceScore], path) -> None:
    """CSV rows face_id,label,F,Sbar,Nq,fused sorted by face id."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["face_id", "label", "F", "Sbar", "Nq", "fused"])
        for fs in sorted(face_scores, key=lambda s: s.face_id):
            writer.writerow(
                [fs.face_id, fs.label, f"{fs.f:.6f}", f"{fs.sbar:.6f}", fs.n_q, f"{fs.fused:.6f}"]
            )


def read_report(path) -> list[FaceScore]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["face_id", "label", "F", "Sbar", "Nq", "fused"]:
            raise ValueError(f"{path}: unexpected report header {header}")
        for row in reader:
            if not row:
                continue
            out.append(
                FaceScore(
                    face_id=row[0],
                    label=int(row[1]),
                    f=float(row[2]),
                    sbar=float(row[3]),
                    n_q=int(row[4]),
                    fused=float(row[5]),
                )
            )
    return out


def write_roc(curve: RocCurve, path) -> None:
    """Lines threshold,fpr,tpr and a trailing comment line with the AUC."""
    with open(path, "w") as fh:
        for t, fp, tp in zip(curve.thresholds, curve.fpr, curve.tpr):
            fh.write(f"{t:.6g},{fp:.6f},{tp:.6f}\n")
        fh.write(f"# auc={curve.auc:.6f}\n")
