"""Frozen simplex equiangular tight frame classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EtfConstructionError


@dataclass(frozen=True)
class EtfClassifier:
    weights: np.ndarray  # (feature_dim, num_classes), column c is w_c
    scale: float
    num_classes: int
    feature_dim: int
    seed: int

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def rescaled(self, scale: float) -> "EtfClassifier":
        """Same frame with a different scale; the unit frame is reused exactly."""
        if scale <= 0:
            raise EtfConstructionError("scale must be positive")
        return EtfClassifier(self.weights * (scale / self.scale), scale, self.num_classes,
                             self.feature_dim, self.seed)


def make_etf(feature_dim: int, num_classes: int, scale: float = 1.0, seed: int = 0) -> EtfClassifier:
    """Random simplex ETF ``scale * sqrt(C/(C-1)) * P (I - 11^T/C)``.

    ``P`` is a ``d x C`` matrix with orthonormal columns, the Q factor of a
    seeded standard Gaussian matrix.  Requires ``d >= C >= 2``.
    """
    d, c = int(feature_dim), int(num_classes)
    if c < 2:
        raise EtfConstructionError(f"need at least 2 classes, got {c}")
    if d < c:
        raise EtfConstructionError(f"feature_dim {d} < num_classes {c}")
    if not scale > 0:
        raise EtfConstructionError(f"scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    p, _ = np.linalg.qr(rng.standard_normal((d, c)))
    centering = np.eye(c) - np.full((c, c), 1.0 / c)
    w = scale * np.sqrt(c / (c - 1)) * (p @ centering)
    return EtfClassifier(w, float(scale), c, d, int(seed))


@dataclass
class EtfReport:
    """Deviations from the three frame conditions, all relative to ``scale``."""

    tol: float
    max_norm_deviation: float
    worst_norm_column: int
    max_cosine_deviation: float
    worst_pair: tuple[int, int]
    tight_frame_deviation: float
    column_sum_norm: float

    @property
    def norms_ok(self) -> bool:
        return self.max_norm_deviation <= self.tol

    @property
    def equiangular_ok(self) -> bool:
        return self.max_cosine_deviation <= self.tol

    @property
    def tight_frame_ok(self) -> bool:
        return self.tight_frame_deviation <= self.tol

    @property
    def ok(self) -> bool:
        return self.norms_ok and self.equiangular_ok and self.tight_frame_ok

    def failures(self) -> list[str]:
        out = []
        if not self.norms_ok:
            out.append(f"column {self.worst_norm_column} norm off by {self.max_norm_deviation:.3g}")
        if not self.equiangular_ok:
            i, j = self.worst_pair
            out.append(f"columns {i},{j} cosine off by {self.max_cosine_deviation:.3g}")
        if not self.tight_frame_ok:
            out.append(f"not a tight frame on its span (deviation {self.tight_frame_deviation:.3g})")
        return out


def validate_etf(classifier, tol: float = 1e-6) -> EtfReport:
    """Check unit (``scale``) norms, equiangularity and tightness of the frame.

    Tightness: ``W^T W`` must have ``C-1`` eigenvalues equal to
    ``scale^2 * C/(C-1)`` and one zero eigenvalue.
    """
    w = np.asarray(classifier.weights, dtype=np.float64)
    beta = float(classifier.scale)
    c = w.shape[1]
    norms = np.linalg.norm(w, axis=0)
    norm_dev = np.abs(norms - beta) / beta
    worst_col = int(np.argmax(norm_dev))

    unit = w / np.where(norms > 0, norms, 1.0)
    cos = unit.T @ unit
    off = ~np.eye(c, dtype=bool)
    cos_dev = np.where(off, np.abs(cos + 1.0 / (c - 1)), 0.0)
    flat = int(np.argmax(cos_dev))
    worst_pair = (flat // c, flat % c)

    eig = np.sort(np.linalg.eigvalsh(w.T @ w))
    target = beta**2 * c / (c - 1)
    frame_dev = max(np.max(np.abs(eig[1:] - target)), abs(eig[0])) / beta**2

    return EtfReport(
        tol=tol,
        max_norm_deviation=float(norm_dev.max()),
        worst_norm_column=worst_col,
        max_cosine_deviation=float(cos_dev.max()),
        worst_pair=worst_pair,
        tight_frame_deviation=float(frame_dev),
        column_sum_norm=float(np.linalg.norm(w.sum(axis=1)) / beta),
    )
