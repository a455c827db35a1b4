"""Test-set evaluation, accuracy trace summaries and neural-collapse diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .nn import forward

EVAL_CHUNK = 4096


@dataclass
class AccuracyTrace:
    rounds: list[int] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.rounds) != len(self.accuracies):
            raise ValueError("rounds and accuracies differ in length")
        if any(b <= a for a, b in zip(self.rounds, self.rounds[1:])):
            raise ValueError("rounds must be strictly increasing")
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise ValueError("accuracies must lie in [0, 1]")

    @classmethod
    def from_values(cls, accuracies, start: int = 1) -> "AccuracyTrace":
        accs = [float(a) for a in accuracies]
        return cls(list(range(start, start + len(accs))), accs)

    def __len__(self):
        return len(self.accuracies)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.accuracies, dtype=np.float64)


def predict(model, classifier, features: np.ndarray) -> np.ndarray:
    """Class decisions ``argmax_c w_c^T f(x)``; ties go to the lowest index."""
    w = np.asarray(classifier.weights)
    if model.feature_dim != w.shape[0]:
        raise DimensionError(f"model features have dim {model.feature_dim}, classifier expects {w.shape[0]}")
    out = np.empty(features.shape[0], dtype=np.int64)
    for start in range(0, features.shape[0], EVAL_CHUNK):
        chunk = features[start:start + EVAL_CHUNK]
        out[start:start + EVAL_CHUNK] = np.argmax(forward(model, chunk) @ w, axis=1)
    return out


def evaluate(model, classifier, testset) -> float:
    if len(testset) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if testset.input_dim != model.input_dim:
        raise DimensionError(f"test inputs have dim {testset.input_dim}, model expects {model.input_dim}")
    correct = int(np.sum(predict(model, classifier, testset.features) == testset.labels))
    return correct / len(testset)


def _values(trace) -> np.ndarray:
    if isinstance(trace, AccuracyTrace):
        return trace.as_array()
    return np.asarray(trace, dtype=np.float64)


def trailing_mean(trace, window: int) -> float:
    """Mean over the last ``min(window, len(trace))`` entries."""
    if window < 1:
        raise ValueError("window must be >= 1")
    values = _values(trace)
    if values.size == 0:
        raise ValueError("trailing_mean of an empty trace")
    return float(values[-window:].mean())


def trailing_std(trace, window: int) -> float:
    values = _values(trace)
    if values.size == 0:
        raise ValueError("trailing_std of an empty trace")
    return float(values[-window:].std())


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(4 * sigma))
    offsets = np.arange(-radius, radius + 1)
    return np.exp(-0.5 * (offsets / sigma) ** 2)


def gaussian_smooth(trace, sigma: float = 2.0):
    """Gaussian smoothing truncated at 4 sigma, renormalized where the kernel hangs off an edge.

    Returns the same type it was given (``AccuracyTrace`` or array).
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    values = _values(trace)
    if values.size == 0:
        return trace
    kernel = gaussian_kernel(sigma)
    radius = len(kernel) // 2
    weighted = np.convolve(np.pad(values, radius), kernel, mode="valid")
    mass = np.convolve(np.pad(np.ones_like(values), radius), kernel, mode="valid")
    # a normalized convex combination can still overshoot by an ulp
    smoothed = np.clip(weighted / mass, values.min(), values.max())
    if isinstance(trace, AccuracyTrace):
        return AccuracyTrace(list(trace.rounds), [float(v) for v in smoothed])
    return smoothed


@dataclass
class CollapseReport:
    within_class_variability: float
    mean_cosine_to_etf: float
    nearest_mean_agreement: float
    excluded_classes: list[int]


def nc_diagnostics(model, classifier, dataset) -> CollapseReport:
    """Neural-collapse statistics of the model's features on ``dataset``.

    * within/between ratio: trace of within-class covariance over trace of
      between-class covariance (0 when features sit on their class means);
    * mean cosine between centred class means and the matching classifier
      columns;
    * fraction of samples where the nearest class mean and the classifier agree.
    """
    feats = np.concatenate(
        [forward(model, dataset.features[s:s + EVAL_CHUNK]) for s in range(0, len(dataset), EVAL_CHUNK)]
    )
    labels = dataset.labels
    w = np.asarray(classifier.weights)
    present = [c for c in range(dataset.num_classes) if np.any(labels == c)]
    excluded = [c for c in range(dataset.num_classes) if c not in present]
    if len(present) < 2:
        raise ValueError("nc_diagnostics needs at least two populated classes")

    means = np.stack([feats[labels == c].mean(axis=0) for c in present])
    global_mean = feats.mean(axis=0)
    row_of = {c: i for i, c in enumerate(present)}
    centred = feats - means[[row_of[int(y)] for y in labels]]
    within = float(np.mean(np.sum(centred**2, axis=1)))
    between = float(np.mean(np.sum((means - global_mean) ** 2, axis=1)))
    ratio = within / between if between > 0 else math.inf

    rel = means - global_mean
    cols = w[:, present].T
    denom = np.linalg.norm(rel, axis=1) * np.linalg.norm(cols, axis=1)
    cosines = np.where(denom > 0, np.sum(rel * cols, axis=1) / np.where(denom > 0, denom, 1.0), 0.0)

    dists = ((feats[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    ncm = np.asarray(present)[np.argmin(dists, axis=1)]
    clf = np.argmax(feats @ w, axis=1)
    return CollapseReport(ratio, float(cosines.mean()), float(np.mean(ncm == clf)), excluded)
