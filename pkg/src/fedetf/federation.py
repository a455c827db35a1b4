"""Server/client round logic: sampling, local training with memory-vector
augmentation, and aggregation of models and per-class memory vectors.

Two classifier modes share the same loop.  In ``etf`` mode the classifier is
a frozen :class:`~fedetf.etf.EtfClassifier` and only the backbone trains.  In
``baseline`` mode (plain FedAvg) a :class:`LearnableClassifier` is trained
locally and averaged with the backbone.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ClientShard, LabeledDataset, shard_class_means
from .errors import AggregationError, LabelError, NumericError, TrainingError
from .etf import EtfClassifier, make_etf
from .metrics import evaluate
from .nn import (
    MlpModel,
    backward,
    ce_loss_and_grad,
    ce_loss_and_grads_with_classifier,
    forward_with_cache,
    init_mlp,
    momentum_update,
    sgd_momentum_step,
)
from .seeding import substream, subseed

log = logging.getLogger(__name__)


@dataclass
class MemoryBank:
    """Per-class global memory vectors.

    ``reads`` counts augmented samples that used a valid vector, ``misses``
    counts warm-branch samples whose class vector was not available yet.
    """

    vectors: np.ndarray  # (C, d)
    valid: np.ndarray  # (C,) bool
    warm_round: int
    alpha: float
    reads: int = 0
    misses: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @classmethod
    def empty(cls, num_classes: int, feature_dim: int, warm_round: int, alpha: float) -> "MemoryBank":
        return cls(np.zeros((num_classes, feature_dim)), np.zeros(num_classes, dtype=bool), warm_round, alpha)

    def is_warm(self, round_index: int) -> bool:
        return round_index >= self.warm_round

    def record(self, reads: int, misses: int) -> None:
        with self._lock:
            self.reads += reads
            self.misses += misses


@dataclass
class LearnableClassifier:
    weights: np.ndarray  # (d, C)
    momentum: np.ndarray = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.weights)
        if self.momentum.shape != self.weights.shape:
            raise AggregationError("classifier momentum buffer does not match its weights")

    @classmethod
    def init(cls, feature_dim: int, num_classes: int, rng: np.random.Generator) -> "LearnableClassifier":
        bound = 1.0 / math.sqrt(feature_dim)
        return cls(rng.uniform(-bound, bound, size=(feature_dim, num_classes)))


@dataclass
class ServerState:
    global_model: MlpModel
    classifier: EtfClassifier | LearnableClassifier
    memory: MemoryBank
    round: int = 0


@dataclass
class RoundReport:
    round: int
    selected: tuple[int, ...]
    mean_local_loss: float
    test_accuracy: float
    wall_ms: float
    memory_reads: int = 0
    memory_misses: int = 0


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 2
    batch_size: int = 64
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4

    @classmethod
    def from_config(cls, config) -> "TrainSettings":
        return cls(config.local_epochs, config.batch_size, config.lr, config.momentum, config.weight_decay)


@dataclass
class LocalResult:
    client_id: int
    model: MlpModel
    class_means: dict[int, np.ndarray]
    mean_loss: float
    num_samples: int
    classifier_weights: np.ndarray | None = None


def num_selected(num_clients: int, fraction: float) -> int:
    # the epsilon keeps e.g. 0.1 * 30 = 3.0000000000000004 from rounding up to 4
    return max(1, math.ceil(fraction * num_clients - 1e-9))


def sample_clients(num_clients: int, fraction: float, round_index: int, seed: int) -> list[int]:
    """``ceil(fraction * K)`` distinct client ids, sorted; a pure function of (seed, round)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    m = num_selected(num_clients, fraction)
    rng = substream(seed, "sampling", round_index)
    return sorted(int(k) for k in rng.choice(num_clients, size=m, replace=False))


def gmv_augment(features, labels, bank: MemoryBank | None, round_index: int) -> np.ndarray:
    """``h = f + alpha * mu[y]`` in warm rounds, ``h = f`` otherwise.

    Accepts a single vector with a scalar label or a batch.  A warm-round
    sample whose class vector is not valid yet keeps ``h = f`` and counts as
    a miss.  The memory vector is a constant: nothing flows back into it.
    """
    f = np.asarray(features, dtype=np.float64)
    if bank is None or bank.alpha == 0 or not bank.is_warm(round_index):
        return f
    single = f.ndim == 1
    batch = np.atleast_2d(f)
    y = np.atleast_1d(np.asarray(labels))
    if y.min() < 0 or y.max() >= len(bank.valid):
        raise LabelError(f"labels must lie in [0, {len(bank.valid)})")
    ok = bank.valid[y]
    h = batch.copy()
    h[ok] += bank.alpha * bank.vectors[y[ok]]
    bank.record(int(ok.sum()), int((~ok).sum()))
    return h[0] if single else h


def local_train(
    client: ClientShard,
    dataset: LabeledDataset,
    init_model: MlpModel,
    classifier,
    bank: MemoryBank | None,
    round_index: int,
    settings: TrainSettings,
    seed: int,
) -> LocalResult:
    """Local SGD epochs for one client, then class means of the trained model's raw features."""
    model = init_model.reset_momentum()
    learnable = isinstance(classifier, LearnableClassifier)
    w = np.array(classifier.weights) if learnable else classifier.weights
    w_buf = np.zeros_like(w) if learnable else None

    rng = substream(seed, "shuffle", round_index, client.client_id)
    indices = client.sample_indices
    total_loss, seen = 0.0, 0
    for _ in range(settings.epochs):
        order = indices[rng.permutation(len(indices))]
        for batch_no, start in enumerate(range(0, len(order), settings.batch_size)):
            chosen = order[start:start + settings.batch_size]
            x, y = dataset.features[chosen], dataset.labels[chosen]
            f, cache = forward_with_cache(model, x)
            h = gmv_augment(f, y, bank, round_index)
            if learnable:
                loss, grad_h, grad_w = ce_loss_and_grads_with_classifier(h, y, w)
            else:
                loss, grad_h = ce_loss_and_grad(h, y, w)
            if not math.isfinite(loss):
                raise TrainingError("non-finite loss", round_index, client.client_id, batch_no)
            grads = backward(model, x, grad_h, cache=cache)
            try:
                model = sgd_momentum_step(model, grads, settings.lr, settings.momentum, settings.weight_decay)
            except NumericError as exc:
                raise TrainingError(str(exc), round_index, client.client_id, batch_no) from exc
            if learnable:
                w, w_buf = momentum_update(w, grad_w, w_buf, settings.lr, settings.momentum, settings.weight_decay)
            total_loss += loss
            seen += len(chosen)

    means = shard_class_means(dataset, client, model)
    return LocalResult(
        client_id=client.client_id,
        model=model,
        class_means=means,
        mean_loss=total_loss / seen if seen else math.nan,
        num_samples=client.num_samples,
        classifier_weights=w if learnable else None,
    )


def _coefficients(count: int, weights) -> list[float]:
    if weights is None:
        return [1.0 / count] * count
    weights = [float(v) for v in weights]
    if len(weights) != count:
        raise AggregationError(f"{len(weights)} weights for {count} models")
    if any(not v > 0 for v in weights):
        raise AggregationError("aggregation weights must be positive")
    total = math.fsum(weights)
    return [v / total for v in weights]


def _canonical(items: list, client_ids) -> list[int]:
    if client_ids is None:
        return list(range(len(items)))
    if len(client_ids) != len(items):
        raise AggregationError(f"{len(client_ids)} client ids for {len(items)} models")
    return sorted(range(len(items)), key=lambda i: client_ids[i])


def weighted_mean(arrays: list[np.ndarray], coefficients: list[float]) -> np.ndarray:
    acc = coefficients[0] * arrays[0]
    for c, a in zip(coefficients[1:], arrays[1:]):
        acc = acc + c * a
    return acc


def aggregate_models(models: list[MlpModel], weights=None, client_ids=None) -> MlpModel:
    """Parameter-wise (weighted) mean.

    With ``client_ids`` the models are summed in ascending id order, so any
    permutation of the inputs gives bit-identical output.  Momentum buffers
    are not aggregated; the result starts with zero buffers.
    """
    if not models:
        raise AggregationError("nothing to aggregate")
    order = _canonical(models, client_ids)
    models = [models[i] for i in order]
    if weights is not None:
        weights = [list(weights)[i] for i in order]
    dims = models[0].layer_dims
    for m in models[1:]:
        if m.layer_dims != dims:
            raise AggregationError(f"model shapes differ: {m.layer_dims} vs {dims}")
    coeff = _coefficients(len(models), weights)
    params = [weighted_mean([m.parameters()[i] for m in models], coeff) for i in range(2 * len(dims) - 2)]
    return MlpModel(dims, tuple(params[0::2]), tuple(params[1::2]))


def aggregate_classifiers(weight_list: list[np.ndarray], weights=None, client_ids=None) -> LearnableClassifier:
    order = _canonical(weight_list, client_ids)
    ws = [weight_list[i] for i in order]
    if weights is not None:
        weights = [list(weights)[i] for i in order]
    if any(w.shape != ws[0].shape for w in ws):
        raise AggregationError("classifier shapes differ")
    return LearnableClassifier(weighted_mean(ws, _coefficients(len(ws), weights)))


def aggregate_memory(bank: MemoryBank, per_client_means: list[dict[int, np.ndarray]], client_ids=None) -> MemoryBank:
    """Average each class's mean feature over the clients that hold that class.

    Classes no client reported keep their previous vector and validity.
    With ``client_ids`` the maps are summed in ascending id order.
    """
    per_client_means = [per_client_means[i] for i in _canonical(per_client_means, client_ids)]
    vectors = bank.vectors.copy()
    valid = bank.valid.copy()
    for j in range(len(valid)):
        contributions = [m[j] for m in per_client_means if j in m]
        if not contributions:
            continue
        vectors[j] = weighted_mean(contributions, [1.0 / len(contributions)] * len(contributions))
        valid[j] = True
    return MemoryBank(vectors, valid, bank.warm_round, bank.alpha, bank.reads, bank.misses)


def initial_state(config, input_dim: int) -> ServerState:
    """Fresh server state; backbone and classifier draw from the ``init``/``etf`` streams."""
    dims = (input_dim, *config.hidden_dims, config.feature_dim)
    model = init_mlp(dims, substream(config.seed, "init", 0))
    if config.mode == "etf":
        classifier = make_etf(config.feature_dim, config.num_classes, config.etf_scale,
                              subseed(config.seed, "etf"))
    else:
        classifier = LearnableClassifier.init(config.feature_dim, config.num_classes,
                                              substream(config.seed, "init", 1))
    memory = MemoryBank.empty(config.num_classes, config.feature_dim, config.gmv_warm_round, config.gmv_alpha)
    return ServerState(model, classifier, memory, 0)


def memory_active(config, round_index: int) -> bool:
    """Aggregation of memory vectors starts one round before the warm branch first reads them."""
    return bool(config.gmv_enabled) and round_index >= config.gmv_warm_round - 1


def run_round(
    server: ServerState,
    shards: list[ClientShard],
    dataset: LabeledDataset,
    testset: LabeledDataset,
    config,
) -> tuple[ServerState, RoundReport]:
    started = time.perf_counter()
    t = server.round + 1
    selected = sample_clients(len(shards), config.sample_fraction, t, config.seed)
    bank = server.memory if config.gmv_enabled else None
    reads_before = (server.memory.reads, server.memory.misses)
    settings = TrainSettings.from_config(config)

    def train(cid):
        return local_train(shards[cid], dataset, server.global_model, server.classifier, bank, t,
                           settings, config.seed)

    workers = min(config.max_parallel_clients, len(selected))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(train, selected))
    else:
        results = [train(cid) for cid in selected]
    results.sort(key=lambda r: r.client_id)

    ids = [r.client_id for r in results]
    counts = [r.num_samples for r in results] if config.weighting == "samples" else None
    model = aggregate_models([r.model for r in results], counts, ids)
    classifier = server.classifier
    if isinstance(classifier, LearnableClassifier):
        classifier = aggregate_classifiers([r.classifier_weights for r in results], counts, ids)
    memory = server.memory
    if memory_active(config, t):
        memory = aggregate_memory(memory, [r.class_means for r in results], ids)

    accuracy = evaluate(model, classifier, testset)
    losses = [r.mean_loss for r in results]
    report = RoundReport(
        round=t,
        selected=tuple(ids),
        mean_local_loss=math.fsum(losses) / len(losses),
        test_accuracy=accuracy,
        wall_ms=(time.perf_counter() - started) * 1000.0,
        memory_reads=memory.reads - reads_before[0],
        memory_misses=memory.misses - reads_before[1],
    )
    if report.memory_misses:
        log.warning("round %d: %d samples lacked a valid memory vector", t, report.memory_misses)
    return ServerState(model, classifier, memory, t), report
