"""Whole-run orchestration: data loading, the round loop, and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np

from .data import LabeledDataset, SceneSpec, load_idx_pair, make_gaussian_mixture, partition_label_shift
from .errors import ConfigError
from .etf import EtfClassifier
from .federation import LearnableClassifier, MemoryBank, RoundReport, ServerState, initial_state, run_round
from .metrics import evaluate
from .nn import MlpModel
from .seeding import subseed

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def load_datasets(config) -> tuple[LabeledDataset, LabeledDataset]:
    """Train and test sets for ``config``.

    Synthetic train pools hold just enough samples per class to cover the
    round-robin demand ``ceil(K*S*n/C)``; train and test share class centers.
    """
    if config.source == "idx":
        train = load_idx_pair(config.train_images, config.train_labels, config.num_classes)
        test = load_idx_pair(config.test_images, config.test_labels, config.num_classes)
        if train.input_dim != test.input_dim:
            raise ConfigError(f"train images have dim {train.input_dim}, test images {test.input_dim}")
        return train, test
    C = config.num_classes
    per_class = math.ceil(config.num_clients * config.classes_per_client * config.samples_per_class / C)
    centers = subseed(config.seed, "centers")
    train = make_gaussian_mixture(C, config.input_dim, per_class, config.spread,
                                  subseed(config.seed, "data", 0), center_seed=centers)
    test = make_gaussian_mixture(C, config.input_dim, config.test_per_class, config.spread,
                                 subseed(config.seed, "data", 1), center_seed=centers)
    return train, test


def scene_spec(config) -> SceneSpec:
    return SceneSpec(config.num_clients, config.classes_per_client, config.samples_per_class,
                     subseed(config.seed, "partition"))


class Experiment:
    """A resumable run.  ``step()`` executes one round and returns its report."""

    def __init__(self, config, dataset: LabeledDataset, testset: LabeledDataset, state: ServerState | None = None):
        self.config = config.validate()
        self.dataset = dataset
        self.testset = testset
        self.shards = partition_label_shift(dataset, scene_spec(config))
        self.state = state if state is not None else initial_state(config, dataset.input_dim)
        self.initial_accuracy = evaluate(self.state.global_model, self.state.classifier, testset)

    @property
    def round(self) -> int:
        return self.state.round

    @property
    def finished(self) -> bool:
        return self.state.round >= self.config.rounds

    def step(self) -> RoundReport:
        self.state, report = run_round(self.state, self.shards, self.dataset, self.testset, self.config)
        return report

    def save_checkpoint(self, path) -> Path:
        return save_checkpoint(path, self.state, self.config)

    @classmethod
    def resume(cls, checkpoint_path, config, dataset, testset) -> "Experiment":
        return cls(config, dataset, testset, state=load_checkpoint(checkpoint_path, config))


def run_experiment(config, dataset, testset, sink=None, checkpoint_dir=None) -> list[RoundReport]:
    """Run all ``config.rounds`` rounds, handing each report to ``sink`` as soon as it exists."""
    exp = Experiment(config, dataset, testset)
    log.info("round 0: test accuracy %.4f", exp.initial_accuracy)
    reports = []
    while not exp.finished:
        report = exp.step()
        reports.append(report)
        if sink is not None:
            sink(report)
        if checkpoint_dir is not None and config.checkpoint_every and report.round % config.checkpoint_every == 0:
            exp.save_checkpoint(Path(checkpoint_dir) / f"round_{report.round:05d}.npz")
    return reports


def save_checkpoint(path, state: ServerState, config) -> Path:
    """Everything needed to continue bit-identically.

    Every random stream is a pure function of (seed, purpose, round, client),
    so the seed plus the round index is the complete RNG state.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    clf = state.classifier
    meta = {
        "version": CHECKPOINT_VERSION,
        "config_digest": config.digest(),
        "round": state.round,
        "rng": {"seed": config.seed, "next_round": state.round + 1},
        "layer_dims": list(state.global_model.layer_dims),
        "classifier": "etf" if isinstance(clf, EtfClassifier) else "learnable",
        "etf": (
            {"scale": clf.scale, "num_classes": clf.num_classes, "feature_dim": clf.feature_dim, "seed": clf.seed}
            if isinstance(clf, EtfClassifier) else None
        ),
        "memory": {
            "warm_round": state.memory.warm_round,
            "alpha": state.memory.alpha,
            "reads": state.memory.reads,
            "misses": state.memory.misses,
        },
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for i, (w, b) in enumerate(zip(state.global_model.weights, state.global_model.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    arrays["classifier"] = np.asarray(clf.weights)
    arrays["memory_vectors"] = state.memory.vectors
    arrays["memory_valid"] = state.memory.valid
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, config=None) -> ServerState:
    with np.load(path) as blob:
        meta = json.loads(blob["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        if config is not None and meta["config_digest"] != config.digest():
            raise ConfigError(f"{path}: checkpoint was written by a different configuration")
        n_layers = len(meta["layer_dims"]) - 1
        model = MlpModel(
            tuple(meta["layer_dims"]),
            tuple(blob[f"w{i}"].copy() for i in range(n_layers)),
            tuple(blob[f"b{i}"].copy() for i in range(n_layers)),
        )
        if meta["classifier"] == "etf":
            etf = meta["etf"]
            clf = EtfClassifier(blob["classifier"].copy(), etf["scale"], etf["num_classes"], etf["feature_dim"],
                                etf["seed"])
        else:
            clf = LearnableClassifier(blob["classifier"].copy())
        mem = meta["memory"]
        memory = MemoryBank(blob["memory_vectors"].copy(), blob["memory_valid"].copy(), mem["warm_round"],
                            mem["alpha"], mem["reads"], mem["misses"])
    return ServerState(model, clf, memory, meta["round"])
