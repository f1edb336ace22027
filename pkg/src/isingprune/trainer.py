"""Training loop that evolves pruning states while training the network."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigError, NumericalError
from .evolve import (StatePopulation, best_state, evolve_step, init_population, row_streams, score,
                     state_spread)
from .ising import build_graph, gather_stats
from .model import Network, apply_mask, masked_param_count, materialize_pruned, param_activity

DEFAULT_KS = (1, 3, 5)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 50
    pop_size: int = 8
    mutation_factor: float = 0.5
    crossover: float = 0.5
    seed: int = 0
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-5
    early_threshold: float = 0.0
    patience: int = 1
    kl_eps: float = 1e-6
    kl_ceiling: float | None = None
    dataset: str = "synthetic"
    classes: int = 4
    samples_per_class: int = 500
    test_per_class: int = 100
    image_size: int = 16
    noise: float = 0.35
    data_seed: int | None = None
    test_fraction: float = 0.2
    out: str | None = None

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.pop_size < 4:
            raise ConfigError(f"pop_size must be >= 4, got {self.pop_size}")
        if not 0 < self.mutation_factor <= 1:
            raise ConfigError(f"mutation_factor must be in (0, 1], got {self.mutation_factor}")
        if not 0 <= self.crossover <= 1:
            raise ConfigError(f"crossover must be in [0, 1], got {self.crossover}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not self.early_threshold >= 0:
            raise ConfigError(f"early_threshold must be >= 0, got {self.early_threshold}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.kl_eps <= 0:
            raise ConfigError(f"kl_eps must be positive, got {self.kl_eps}")
        if self.kl_ceiling is not None and self.kl_ceiling < 0:
            raise ConfigError(f"kl_ceiling must be >= 0, got {self.kl_ceiling}")
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        return self

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["early_threshold"]):
            d["early_threshold"] = "inf"
        return d


class Streams:
    """Independent RNG streams derived from the run seed."""

    def __init__(self, seed: int, pop_size: int):
        root = np.random.SeedSequence(seed)
        init, pop, rows, shuffle = root.spawn(4)
        self.init = np.random.default_rng(init)
        self.population = np.random.default_rng(pop)
        self.rows = row_streams(rows, pop_size)
        self.shuffle = np.random.default_rng(shuffle)


def init_network(spec, seed: int) -> Network:
    return Network(spec, rng=Streams(seed, 4).init)


@dataclass
class IterationRecord:
    t: int
    mean_energy: float
    best_energy: float
    kept_rate: float


@dataclass
class RunReport:
    config: dict
    iterations: list[IterationRecord] = field(default_factory=list)
    spreads: list[float] = field(default_factory=list)
    converged_epoch: int | None = None
    final: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "converged_epoch": self.converged_epoch,
            "epoch_spread": self.spreads,
            "final": self.final,
            "iterations": len(self.iterations),
            **self.extra,
        }


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[k:k + batch_size] for k in range(0, n, batch_size)]


def _check_data(ds: Dataset, batch_size: int) -> None:
    if len(ds) == 0:
        raise ConfigError("training set is empty")
    if batch_size > len(ds):
        raise ConfigError(f"batch_size {batch_size} exceeds the {len(ds)} training samples")


class _ActivityCache:
    def __init__(self, spec):
        self.spec = spec
        self._key = None
        self._val = None

    def __call__(self, state):
        key = bytes(np.asarray(state, dtype=np.uint8))
        if key != self._key:
            self._key, self._val = key, param_activity(self.spec, state)
        return self._val


def masked_step(network: Network, opt: T.SGD, x, y, state, activity) -> float:
    """Forward/backward on the masked network and an update of active weights only."""
    opt.zero_grad()
    with T.Tape() as tape:
        loss = T.softmax_cross_entropy(network.forward(x, state), y)
    T.backward(loss, tape)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericalError(f"training loss became {value}")
    opt.step(active=activity(state))
    return value


def make_optimizer(network: Network, config: TrainConfig) -> T.SGD:
    return T.SGD(network.params, config.lr, config.momentum, config.weight_decay)


def run_ipruning(config: TrainConfig, network: Network, dataset: Dataset,
                 population: StatePopulation | None = None, optimizer: T.SGD | None = None, observer=None):
    """Train ``network`` while evolving its pruning state.

    Per batch, until the population has converged: gather unmasked batch
    statistics, rebuild the pruning graph, run one DE generation and take the
    best state. Every batch then trains the network masked by that state.
    After each epoch the population spread is checked; once ``|spread| <=
    early_threshold`` for ``patience`` epochs the best state is frozen and
    the remaining epochs fine-tune that subnetwork.

    ``observer(record, state)``, if given, is called after every iteration
    with the appended record and the state that masked that step.

    Returns ``(network, mask, report)``; the network is updated in place.
    """
    config.validate()
    _check_data(dataset, config.batch_size)
    streams = Streams(config.seed, config.pop_size)
    pop = population if population is not None else init_population(config.pop_size, network.D, streams.population)
    if pop.states.shape != (config.pop_size, network.D):
        raise ConfigError(f"population shape {pop.states.shape} does not match (pop_size, D) = ({config.pop_size}, {network.D})")
    opt = optimizer or make_optimizer(network, config)
    activity = _ActivityCache(network.spec)
    report = RunReport(config.to_dict())
    x_all, y_all = dataset.images, dataset.labels

    def graph_for(idx):
        stats = gather_stats(network, x_all[idx], config.kl_eps)
        return build_graph(network.registry, stats, config.kl_ceiling)

    converged = math.isinf(config.early_threshold)
    best = None
    if config.epochs == 0 or converged:
        # score S(0) on the first batch the run would see, without consuming the shuffle stream
        peek = _batches(len(dataset), config.batch_size, copy.deepcopy(streams.shuffle))
        score(pop, graph_for(peek[0]))
        best, _ = best_state(pop)
        if converged:
            report.converged_epoch = 0
    if config.epochs == 0:
        return network, best, report

    t = 0
    calm = 0
    mean_e = best_e = float("nan")
    if converged:
        mean_e, best_e = float(pop.energies.mean()), float(pop.energies.min())
    for epoch in range(config.epochs):
        for idx in _batches(len(dataset), config.batch_size, streams.shuffle):
            t += 1
            if not converged:
                evolve_step(pop, graph_for(idx), config.mutation_factor, config.crossover, streams.rows)
                best, best_e = best_state(pop)
                mean_e = float(pop.energies.mean())
            masked_step(network, opt, x_all[idx], y_all[idx], best, activity)
            kept, total = masked_param_count(network, best)
            report.iterations.append(IterationRecord(t, mean_e, best_e, kept / total))
            if observer is not None:
                observer(report.iterations[-1], best)
        if not converged:
            spread = state_spread(pop)
            report.spreads.append(spread)
            calm = calm + 1 if abs(spread) <= config.early_threshold else 0
            if calm >= config.patience:
                converged = True
                report.converged_epoch = epoch + 1
    return network, best, report


def finetune(network: Network, mask, config: TrainConfig, dataset: Dataset, epochs: int | None = None,
             optimizer: T.SGD | None = None) -> Network:
    """Masked training with a fixed state: no DE steps and no statistics passes."""
    config.validate()
    epochs = config.epochs if epochs is None else epochs
    if epochs == 0:
        return network
    _check_data(dataset, config.batch_size)
    streams = Streams(config.seed, config.pop_size)
    opt = optimizer or make_optimizer(network, config)
    activity = _ActivityCache(network.spec)
    mask = np.asarray(mask, dtype=np.uint8)
    for _ in range(epochs):
        for idx in _batches(len(dataset), config.batch_size, streams.shuffle):
            masked_step(network, opt, dataset.images[idx], dataset.labels[idx], mask, activity)
    return network


def train_baseline(network: Network, config: TrainConfig, dataset: Dataset) -> Network:
    """Plain unpruned training with the same budget (epochs, batches, optimizer)."""
    return finetune(network, np.ones(network.D, dtype=np.uint8), config, dataset)


def top_k_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """True where the label is among the k largest logits; ties favour lower class indices."""
    z = logits[np.arange(labels.size), labels][:, None]
    cls = np.arange(logits.shape[1])[None, :]
    rank = (logits > z).sum(axis=1) + ((logits == z) & (cls < labels[:, None])).sum(axis=1)
    return rank < k


def predict(model, images: np.ndarray, chunk: int = 500) -> np.ndarray:
    out = [model(images[k:k + chunk]).data for k in range(0, images.shape[0], chunk)]
    return np.concatenate(out) if out else np.zeros((0, 0))


def evaluate(network, mask, dataset: Dataset, ks=DEFAULT_KS) -> dict:
    """Loss and top-k accuracies; ``mask=None`` is full (F) mode, otherwise pruned (P) mode."""
    for k in ks:
        if k > dataset.classes:
            raise ConfigError(f"top-{k} accuracy requested for {dataset.classes} classes")
    model = network if mask is None else apply_mask(network, mask)
    logits = predict(model, dataset.images)
    loss = float(T.softmax_cross_entropy(logits, dataset.labels).data) if len(dataset) else float("nan")
    res = {"loss": loss}
    for k in ks:
        res[f"top{k}"] = float(top_k_hits(logits, dataset.labels, k).mean()) if len(dataset) else float("nan")
    return res


def usable_ks(classes: int, ks=DEFAULT_KS) -> tuple[int, ...]:
    return tuple(k for k in ks if k <= classes)


def final_metrics(network: Network, mask, train: Dataset, test: Dataset, ks=DEFAULT_KS) -> dict:
    """Table-shaped rows for full (F) and pruned (P) inference."""
    use = usable_ks(test.classes, ks)
    kept, total = masked_param_count(network, mask)
    rows = {}
    for mode, m in (("F", None), ("P", mask)):
        ev = evaluate(network, m, test, use)
        row = {"loss": ev["loss"], "train_loss": evaluate(network, m, train, ())["loss"]}
        for k in ks:
            row[f"top{k}"] = ev.get(f"top{k}")
        row["R"] = 1.0 if mode == "F" else kept / total
        row["params"] = total if mode == "F" else kept
        rows[mode] = row
    return rows


def check_pruned_equivalence(network: Network, mask, images: np.ndarray, tol: float = 1e-10) -> float:
    """Max |logit difference| between the masked network and its materialized form."""
    compact = materialize_pruned(network, mask)
    diff = np.abs(predict(compact, images) - predict(apply_mask(network, mask), images))
    worst = float(diff.max()) if diff.size else 0.0
    if worst > tol:
        raise NumericalError(f"pruned network deviates from masked network by {worst:.3e}")
    return worst
