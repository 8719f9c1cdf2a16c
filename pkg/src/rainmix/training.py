"""Mixed-type training loop for the toy network, driven by the reweight scheduler."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from rainmix import autodiff as ad
from rainmix.imaging import RAIN_TYPES, CorpusConfig, corpus_arrays
from rainmix.moe import ToyModel, ToyModelConfig
from rainmix.reweight import MODES, ReweightScheduler, combine_loss


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite training loss {value} at step {step}")
        self.step = step
        self.value = value


@dataclass
class TrainConfig:
    corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(counts={t: 1000 for t in RAIN_TYPES}))
    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    mode: str = "reweighted"
    iterations: int = 2000
    batch_per_type: int = 1
    learning_rate: float = 0.05
    window_size: int = 10
    tau: float = 5.0
    seed: int = 0
    eval_interval: int = 100
    holdout_per_type: int = 16
    float32: bool = True

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode not in MODES:
            raise ValueError(f"unknown weighting mode {self.mode!r}; expected one of {MODES}")
        if self.iterations < 1 or self.batch_per_type < 1 or self.eval_interval < 1:
            raise ValueError("iterations, batch_per_type and eval_interval must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.holdout_per_type < 1:
            raise ValueError("holdout_per_type must be positive")


@dataclass(frozen=True)
class LogRow:
    iteration: int
    type_id: int
    loss: float
    psnr: float
    omega: float
    af: float


@dataclass
class TrainingLog:
    params: dict
    rows: list[LogRow] = field(default_factory=list)
    # per-iteration scheduler output: (omega tuple, af)
    weights: list[tuple[tuple[float, ...], float]] = field(default_factory=list)
    train_losses: list[tuple[float, ...]] = field(default_factory=list)
    model: ToyModel | None = field(default=None, repr=False)

    def final_type_losses(self) -> dict[int, float]:
        last = max(r.iteration for r in self.rows)
        return {r.type_id: r.loss for r in self.rows if r.iteration == last}

    def worst_type_loss(self) -> float:
        return max(self.final_type_losses().values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "type_id", "loss", "psnr", "omega", "af"])
        for r in self.rows:
            w.writerow([r.iteration, r.type_id, repr(r.loss), repr(r.psnr), repr(r.omega), repr(r.af)])
        return buf.getvalue()


@lru_cache(maxsize=4)
def _cached_corpus(config_key):
    counts, size, base_seed, intensity_range = config_key
    cfg = CorpusConfig(counts=dict(counts), size=size, base_seed=base_seed, intensity_range=intensity_range)
    return corpus_arrays(cfg)


def load_training_corpus(config: CorpusConfig):
    """Corpus arrays, memoized so repeated runs on one corpus skip regeneration."""
    key = (tuple(sorted(config.counts.items())), config.size, config.base_seed, tuple(config.intensity_range))
    return _cached_corpus(key)


def _split(types: np.ndarray, num_types: int, holdout: int):
    train, held = [], []
    for t in range(num_types):
        idx = np.flatnonzero(types == t)
        if idx.size <= holdout:
            raise ValueError(f"type {t} has {idx.size} images; need more than {holdout} for the held-out split")
        held.append(idx[-holdout:])
        train.append(idx[:-holdout])
    return train, held


def _evaluate(model, clean, degraded, held, dtype):
    losses, psnrs = [], []
    for idx in held:
        out = model.forward(degraded[idx].astype(dtype), training=False).data.astype(np.float64)
        target = clean[idx]
        losses.append(float(np.mean(np.abs(np.clip(out, 0.0, 1.0) - target))))
        mse = np.mean((np.clip(out, 0.0, 1.0) - target) ** 2, axis=(1, 2, 3))
        psnrs.append(float(np.mean([math.inf if m == 0 else 10.0 * math.log10(1.0 / m) for m in mse])))
    return losses, psnrs


def train_toy(config: TrainConfig, corpus=None) -> TrainingLog:
    """Train a fresh ToyModel on mixed-type batches.

    Each iteration draws ``batch_per_type`` training images of every type,
    computes per-type L1 losses, asks the scheduler for weights and takes one
    SGD step on ``K * sum(omega_i * L_i)``. Held-out per-type L1 and PSNR are
    logged every ``eval_interval`` iterations and after the last one.

    ``corpus`` may be a precomputed ``(clean, degraded, types)`` triple.
    """
    clean, degraded, types = corpus if corpus is not None else load_training_corpus(config.corpus)
    num_types = int(types.max()) + 1
    present = [t for t in range(num_types) if np.any(types == t)]
    if not present or len(present) != num_types:
        raise ValueError("training corpus is missing one or more rain types")
    dtype = np.float32 if config.float32 else np.float64
    train_idx, held_idx = _split(types, num_types, config.holdout_per_type)

    rng = np.random.default_rng(config.seed)
    model = ToyModel(config.model, seed=int(rng.integers(2**63)), dtype=dtype)
    scheduler = ReweightScheduler(num_types, window_size=config.window_size, tau=config.tau, mode=config.mode)
    params = model.parameters()
    log = TrainingLog(params={
        "mode": config.mode, "window_size": config.window_size, "tau": config.tau,
        "iterations": config.iterations, "learning_rate": config.learning_rate,
        "batch_per_type": config.batch_per_type, "seed": config.seed,
    })
    omega, af = (1.0 / num_types,) * num_types, 1.0
    bpt = config.batch_per_type

    for it in range(1, config.iterations + 1):
        picks = np.concatenate([rng.choice(idx, size=bpt, replace=False) for idx in train_idx])
        out = model.forward(degraded[picks].astype(dtype), training=True, rng_seed=rng)
        per_sample = ad.l1_per_sample(out, clean[picks].astype(dtype))
        per_type = [ad.mean(ad.getitem(per_sample, slice(t * bpt, (t + 1) * bpt))) for t in range(num_types)]
        raw = [p.item() for p in per_type]
        if not all(math.isfinite(v) for v in raw):
            raise NonFiniteLossError(it, next(v for v in raw if not math.isfinite(v)))
        wv = scheduler.step(raw)
        omega = wv.weights
        af = 1.0 if wv.af is None else wv.af
        log.weights.append((omega, af))
        log.train_losses.append(tuple(raw))

        total = combine_loss(per_type, omega)
        model.zero_grad()
        total.backward()
        for p in params.values():
            if p.grad is not None:
                p.data -= config.learning_rate * p.grad
        if it % config.eval_interval == 0 or it == config.iterations:
            losses, psnrs = _evaluate(model, clean, degraded, held_idx, dtype)
            for t in range(num_types):
                log.rows.append(LogRow(it, t, losses[t], psnrs[t], omega[t], af))
    log.model = model
    return log
