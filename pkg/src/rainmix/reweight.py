"""Convergence-slope driven loss reweighting across degradation types.

Each type's normalized loss stream is tracked over a sliding window. A
least-squares slope per type feeds two softmax scores, a cross-type balance
score (TBS) and a per-type stability score (TSS), which are blended by an
adaptivity factor (AF) derived from the history of the worst slope.

Typical use::

    sched = ReweightScheduler(num_types=4)
    for batch in loader:
        losses = per_type_losses(batch)
        w = sched.step(losses)
        total = combine_loss(losses, w)
"""

from __future__ import annotations

import math
from collections import deque
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import cache
from operator import mul

import numpy as np

MODES = ("reweighted", "uniform", "fixed-af-0.5", "no-tss", "no-tbs")

# fixed AF per ablation mode; "reweighted" uses the computed AF
_BLEND = {"fixed-af-0.5": 0.5, "no-tss": 1.0, "no-tbs": 0.0}

# exp() argument cap; beyond this the component is effectively zero
_EXP_CAP = 700.0


class LossValueError(ValueError):
    """A raw loss was non-finite or non-positive."""


class UndefinedFitError(ValueError):
    """Too few distinct points for a least-squares slope."""


@dataclass(frozen=True)
class SlopeEstimate:
    alpha: float
    beta: float


@dataclass(frozen=True)
class WeightVector:
    """Per-type loss weights on the probability simplex.

    ``af``, ``tbs`` and ``tss`` carry the intermediate quantities of the step
    that produced the weights; they are ``None`` during warm-up.
    """

    weights: tuple[float, ...]
    step: int = 0
    af: float | None = None
    tbs: tuple[float, ...] | None = None
    tss: tuple[float, ...] | None = None

    def __len__(self) -> int:
        return len(self.weights)

    def __getitem__(self, i):
        return self.weights[i]

    def __iter__(self):
        return iter(self.weights)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)


@dataclass
class TypeLossWindow:
    type_id: int
    window_size: int
    raw_baseline: float | None = None
    entries: deque = field(default_factory=deque)
    slope_history: deque = field(default_factory=deque)

    def __post_init__(self):
        self.entries = deque(self.entries, maxlen=self.window_size)
        self.slope_history = deque(self.slope_history, maxlen=self.window_size)
        self._recent_alphas = deque((a for _, a in self.slope_history), maxlen=self.window_size)
        self._ys = deque((y for _, y in self.entries), maxlen=self.window_size)

    def push(self, index: int, normalized: float) -> None:
        self.entries.append((index, normalized))
        self._ys.append(normalized)

    def record_slope(self, index: int, alpha: float) -> None:
        self.slope_history.append((index, alpha))
        self._recent_alphas.append(alpha)

    def slope_abs_sum(self) -> float:
        return sum(map(abs, self._recent_alphas))

    def slope(self) -> float:
        n = len(self.entries)
        if n >= 2 and self.entries[-1][0] - self.entries[0][0] == n - 1:
            return sum(map(mul, _consecutive_ols_weights(n), self._ys))
        return estimate_slope(self.entries).alpha

    @property
    def last_index(self) -> int:
        return self.entries[-1][0] if self.entries else 0

    @property
    def last_normalized(self) -> float | None:
        return self.entries[-1][1] if self.entries else None

    def __len__(self) -> int:
        return len(self.entries)


def _softmax(values) -> list[float]:
    # plain floats: K is small and this sits on the per-step hot path
    m = max(values)
    e = [math.exp(v - m) for v in values]
    s = sum(e)
    return [x / s for x in e]


def estimate_slope(entries: Sequence[tuple[float, float]]) -> SlopeEstimate:
    """Ordinary least-squares line through ``(k, y_k)`` pairs."""
    if len(entries) < 2:
        raise UndefinedFitError(f"need at least 2 points for a slope, got {len(entries)}")
    n = len(entries)
    k_bar = math.fsum(float(k) for k, _ in entries) / n
    y_bar = math.fsum(float(y) for _, y in entries) / n
    sxx = math.fsum((k - k_bar) ** 2 for k, _ in entries)
    if sxx == 0.0:
        raise UndefinedFitError("all step indices are equal; slope undefined")
    sxy = math.fsum((k - k_bar) * (y - y_bar) for k, y in entries)
    alpha = sxy / sxx
    return SlopeEstimate(alpha=alpha, beta=y_bar - alpha * k_bar)


@cache
def _consecutive_ols_weights(n: int) -> tuple[float, ...]:
    # slope = sum_j c_j * y_j for k = 0..n-1
    k_bar = (n - 1) / 2.0
    sxx = n * (n * n - 1) / 12.0
    return tuple((j - k_bar) / sxx for j in range(n))


def _tbs(alphas: list[float]) -> list[float]:
    k = len(alphas)
    total = sum(map(abs, alphas))
    if total == 0.0:
        return [1.0 / k] * k
    return _softmax([k * x / total for x in alphas])


def compute_tbs(alphas: Sequence[float]) -> WeightVector:
    """Type balance score: slower-converging types get larger weight."""
    return WeightVector(tuple(_tbs([float(x) for x in alphas])))


def compute_tss(
    current_alphas: Sequence[float],
    slope_histories: Sequence[Sequence[float]],
    window_size: int = 10,
) -> WeightVector:
    """Type stability score.

    Each type's current slope is normalized by the summed magnitude of its own
    recent slopes, negated and scaled by the window size, then a softmax runs
    across types. A type whose history is all zeros scores 0.
    """
    if len(current_alphas) != len(slope_histories):
        raise ValueError("one slope history per type is required")
    scores = []
    for i, (alpha, hist) in enumerate(zip(current_alphas, slope_histories)):
        if len(hist) == 0:
            raise ValueError(f"type {i}: empty slope history")
        denom = sum(abs(h) for h in hist)
        scores.append(0.0 if denom == 0.0 else -window_size * alpha / denom)
    return WeightVector(tuple(_softmax(scores)))


def compute_weights(tbs: WeightVector, tss: WeightVector, af: float) -> WeightVector:
    if len(tbs) != len(tss):
        raise ValueError(f"TBS has {len(tbs)} components but TSS has {len(tss)}")
    if not 0.0 <= af <= 1.0:
        raise ValueError(f"adaptivity factor must lie in [0, 1], got {af}")
    w = tuple(af * a + (1.0 - af) * b for a, b in zip(tbs, tss))
    return WeightVector(w, af=af, tbs=tuple(tbs), tss=tuple(tss))


def combine_loss(per_type_losses, omega) -> float:
    """Weighted total ``K * sum_i w_i L_i``; uniform weights give the plain sum.

    Works on floats and on any objects supporting ``*`` and ``+`` with floats
    (autodiff tensors included).
    """
    weights = list(omega)
    losses = list(per_type_losses)
    if len(losses) != len(weights):
        raise ValueError(f"{len(losses)} losses but {len(weights)} weights")
    k = len(weights)
    total = losses[0] * (k * weights[0])
    for loss, w in zip(losses[1:], weights[1:]):
        total = total + loss * (k * w)
    return total


class ReweightScheduler:
    """Sequential state machine turning per-type raw losses into weights.

    Args:
        num_types: number of loss streams K.
        window_size: sliding window length N for slopes and slope histories.
        tau: sensitivity of the adaptivity factor.
        warmup_min_points: observations required per type before reweighting.
        mode: one of ``MODES``. Non-default modes keep computing (and
            reporting) AF but blend differently.
    """

    def __init__(
        self,
        num_types: int,
        window_size: int = 10,
        tau: float = 5.0,
        warmup_min_points: int = 2,
        mode: str = "reweighted",
    ):
        if num_types < 1:
            raise ValueError("num_types must be >= 1")
        if window_size < 2:
            raise ValueError(f"window_size must be >= 2, got {window_size}")
        if not tau > 0:
            raise ValueError(f"tau must be positive, got {tau}")
        if warmup_min_points < 2:
            raise ValueError("warmup_min_points must be >= 2 (a slope needs two points)")
        if warmup_min_points > window_size:
            raise ValueError("warmup_min_points cannot exceed window_size")
        if mode not in MODES:
            raise ValueError(f"unknown weighting mode {mode!r}; expected one of {MODES}")
        self.num_types = num_types
        self.window_size = window_size
        self.tau = float(tau)
        self.warmup_min_points = warmup_min_points
        self.mode = mode
        self.windows = [TypeLossWindow(i, window_size) for i in range(num_types)]
        self._scores: list[float] = []
        self._ref = 0.0
        self._exp_sum = 0.0
        self._alpha_max_abs_sum = 0.0
        self.steps_taken = 0
        # windows never shrink, so warm-up ends for good once every type has enough points
        self._warm = False

    def push_loss(self, type_id: int, raw_loss: float, index: int | None = None) -> None:
        if not 0 <= type_id < self.num_types:
            raise IndexError(f"type_id {type_id} out of range [0, {self.num_types})")
        win = self.windows[type_id]
        if index is None:
            index = win.last_index + 1
        raw_loss = float(raw_loss)
        if not math.isfinite(raw_loss) or raw_loss <= 0.0:
            raise LossValueError(
                f"type {type_id} at step {index}: loss must be finite and positive, got {raw_loss}"
            )
        if win.entries and index <= win.last_index:
            raise ValueError(
                f"type {type_id}: observation index {index} not after {win.last_index}"
            )
        if win.raw_baseline is None:
            win.raw_baseline = raw_loss
            win.push(index, 1.0)
        else:
            win.push(index, raw_loss / win.raw_baseline)

    def adaptivity_factor(self, alpha_max: float) -> float:
        """Append this step's temporal score and return AF in [0, 1].

        ``t * softmax_t(z)`` is evaluated as ``t / sum_i exp(z_i - z_t)``, with
        the sum kept as ``S * exp(c - z_t)`` where ``S = sum_i exp(z_i - c)`` and
        ``c`` is the running maximum. Identical scores give exactly 1.
        """
        self._alpha_max_abs_sum += abs(alpha_max)
        t = len(self._scores) + 1
        d = self._alpha_max_abs_sum
        z_t = 0.0 if d == 0.0 else -self.tau * t * alpha_max / d
        self._scores.append(z_t)
        if t == 1:
            self._ref, self._exp_sum = z_t, 1.0
        elif z_t > self._ref:
            self._exp_sum = self._exp_sum * math.exp(self._ref - z_t) + 1.0
            self._ref = z_t
        else:
            self._exp_sum += math.exp(z_t - self._ref)
        if d == 0.0:
            return 1.0
        total = self._exp_sum * math.exp(min(self._ref - z_t, _EXP_CAP))
        return min(t / total, 1.0)

    @property
    def af_score_history(self) -> list[float]:
        """Temporal scores z_1..z_t, one per slope-bearing step."""
        return list(self._scores)

    def _uniform(self, af=None) -> WeightVector:
        return WeightVector(
            tuple([1.0 / self.num_types] * self.num_types), step=self.steps_taken, af=af
        )

    def step(self, per_type_raw_losses: Sequence[float | None] | Mapping[int, float]) -> WeightVector:
        """Push one step of losses and return this step's weights.

        ``None`` (or a key absent from a mapping) marks a type with no samples
        this step; its last normalized loss is carried forward.
        """
        if type(per_type_raw_losses) is not list and isinstance(per_type_raw_losses, Mapping):
            losses = [per_type_raw_losses.get(i) for i in range(self.num_types)]
            extra = set(per_type_raw_losses) - set(range(self.num_types))
            if extra:
                raise IndexError(f"type ids {sorted(extra)} out of range [0, {self.num_types})")
        else:
            losses = list(per_type_raw_losses)
            if len(losses) != self.num_types:
                raise ValueError(f"expected {self.num_types} losses, got {len(losses)}")

        self.steps_taken += 1
        t = self.steps_taken
        for win, loss in zip(self.windows, losses):
            if loss is None:
                if win.entries:
                    win.push(t, win.entries[-1][1])
            elif 0.0 < loss < math.inf and win.raw_baseline is not None:
                win.push(t, loss / win.raw_baseline)
            else:
                self.push_loss(win.type_id, loss, index=t)

        if not self._warm:
            if any(len(w) < self.warmup_min_points for w in self.windows):
                return self._uniform()
            self._warm = True

        # one pass per type: slope, slope history and the TSS score (the same
        # quantities compute_tbs/compute_tss produce, without their overhead)
        n = self.window_size
        alphas, tss_scores = [], []
        for w in self.windows:
            a = w.slope()
            w.record_slope(t, a)
            d = w.slope_abs_sum()
            alphas.append(a)
            tss_scores.append(0.0 if d == 0.0 else -n * a / d)

        af = self.adaptivity_factor(max(alphas))
        if self.mode == "uniform":
            return self._uniform(af)
        tbs = _tbs(alphas)
        tss = _softmax(tss_scores)
        blend = _BLEND.get(self.mode, af)
        weights = tuple([blend * a + (1.0 - blend) * b for a, b in zip(tbs, tss)])
        return WeightVector(weights, step=t, af=af, tbs=tuple(tbs), tss=tuple(tss))
