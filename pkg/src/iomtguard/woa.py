"""Whale Optimization Algorithm and its binary feature-selection variant.

The continuous optimizer follows the usual three moves: shrinking
encirclement of the best whale (|A| < 1), exploration toward a random
whale (|A| >= 1), and a logarithmic spiral around the best whale
(chosen with probability 1/2). The binary variant squashes positions
through |tanh| and thresholds them into feature masks scored by a
k-nearest-neighbour wrapper.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from .data import DataError, Dataset, FeatureMask, FeatureSchema, stratified_split_indices

STAGNATION_WINDOW = 20


@dataclass
class WoaConfig:
    population: int = 50
    max_iters: int = 200
    dimension: int = 1
    bounds: Optional[Sequence[Tuple[float, float]]] = None
    convergence_eps: float = 1e-6
    seed: int = 0
    spiral_b: float = 1.0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.convergence_eps <= 0:
            raise ValueError("convergence_eps must be > 0")
        if self.bounds is None:
            self.bounds = [(-1.0, 1.0)] * self.dimension
        self.bounds = [(float(lo), float(hi)) for lo, hi in self.bounds]
        if len(self.bounds) == 1 and self.dimension > 1:
            self.bounds = self.bounds * self.dimension
        if len(self.bounds) != self.dimension:
            raise ValueError(f"{len(self.bounds)} bounds for dimension {self.dimension}")
        if any(lo >= hi for lo, hi in self.bounds):
            raise ValueError("each bound needs low < high")

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])


@dataclass
class Whale:
    position: np.ndarray
    fitness: float = math.inf


@dataclass
class BinaryWoaConfig:
    woa: WoaConfig = field(default_factory=WoaConfig)
    lambda_weight: float = 0.99
    beta_weight: float = 0.01
    surrogate_k: int = 5
    validation_fraction: float = 0.2
    position_bound: float = 4.0

    def __post_init__(self):
        if self.lambda_weight < 0 or self.beta_weight < 0:
            raise ValueError("fitness weights must be non-negative")
        if not math.isclose(self.lambda_weight + self.beta_weight, 1.0, abs_tol=1e-12):
            raise ValueError("lambda_weight + beta_weight must equal 1")
        if self.surrogate_k < 1:
            raise ValueError("surrogate_k must be >= 1")

    # the size-penalty weight also goes by gamma in the literature
    @property
    def gamma_weight(self) -> float:
        return self.beta_weight

    def to_dict(self) -> dict:
        out = asdict(self)
        out["woa"]["bounds"] = None
        return out


# ------------------------------------------------------------ moves

def a_schedule(t, T) -> float:
    """Linearly decreasing control parameter: 2 at t=0, 0 at t=T."""
    return 2.0 - t * (2.0 / T)


def coefficients(a: float, r1: float, r2: float) -> Tuple[float, float]:
    """A in [-a, a] and C in [0, 2] from two uniform draws."""
    return 2.0 * a * r1 - a, 2.0 * r2


def _clamp(x, lower, upper):
    if lower is None:
        return x
    return np.minimum(np.maximum(x, lower), upper)


def encircle_update(current, best, A, C, lower=None, upper=None) -> np.ndarray:
    """Move toward the best whale: best - A * |C * best - current|."""
    current, best = np.asarray(current, float), np.asarray(best, float)
    dist = np.abs(C * best - current)
    return _clamp(best - A * dist, lower, upper)


def explore_update(current, rand_agent, A, C, lower=None, upper=None) -> np.ndarray:
    """Same form as the encircling move, anchored on a random whale."""
    current, rand_agent = np.asarray(current, float), np.asarray(rand_agent, float)
    dist = np.abs(C * rand_agent - current)
    return _clamp(rand_agent - A * dist, lower, upper)


def spiral_update(current, best, l, b=1.0, lower=None, upper=None) -> np.ndarray:
    current, best = np.asarray(current, float), np.asarray(best, float)
    dist = np.abs(best - current)
    return _clamp(dist * math.exp(b * l) * math.cos(2.0 * math.pi * l) + best, lower, upper)


# --------------------------------------------------------- optimizer

@dataclass
class WoaResult:
    best_position: np.ndarray
    best_fitness: float
    history: List[float]
    iterations: int


def _evaluate(f, x) -> float:
    val = float(f(x))
    if not math.isfinite(val):
        raise ValueError(f"objective returned {val} at position {np.array2string(x, precision=6)}")
    return val


def optimize(f: Callable[[np.ndarray], float], cfg: WoaConfig) -> WoaResult:
    """Minimize ``f`` over the box ``cfg.bounds``.

    ``history[0]`` is the best fitness of the initial population and
    ``history[t]`` the best-so-far after iteration ``t``. The run stops
    early once the best value has improved by less than
    ``cfg.convergence_eps`` for 20 consecutive iterations.
    """
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.lower, cfg.upper
    N, D, T = cfg.population, cfg.dimension, cfg.max_iters

    pos = lo + rng.random((N, D)) * (hi - lo)
    fit = np.array([_evaluate(f, p) for p in pos])
    i_best = int(np.argmin(fit))
    best_pos, best_fit = pos[i_best].copy(), float(fit[i_best])
    history = [best_fit]
    stagnant = 0
    t = 0
    for t in range(1, T + 1):
        a = a_schedule(t, T)
        for i in range(N):
            A, C = coefficients(a, rng.random(), rng.random())
            p = rng.random()
            if p < 0.5:
                if abs(A) < 1:
                    pos[i] = encircle_update(pos[i], best_pos, A, C, lo, hi)
                else:
                    j = int(rng.integers(N))
                    pos[i] = explore_update(pos[i], pos[j], A, C, lo, hi)
            else:
                l = rng.uniform(-1.0, 1.0)
                pos[i] = spiral_update(pos[i], best_pos, l, cfg.spiral_b, lo, hi)
        fit = np.array([_evaluate(f, p) for p in pos])
        i_best = int(np.argmin(fit))
        previous = best_fit
        if fit[i_best] < best_fit:
            best_fit = float(fit[i_best])
            best_pos = pos[i_best].copy()
        history.append(best_fit)
        stagnant = stagnant + 1 if previous - best_fit < cfg.convergence_eps else 0
        if stagnant >= STAGNATION_WINDOW:
            break
    return WoaResult(best_pos, best_fit, history, t)


# ---------------------------------------------------- binary variant

def transfer_tanh(x):
    """V-shaped transfer |tanh(x)|, used as the probability of a 0 bit."""
    return np.abs(np.tanh(x))


def binarize(continuous_pos, rng: np.random.Generator) -> FeatureMask:
    """Bit is 0 when rand < |tanh(x)|, else 1. Empty masks get one random bit."""
    x = np.asarray(continuous_pos, dtype=float)
    bits = np.where(rng.random(x.shape) < transfer_tanh(x), 0, 1).astype(np.int8)
    if not bits.any():
        bits[rng.integers(bits.size)] = 1
    return FeatureMask(bits)


class SurrogateEvaluator:
    """k-NN error rate on a fixed stratified validation split, per feature mask.

    Squared distances are assembled from per-feature terms so a mask
    only costs a few matrix products; results are memoized by mask.
    """

    def __init__(self, X, y, k=5, validation_fraction=0.2, seed=0):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=np.int64)
        tr, va = stratified_split_indices(y, validation_fraction, seed)
        if va.size == 0 or tr.size == 0:
            raise DataError("surrogate validation split is empty")
        self.k = min(k, tr.size)
        self.Xt, self.yt = X[tr], y[tr]
        self.Xv, self.yv = X[va], y[va]
        self.n_classes = int(y.max()) + 1
        self._sq_t = self.Xt ** 2
        self._sq_v = self.Xv ** 2
        self._cache = {}

    def error(self, mask: FeatureMask) -> float:
        key = mask.bits.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        m = mask.bits.astype(float)
        d2 = (self._sq_v @ m)[:, None] + (self._sq_t @ m)[None, :] - 2.0 * (self.Xv * m) @ self.Xt.T
        if self.k < d2.shape[1]:
            nn = np.argpartition(d2, self.k - 1, axis=1)[:, : self.k]
        else:
            nn = np.broadcast_to(np.arange(d2.shape[1]), d2.shape)
        votes = np.zeros((d2.shape[0], self.n_classes))
        np.add.at(votes, (np.arange(d2.shape[0])[:, None], self.yt[nn]), 1)
        pred = votes.argmax(axis=1)
        err = float(np.mean(pred != self.yv))
        self._cache[key] = err
        return err


def fitness_value(error_rate, n_selected, n_features, lambda_weight=0.99, beta_weight=0.01) -> float:
    return lambda_weight * error_rate + beta_weight * n_selected / n_features


def subset_fitness(d: Dataset, m: FeatureMask, cfg: BinaryWoaConfig,
                   rng: np.random.Generator, evaluator: Optional[SurrogateEvaluator] = None) -> float:
    """Weighted sum of surrogate error rate and selected-feature ratio (lower is better)."""
    if len(m) != d.n_features:
        raise DataError(f"mask length {len(m)} != feature count {d.n_features}")
    if evaluator is None:
        evaluator = SurrogateEvaluator(d.X, d.y, cfg.surrogate_k, cfg.validation_fraction,
                                       int(rng.integers(2**31)))
    err = evaluator.error(m)
    return fitness_value(err, m.count, d.n_features, cfg.lambda_weight, cfg.beta_weight)


@dataclass
class SelectionResult:
    mask: FeatureMask
    fitness: float
    history: List[float]
    iterations: int

    def to_report(self, seed, config) -> dict:
        return {"mask": self.mask.to_list(), "fitness": self.fitness,
                "history": list(self.history), "seed": seed, "config": config}


def select_features(d: Dataset, cfg: BinaryWoaConfig) -> SelectionResult:
    """Binary WOA over continuous positions in [-4, 4]^C.

    Each evaluated position is binarized once; the mask that produced the
    best fitness is the one returned (re-binarizing would redraw it).
    """
    C = d.n_features
    if C == 1:
        mask = FeatureMask(np.ones(1, dtype=np.int8))
        return SelectionResult(mask, subset_fitness(d, mask, cfg, np.random.default_rng(cfg.woa.seed)), [], 0)
    woa_cfg = WoaConfig(population=cfg.woa.population, max_iters=cfg.woa.max_iters, dimension=C,
                        bounds=[(-cfg.position_bound, cfg.position_bound)] * C,
                        convergence_eps=cfg.woa.convergence_eps, seed=cfg.woa.seed,
                        spiral_b=cfg.woa.spiral_b)
    seeds = np.random.SeedSequence(cfg.woa.seed).spawn(2)
    split_seed = int(np.random.default_rng(seeds[0]).integers(2**31))
    evaluator = SurrogateEvaluator(d.X, d.y, cfg.surrogate_k, cfg.validation_fraction, split_seed)
    bit_rng = np.random.default_rng(seeds[1])
    best = {"fitness": math.inf, "mask": None}

    def objective(x):
        mask = binarize(x, bit_rng)
        val = fitness_value(evaluator.error(mask), mask.count, C, cfg.lambda_weight, cfg.beta_weight)
        if val < best["fitness"]:
            best["fitness"], best["mask"] = val, mask
        return val

    res = optimize(objective, woa_cfg)
    return SelectionResult(best["mask"], best["fitness"], res.history, res.iterations)


class WOAFeatureSelector(SelectorMixin, BaseEstimator):
    """scikit-learn selector wrapping :func:`select_features`.

    Expects features already scaled to [0, 1].
    """

    def __init__(self, population=50, max_iters=200, lambda_weight=0.99, surrogate_k=5,
                 validation_fraction=0.2, convergence_eps=1e-6, random_state=0):
        self.population = population
        self.max_iters = max_iters
        self.lambda_weight = lambda_weight
        self.surrogate_k = surrogate_k
        self.validation_fraction = validation_fraction
        self.convergence_eps = convergence_eps
        self.random_state = random_state

    def _config(self) -> BinaryWoaConfig:
        return BinaryWoaConfig(
            woa=WoaConfig(population=self.population, max_iters=self.max_iters,
                          convergence_eps=self.convergence_eps, seed=self.random_state),
            lambda_weight=self.lambda_weight, beta_weight=1.0 - self.lambda_weight,
            surrogate_k=self.surrogate_k, validation_fraction=self.validation_fraction)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        classes, y_idx = np.unique(y, return_inverse=True)
        names = tuple(f"f{i}" for i in range(X.shape[1]))
        labels = {str(c): i for i, c in enumerate(classes)}
        if len(labels) < 2:
            raise ValueError("need at least 2 classes")
        d = Dataset(FeatureSchema(names, labels, positive_class=1), X, y_idx)
        res = select_features(d, self._config())
        self.mask_ = res.mask
        self.fitness_ = res.fitness
        self.history_ = res.history
        self.n_features_in_ = X.shape[1]
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "mask_")
        return self.mask_.bits.astype(bool)
