"""Sequential model-based optimization with a Tree-structured Parzen Estimator.

The optimizer keeps a history of (point, loss) trials. After a random
start-up phase it splits the history at the gamma quantile into good and bad
sets, fits per-dimension Parzen densities l(x) on the good points and g(x)
on the bad points, draws candidates from l and keeps the candidate with the
highest product of per-dimension ratios l(x)/g(x).

Density model choices (documented implementation decisions):
  * continuous dimensions: one Gaussian kernel per observation, truncated to
    [lo, hi] and renormalized, plus one prior kernel at the interval midpoint
    with bandwidth equal to the interval width; per-kernel bandwidth is
    max(gap to left neighbor, gap to right neighbor, width / n_obs);
  * log-uniform dimensions: the same model in log space;
  * ordinal dimensions (e.g. powers of two) are treated as categorical;
  * categorical dimensions: add-one-smoothed empirical frequencies.

Failed trials (objective raised or returned a non-finite value) are kept in
the history with a penalty loss of 10x the largest finite loss so the
sampler learns to avoid them.

Trials are reproducible and resumable: trial i draws from the random stream
(seed, i), so a run restarted from its log continues identically.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp, ndtr, ndtri


class SearchSpaceError(ValueError):
    """Malformed search-space definition."""


class NoSuccessfulTrial(RuntimeError):
    """Every trial in an optimization run failed."""


# -- search space -----------------------------------------------------------

@dataclass(frozen=True)
class Uniform:
    name: str
    lo: float
    hi: float


@dataclass(frozen=True)
class LogUniform:
    name: str
    lo: float
    hi: float


@dataclass(frozen=True)
class Categorical:
    name: str
    choices: tuple


@dataclass(frozen=True)
class Ordinal:
    """Ordered numeric choices; modeled as categorical, reported as numbers."""

    name: str
    choices: tuple


Dimension = Union[Uniform, LogUniform, Categorical, Ordinal]


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple[Dimension, ...]

    def __post_init__(self) -> None:
        if len(self.dimensions) < 1:
            raise SearchSpaceError("search space needs at least one dimension")
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise SearchSpaceError(f"duplicate dimension names in {names}")
        for d in self.dimensions:
            if isinstance(d, (Uniform, LogUniform)):
                if not d.lo < d.hi:
                    raise SearchSpaceError(f"{d.name}: lo {d.lo} must be < hi {d.hi}")
                if isinstance(d, LogUniform) and d.lo <= 0:
                    raise SearchSpaceError(f"{d.name}: log-uniform needs lo > 0")
            elif isinstance(d, (Categorical, Ordinal)):
                if len(d.choices) < 1:
                    raise SearchSpaceError(f"{d.name}: needs at least one choice")
            else:
                raise SearchSpaceError(f"{d.name}: unknown dimension type {type(d)}")

    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)

    def contains(self, point: dict) -> bool:
        for d in self.dimensions:
            v = point.get(d.name)
            if v is None:
                return False
            if isinstance(d, (Uniform, LogUniform)):
                if not (d.lo <= v <= d.hi):
                    return False
            elif v not in d.choices:
                return False
        return True


def sample_uniform(space: SearchSpace, rng: np.random.Generator) -> dict:
    """One point with every dimension drawn from its prior distribution."""
    point = {}
    for d in space.dimensions:
        if isinstance(d, Uniform):
            point[d.name] = float(rng.uniform(d.lo, d.hi))
        elif isinstance(d, LogUniform):
            point[d.name] = float(math.exp(rng.uniform(math.log(d.lo), math.log(d.hi))))
        else:
            point[d.name] = d.choices[int(rng.integers(len(d.choices)))]
    return point


# -- trials -------------------------------------------------------------------

@dataclass(frozen=True)
class Trial:
    index: int
    params: dict
    loss: Optional[float]  # None marks a failed evaluation
    provenance: str = "startup"  # "startup" | "tpe"
    wall_time: float = 0.0

    @property
    def failed(self) -> bool:
        return self.loss is None

    def to_json(self) -> str:
        return json.dumps(
            {
                "index": self.index,
                "params": self.params,
                "loss": self.loss,
                "provenance": self.provenance,
                "wall_time": self.wall_time,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "Trial":
        d = json.loads(line)
        return cls(index=d["index"], params=d["params"], loss=d["loss"],
                   provenance=d["provenance"], wall_time=d.get("wall_time", 0.0))


@dataclass(frozen=True)
class TpeConfig:
    n_trials: int = 300
    n_startup: int = 50
    gamma: float = 0.25
    n_candidates: int = 24
    seed: int = 0

    def __post_init__(self) -> None:
        # n_startup == n_trials is allowed: the run is then pure random search.
        if self.n_startup > self.n_trials:
            raise ValueError("n_startup must be <= n_trials")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")


def effective_loss(trial: Trial, penalty: float) -> float:
    return penalty if trial.failed else trial.loss


def split_history(trials: Sequence[Trial], gamma: float) -> tuple[list[Trial], list[Trial]]:
    """Good set: the ceil(gamma * n) lowest losses (at least one trial).

    Ties break by trial index, earliest first. Failed trials carry a penalty
    loss of 10x the largest finite loss, which lands them in the bad set.
    """
    trials = list(trials)
    if len(trials) < 2:
        raise ValueError("split_history needs at least 2 completed trials")
    finite = [t.loss for t in trials if not t.failed]
    if not finite:
        raise ValueError("split_history needs at least one finite-loss trial")
    penalty = max(finite) * 10.0
    order = sorted(trials, key=lambda t: (effective_loss(t, penalty), t.index))
    n_good = max(1, math.ceil(gamma * len(trials)))
    return order[:n_good], order[n_good:]


# -- Parzen densities ----------------------------------------------------------

class ParzenContinuous:
    """Truncated-Gaussian mixture over [lo, hi], optionally in log space."""

    def __init__(self, values: Sequence[float], lo: float, hi: float,
                 log: bool = False) -> None:
        self.lo, self.hi, self.log = lo, hi, log
        tr = math.log if log else (lambda v: v)
        a, b = tr(lo), tr(hi)
        width = b - a
        obs = np.sort(np.array([tr(v) for v in values], dtype=float))
        mus = [0.5 * (a + b)]
        sigmas = [width]
        if len(obs):
            floor = width / len(obs)
            padded = np.concatenate([[a], obs, [b]])
            for i, mu in enumerate(obs, start=1):
                left = padded[i] - padded[i - 1]
                right = padded[i + 1] - padded[i]
                mus.append(mu)
                sigmas.append(max(left, right, floor))
        self.mus = np.array(mus)
        self.sigmas = np.array(sigmas)
        self.a, self.b = a, b
        # Truncation mass of each kernel inside [a, b].
        self.z = ndtr((b - self.mus) / self.sigmas) - ndtr((a - self.mus) / self.sigmas)
        self.log_weight = -math.log(len(self.mus))

    def logpdf(self, x: float) -> float:
        """Density in the original coordinate (includes the log-space Jacobian)."""
        t = math.log(x) if self.log else x
        if not self.a <= t <= self.b:
            return -np.inf
        u = (t - self.mus) / self.sigmas
        comps = (
            self.log_weight
            - 0.5 * u * u
            - 0.5 * math.log(2 * math.pi)
            - np.log(self.sigmas)
            - np.log(self.z)
        )
        out = float(logsumexp(comps))
        if self.log:
            out -= t  # d(ln x)/dx = 1/x
        return out

    def pdf(self, x: float) -> float:
        return math.exp(self.logpdf(x))

    def sample(self, rng: np.random.Generator) -> float:
        k = int(rng.integers(len(self.mus)))
        mu, sigma = self.mus[k], self.sigmas[k]
        ua = ndtr((self.a - mu) / sigma)
        ub = ndtr((self.b - mu) / sigma)
        t = mu + sigma * ndtri(rng.uniform(ua, ub))
        t = min(max(t, self.a), self.b)
        return float(math.exp(t)) if self.log else float(t)


class ParzenCategorical:
    """Add-one-smoothed frequencies over a fixed choice set."""

    def __init__(self, values: Sequence, choices: tuple) -> None:
        self.choices = tuple(choices)
        counts = np.array([sum(1 for v in values if v == c) for c in self.choices],
                          dtype=float)
        self.probs = (counts + 1.0) / (counts.sum() + len(self.choices))

    def logpdf(self, x) -> float:
        try:
            return float(np.log(self.probs[self.choices.index(x)]))
        except ValueError:
            return -np.inf

    def pdf(self, x) -> float:
        return math.exp(self.logpdf(x))

    def sample(self, rng: np.random.Generator):
        return self.choices[int(rng.choice(len(self.choices), p=self.probs))]


def fit_density(dim: Dimension, values: Sequence):
    if isinstance(dim, Uniform):
        return ParzenContinuous(values, dim.lo, dim.hi, log=False)
    if isinstance(dim, LogUniform):
        return ParzenContinuous(values, dim.lo, dim.hi, log=True)
    return ParzenCategorical(values, dim.choices)


def suggest(trials: Sequence[Trial], space: SearchSpace, config: TpeConfig,
            rng: np.random.Generator) -> tuple[dict, str]:
    """Next point to evaluate plus its provenance tag.

    Uniform sampling until n_startup completed trials (or while fewer than
    two finite losses exist); TPE afterwards.
    """
    completed = list(trials)
    finite = [t for t in completed if not t.failed]
    if len(completed) < config.n_startup or len(finite) < 2:
        return sample_uniform(space, rng), "startup"

    good, bad = split_history(completed, config.gamma)
    densities = []
    for dim in space.dimensions:
        l_d = fit_density(dim, [t.params[dim.name] for t in good])
        g_d = fit_density(dim, [t.params[dim.name] for t in bad])
        densities.append((dim, l_d, g_d))

    best_point, best_score = None, -np.inf
    for _ in range(config.n_candidates):
        point = {}
        score = 0.0
        for dim, l_d, g_d in densities:
            value = l_d.sample(rng)
            point[dim.name] = value
            score += l_d.logpdf(value) - g_d.logpdf(value)
        if score > best_score:
            best_point, best_score = point, score
    return best_point, "tpe"


# -- optimization loop ---------------------------------------------------------

def load_trial_log(path: str | Path) -> list[Trial]:
    trials = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                trials.append(Trial.from_json(line))
    for i, t in enumerate(trials):
        if t.index != i:
            raise ValueError(f"trial log {path} is not contiguous at index {i}")
    return trials


def best_trial(trials: Sequence[Trial]) -> Trial:
    finite = [t for t in trials if not t.failed]
    if not finite:
        raise NoSuccessfulTrial("no successful trial in history")
    return min(finite, key=lambda t: (t.loss, t.index))


def optimize(
    objective: Callable[[dict], float],
    space: SearchSpace,
    config: TpeConfig,
    log_path: Optional[str | Path] = None,
    resume: bool = False,
) -> tuple[Trial, list[Trial]]:
    """Run exactly n_trials evaluations and return (best trial, history).

    The objective may raise or return a non-finite value; such trials are
    recorded as failed. With a log_path every trial is appended to a JSONL
    log as it completes, and resume=True continues a partial run from it.
    Deterministic for a deterministic objective: trial i uses the
    (config.seed, i) random stream.
    """
    trials: list[Trial] = []
    if resume and log_path is not None and Path(log_path).exists():
        trials = load_trial_log(log_path)

    mode = "a" if trials else "w"
    log_file = open(log_path, mode) if log_path is not None else None
    try:
        for i in range(len(trials), config.n_trials):
            rng = np.random.default_rng([config.seed, i])
            point, provenance = suggest(trials, space, config, rng)
            t0 = time.perf_counter()
            try:
                loss = objective(point)
                loss = float(loss)
                if not math.isfinite(loss):
                    loss = None
            except KeyboardInterrupt:
                raise
            except Exception:
                loss = None
            trial = Trial(index=i, params=point, loss=loss, provenance=provenance,
                          wall_time=time.perf_counter() - t0)
            trials.append(trial)
            if log_file is not None:
                log_file.write(trial.to_json() + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    return best_trial(trials), trials


def random_search(
    objective: Callable[[dict], float],
    space: SearchSpace,
    n_trials: int,
    seed: int = 0,
    log_path: Optional[str | Path] = None,
) -> tuple[Trial, list[Trial]]:
    """Reference pure-random baseline; trial i draws from the (seed, i) stream,
    so it is bit-identical to optimize() run with n_startup >= n_trials."""
    trials = []
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for i in range(n_trials):
            rng = np.random.default_rng([seed, i])
            point = sample_uniform(space, rng)
            t0 = time.perf_counter()
            try:
                loss = float(objective(point))
                if not math.isfinite(loss):
                    loss = None
            except KeyboardInterrupt:
                raise
            except Exception:
                loss = None
            trial = Trial(index=i, params=point, loss=loss, provenance="startup",
                          wall_time=time.perf_counter() - t0)
            trials.append(trial)
            if log_file is not None:
                log_file.write(trial.to_json() + "\n")
    finally:
        if log_file is not None:
            log_file.close()
    return best_trial(trials), trials
