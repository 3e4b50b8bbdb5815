"""The alternating weight / pruning-vector optimization loop.

Each outer step trains the shared weights for ``N`` iterations under
configurations drawn around the current mean, then performs
``vector_updates_per_outer`` Gaussian-smoothing gradient steps on the mean,
each from ``M`` sampled vectors.  One trace record is written per outer step.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import cost as costs
from .estimator import (
    EvaluatedSample,
    GaussianPolicy,
    LipschitzTracker,
    Schedule,
    estimate_gradient,
    sample_noises,
    schedule_value,
    update_mu,
)
from .net import Batch, SharedWeightStore, TrainSettings, evaluate_config, train_inner
from .rng import Stream
from .space import ArchitectureConfig, ArchitectureSpace, clamp, round_to_config

log = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1
STREAMS = ("train", "noise", "subset")


@dataclass
class OptimizerConfig:
    """Loop sizes, schedules and seeds.

    ``sigma`` is in normalized vector units unless ``sigma_units`` is
    ``"absolute"``, in which case it counts channels / pixels / blocks and is
    divided by each entry's maximum.  Schedules default to spanning
    ``outer_iterations`` steps.
    """

    outer_iterations: int = 100
    weight_iterations: int = 200
    samples: int = 100
    vector_updates_per_outer: int = 20
    sigma: Optional[Schedule] = None
    alpha: Optional[Schedule] = None
    sigma_units: str = "normalized"
    baseline: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("outer_iterations", "samples", "vector_updates_per_outer"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.weight_iterations < 0:
            raise ValueError("weight_iterations must be >= 0")
        if self.sigma_units not in ("normalized", "absolute"):
            raise ValueError(f"unknown sigma_units {self.sigma_units!r}")
        if self.sigma is None:
            self.sigma = Schedule(0.0125, 0.0025, self.outer_iterations)
        if self.alpha is None:
            self.alpha = Schedule(0.05, 0.0, self.outer_iterations)
        if self.sigma.initial <= 0 or self.sigma.final <= 0:
            raise ValueError("sigma schedule must stay positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceRecord:
    outer_step: int
    mu: list
    sigma: float
    alpha: float
    updates: list
    gradient_norm: float
    k_bound: float
    config: Optional[dict]
    config_cost: float
    loss: float
    error: float
    schema_version: int = TRACE_SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, line: str) -> "TraceRecord":
        d = json.loads(line)
        if d.get("schema_version") != TRACE_SCHEMA_VERSION:
            raise ValueError(f"unsupported trace schema {d.get('schema_version')}")
        return cls(**d)


def read_trace(path: str) -> tuple[list[TraceRecord], bool]:
    """Records of a trace file and whether it ended cleanly."""
    records, clean = [], True
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                records.append(TraceRecord.from_json(line))
            except (json.JSONDecodeError, TypeError):
                clean = False
                break
    return records, clean


# --- evaluators ------------------------------------------------------------


class AnalyticEvaluator:
    """Closed-form error ``fn(v)`` with an optional cost function.

    Stands in for the network when testing the loop itself.  With
    ``vectorized=True`` both functions take a ``(n, dim)`` array and return
    ``n`` values.  The mean is clipped to ``[lower, upper]`` after every
    update.
    """

    def __init__(self, fn: Callable, cost_fn: Optional[Callable] = None, lower=0.0, upper=1.0,
                 vectorized: bool = False):
        self.fn = fn
        self.cost_fn = cost_fn
        self.lower, self.upper = lower, upper
        self.vectorized = vectorized

    def project(self, mu):
        return np.clip(mu, self.lower, self.upper)

    def train(self, policy, iterations, stream):
        pass

    def begin_update(self, stream):
        pass

    def evaluate(self, v) -> EvaluatedSample:
        return self.evaluate_many([v])[0]

    def evaluate_many(self, vs) -> list[EvaluatedSample]:
        V = np.atleast_2d(np.asarray(vs, dtype=float))
        if self.vectorized:
            errors = np.asarray(self.fn(V), dtype=float)
            cost_values = np.asarray(self.cost_fn(V), dtype=float) if self.cost_fn else np.zeros(len(V))
        else:
            errors = np.array([self.fn(v) for v in V], dtype=float)
            cost_values = np.array([self.cost_fn(v) if self.cost_fn else 0.0 for v in V], dtype=float)
        return [EvaluatedSample(float(e), float(e), float(c)) for e, c in zip(errors, cost_values)]

    def final_eval(self, mu):
        return None, self.evaluate(mu)

    def save(self, directory):
        pass

    def load(self, directory):
        pass


def quadratic_evaluator(target_vector, constraint: costs.ConstraintSpec, cost_weights, lower=0.0, upper=1.0):
    """``||v - v*||^2 + penalty(c . v)`` with linear cost ``c . v``."""
    v_star = np.asarray(target_vector, dtype=float)
    w = np.asarray(cost_weights, dtype=float)
    return AnalyticEvaluator(
        lambda V: ((V - v_star) ** 2).sum(axis=1) + costs.penalty(V @ w, constraint),
        lambda V: V @ w,
        lower,
        upper,
        vectorized=True,
    )


def linear_evaluator(a, offset=0.0):
    a = np.asarray(a, dtype=float)
    return AnalyticEvaluator(lambda V: V @ a + offset, lower=-np.inf, upper=np.inf, vectorized=True)


class SharedNetEvaluator:
    """Penalized validation error of cropped sub-networks of a weight store.

    Within one vector update all samples are scored on the same validation
    subset, and samples rounding to the same configuration share one forward
    pass.  Distinct configurations may be scored on a thread pool; results
    are assembled in sample order.
    """

    def __init__(self, store: SharedWeightStore, train_data: Batch, val_data: Batch,
                 constraint: costs.ConstraintSpec, table: Optional[costs.LatencyTable] = None,
                 eval_subset: int = 512, train_settings: TrainSettings = TrainSettings(), workers: int = 1):
        self.store = store
        self.space = store.space
        self.train_data, self.val_data = train_data, val_data
        self.constraint, self.table = constraint, table
        self.eval_subset = eval_subset
        self.train_settings = train_settings
        self.workers = workers
        self._subset = val_data
        self._losses: dict[ArchitectureConfig, float] = {}

    def project(self, mu):
        return clamp(mu, self.space)

    def train(self, policy, iterations, stream):
        if iterations:
            train_inner(self.store, policy, self.train_data, iterations, stream, self.train_settings)

    def begin_update(self, stream):
        n = len(self.val_data)
        if self.eval_subset < n:
            self._subset = self.val_data.subset(np.sort(stream.permutation(n)[: self.eval_subset]))
        else:
            self._subset = self.val_data
        self._losses = {}

    def _sample(self, config: ArchitectureConfig, loss: float) -> EvaluatedSample:
        c = costs.cost(config, self.space, self.constraint.metric, self.table)
        return EvaluatedSample(costs.penalized_error(loss, c, self.constraint), loss, c)

    def evaluate_many(self, vs) -> list[EvaluatedSample]:
        configs = [round_to_config(clamp(v, self.space), self.space) for v in vs]
        todo = list(dict.fromkeys(c for c in configs if c not in self._losses))

        def loss_of(c):
            return evaluate_config(self.store, c, self._subset)[0]

        if self.workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                losses = list(pool.map(loss_of, todo))
        else:
            losses = [loss_of(c) for c in todo]
        self._losses.update(zip(todo, losses))
        return [self._sample(c, self._losses[c]) for c in configs]

    def final_eval(self, mu):
        config = round_to_config(clamp(mu, self.space), self.space)
        loss, _ = evaluate_config(self.store, config, self.val_data)
        return config, self._sample(config, loss)

    def save(self, directory):
        self.store.save(os.path.join(directory, "store.bin"))

    def load(self, directory):
        loaded = SharedWeightStore.load(os.path.join(directory, "store.bin"), self.space)
        for dst, src in zip(self.store.tensors(), loaded.tensors()):
            dst[...] = src


def attach_evaluator(kind: str, **kwargs):
    """Build an evaluator: ``"shared_net"``, ``"quadratic"``, ``"linear"`` or ``"analytic"``."""
    factories = {
        "shared_net": SharedNetEvaluator,
        "quadratic": quadratic_evaluator,
        "linear": linear_evaluator,
        "analytic": AnalyticEvaluator,
    }
    if kind not in factories:
        raise ValueError(f"unknown evaluator kind {kind!r}")
    return factories[kind](**kwargs)


# --- main loop -------------------------------------------------------------


@dataclass
class RunResult:
    mu: np.ndarray
    trace: list[TraceRecord]
    config: Optional[ArchitectureConfig] = None


def _sigma_scale(config: OptimizerConfig, space: Optional[ArchitectureSpace], dim: int) -> np.ndarray:
    if config.sigma_units == "absolute":
        if space is None:
            raise ValueError("absolute sigma units need an architecture space")
        return 1.0 / space.entry_max
    return np.ones(dim)


def run(config: OptimizerConfig, evaluator, mu0: Sequence[float], space: Optional[ArchitectureSpace] = None,
        trace_path: Optional[str] = None, checkpoint_dir: Optional[str] = None, resume: bool = False,
        stop_after: Optional[int] = None, extra_state: Optional[dict] = None) -> RunResult:
    """Optimize the pruning vector starting from ``mu0``.

    With ``checkpoint_dir`` the store, mean, tracker and random streams are
    saved after every outer step; ``resume=True`` continues from there and
    appends to ``trace_path``.  ``stop_after`` ends the run early after that
    many outer steps (used to exercise resumption).
    """
    mu = np.array(mu0, dtype=float)
    dim = mu.size
    scale = _sigma_scale(config, space, dim)
    streams = Stream.family(config.seed, STREAMS)
    tracker = LipschitzTracker()
    start = 0
    trace: list[TraceRecord] = []

    if resume:
        if checkpoint_dir is None:
            raise ValueError("resume needs a checkpoint directory")
        with open(os.path.join(checkpoint_dir, "state.json"), encoding="utf-8") as fh:
            state = json.load(fh)
        start = state["next_step"]
        mu = np.array(state["mu"], dtype=float)
        tracker.value = state["k_bound"]
        for name in STREAMS:
            streams[name].state = state["rng"][name]
        evaluator.load(checkpoint_dir)
        if trace_path and os.path.exists(trace_path):
            trace, _ = read_trace(trace_path)
            trace = trace[:start]

    if trace_path:
        os.makedirs(os.path.dirname(os.path.abspath(trace_path)), exist_ok=True)
    trace_fh = open(trace_path, "w", encoding="utf-8") if trace_path else None
    if trace_fh:
        # on resume, rewrite the kept prefix so a torn final line cannot survive
        for rec in trace:
            trace_fh.write(rec.to_json() + "\n")
    try:
        end = config.outer_iterations if stop_after is None else min(config.outer_iterations, start + stop_after)
        for t in range(start, end):
            sigma_t = schedule_value(config.sigma, t)
            alpha_t = schedule_value(config.alpha, t)
            sigma_vec = sigma_t * scale
            policy = GaussianPolicy(mu, sigma_vec)
            evaluator.train(policy, config.weight_iterations, streams["train"])

            updates = []
            grad_norm = 0.0
            for _ in range(config.vector_updates_per_outer):
                evaluator.begin_update(streams["subset"])
                noises = sample_noises(dim, sigma_vec, config.samples, streams["noise"])
                scored = evaluator.evaluate_many([mu + n for n in noises] + [mu])
                samples, at_mu = scored[:-1], scored[-1]
                for s, n in zip(samples, noises):
                    s.noise = n
                bound = tracker.update(samples, at_mu.error)
                grad = estimate_gradient(samples, sigma_vec, config.baseline)
                grad_norm = float(np.linalg.norm(grad))
                policy = update_mu(policy, grad, alpha_t)
                mu = evaluator.project(policy.mu)
                policy = GaussianPolicy(mu, sigma_vec)
                sample_costs = [s.cost for s in samples]
                updates.append({
                    "samples": [[s.error, s.cost] for s in samples],
                    "error_at_mu": at_mu.error,
                    "gradient_norm": grad_norm,
                    "k_sample_bound": bound,
                    "cost_std": float(np.std(sample_costs)),
                })

            rounded, final = evaluator.final_eval(mu)
            record = TraceRecord(
                outer_step=t,
                mu=[float(x) for x in mu],
                sigma=sigma_t,
                alpha=alpha_t,
                updates=updates,
                gradient_norm=grad_norm,
                k_bound=tracker.value,
                config=rounded.as_dict() if rounded is not None else None,
                config_cost=final.cost,
                loss=final.loss,
                error=final.error,
            )
            trace.append(record)
            if trace_fh:
                trace_fh.write(record.to_json() + "\n")
                trace_fh.flush()
            if checkpoint_dir:
                _save_checkpoint(checkpoint_dir, t + 1, mu, tracker, streams, evaluator, config, extra_state)
            log.info("step %d: cost %.4g error %.4f sigma %.4g alpha %.4g |g| %.3g",
                     t, final.cost, final.error, sigma_t, alpha_t, grad_norm)
    finally:
        if trace_fh:
            trace_fh.close()

    rounded = evaluator.final_eval(mu)[0]
    return RunResult(mu, trace, rounded)


def _save_checkpoint(directory, next_step, mu, tracker, streams, evaluator, config, extra_state):
    os.makedirs(directory, exist_ok=True)
    evaluator.save(directory)
    state = {
        "schema_version": TRACE_SCHEMA_VERSION,
        "next_step": next_step,
        "mu": [float(x) for x in mu],
        "k_bound": tracker.value,
        "sigma": asdict(config.sigma),
        "alpha": asdict(config.alpha),
        "rng": {name: s.state for name, s in streams.items()},
    }
    if extra_state:
        state.update(extra_state)
    tmp = os.path.join(directory, "state.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(state, fh, sort_keys=True, indent=1)
    os.replace(tmp, os.path.join(directory, "state.json"))


def constrained_quadratic_optimum(target_vector, cost_weights, constraint: costs.ConstraintSpec) -> np.ndarray:
    """Minimizer of ``||v - v*||^2 + rho * ((c . v - T) / unit)^2`` (squared_error form).

    Setting the gradient to zero gives ``(I + r c c^T) v = v* + r T c`` with
    ``r = rho / unit^2``.
    """
    if constraint.form != "squared_error":
        r = constraint.rho**2 / constraint.unit**2
    else:
        r = constraint.rho / constraint.unit**2
    v_star = np.asarray(target_vector, dtype=float)
    c = np.asarray(cost_weights, dtype=float)
    A = np.eye(c.size) + r * np.outer(c, c)
    return np.linalg.solve(A, v_star + r * constraint.target * c)
