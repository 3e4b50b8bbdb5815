"""Wiring a run configuration into an end-to-end pruning run."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import cost as costs
from .config import RunConfig, build_space
from .estimator import Schedule
from .net import (
    Batch,
    SharedWeightStore,
    TrainSettings,
    evaluate_config,
    make_dataset,
    train_config,
)
from .optimizer import OptimizerConfig, RunResult, SharedNetEvaluator, run
from .rng import Stream
from .space import ArchitectureConfig, ArchitectureSpace, clamp, round_to_config


@dataclass
class Setup:
    space: ArchitectureSpace
    train: Batch
    val: Batch
    store: SharedWeightStore
    constraint: costs.ConstraintSpec
    table: Optional[costs.LatencyTable]
    optimizer: OptimizerConfig
    train_settings: TrainSettings
    eval_subset: int
    workers: int

    def evaluator(self) -> SharedNetEvaluator:
        return SharedNetEvaluator(self.store, self.train, self.val, self.constraint, self.table,
                                  self.eval_subset, self.train_settings, self.workers)

    def cost_of(self, config: ArchitectureConfig) -> float:
        return costs.cost(config, self.space, self.constraint.metric, self.table)


def build(cfg: RunConfig) -> Setup:
    space = build_space(cfg)
    d = cfg.data
    if d.s_max is not None and d.s_max != space.spatial_max:
        raise ValueError(f"data.s_max={d.s_max} differs from space.spatial_max={space.spatial_max}")
    train, val = make_dataset(d.classes, d.samples_per_class, space.spatial_max, d.seed,
                              channels=space.input_channels, val_fraction=d.val_fraction, noise=d.noise)
    o = cfg.optimizer
    store = SharedWeightStore.initialize(space, Stream.family(o.seed, ("init",))["init"])

    c = cfg.constraint
    table = costs.read_lut(c.lut) if c.metric == "latency" else None
    max_cost = costs.cost(space.maximal_config(), space, c.metric, table)
    target = c.target if c.target is not None else c.target_fraction * max_cost
    constraint = costs.ConstraintSpec(c.metric, target, 1.0, c.unit, c.form)
    if c.rho == "auto":
        rho = costs.rho_for_magnitude(max_cost, constraint, c.rho_magnitude)
    else:
        rho = float(c.rho)
    constraint = costs.ConstraintSpec(c.metric, target, rho, constraint.unit, c.form)

    optimizer = OptimizerConfig(
        outer_iterations=o.outer_iterations,
        weight_iterations=o.weight_iterations,
        samples=o.samples,
        vector_updates_per_outer=o.vector_updates_per_outer,
        sigma=Schedule(o.sigma_initial, o.sigma_final, o.outer_iterations),
        alpha=Schedule(o.alpha_initial, o.alpha_final, o.outer_iterations),
        sigma_units=o.sigma_units,
        baseline=o.baseline,
        seed=o.seed,
    )
    settings = TrainSettings(o.batch_size, o.lr, o.momentum, o.weight_decay)
    return Setup(space, train, val, store, constraint, table, optimizer, settings, o.eval_subset, o.workers)


def optimize(cfg: RunConfig, resume: bool = False, setup: Optional[Setup] = None) -> tuple[Setup, RunResult]:
    """Run the optimizer and write trace, checkpoint and final architecture."""
    setup = setup or build(cfg)
    os.makedirs(cfg.output.dir, exist_ok=True)
    extra = {"run_config": cfg.to_ini(), "constraint": {
        "metric": setup.constraint.metric, "target": setup.constraint.target, "rho": setup.constraint.rho,
        "unit": setup.constraint.unit, "form": setup.constraint.form}}
    result = run(setup.optimizer, setup.evaluator(), np.ones(setup.space.dim), setup.space,
                 trace_path=cfg.trace_path, checkpoint_dir=cfg.checkpoint_dir, resume=resume,
                 extra_state=extra)
    final = result.config
    arch = {**final.as_dict(), "cost": setup.cost_of(final), "metric": setup.constraint.metric,
            "target": setup.constraint.target, "mu": [float(x) for x in result.mu]}
    with open(cfg.architecture_path, "w", encoding="utf-8") as fh:
        json.dump(arch, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return setup, result


def random_configs(setup: Setup, count: int, budget: float, tolerance: float, seed: int,
                   max_draws: int = 1_000_000) -> list[ArchitectureConfig]:
    """Configurations from uniformly random vectors whose cost is within ``tolerance`` of ``budget``."""
    rng = Stream(seed)
    space = setup.space
    lb = space.lower_bound
    found = []
    for _ in range(max_draws):
        v = lb + (1.0 - lb) * rng.uniform(size=space.dim)
        config = round_to_config(clamp(v, space), space)
        if abs(setup.cost_of(config) - budget) <= tolerance * budget:
            found.append(config)
            if len(found) == count:
                return found
    raise RuntimeError(f"only {len(found)} configurations within budget after {max_draws} draws")


def finetune_accuracy(setup: Setup, store: SharedWeightStore, config: ArchitectureConfig,
                      iterations: int, seed: int) -> float:
    """Validation accuracy of ``config`` after fine-tuning a private copy of ``store``."""
    local = store.copy()
    for m in local.mom_weights + local.mom_biases:
        m[...] = 0.0
    train_config(local, config, setup.train, iterations, seed, setup.train_settings)
    return evaluate_config(local, config, setup.val)[1]

