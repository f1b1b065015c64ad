"""
train 子命令：训练配置中的级联并持久化全部阶段与潜变量数据集
"""

import os
from typing import Dict, List, Optional

from ..api import logger
from ..cascade import Cascade, train_cascade
from ..checkpoint import save_cascade
from ..config_validator import EXPERIMENT_SPHERE, ConfigValidationError, RunConfig
from ..manifold import generate_sphere_data
from ..numcore import Rng
from ..run_scheduler import RunManifest, RunScheduler, SeedOutput, is_occupied
from ..utils import load_corpora
from .base import (
    CONFIG_PARAM,
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
    FORCE_PARAM,
    OUT_PARAM,
    SEED_PARAM,
    Command,
    CommandResult,
    failure_message,
    write_loss_trace,
)

CASCADE_SUBDIR = "cascade"


def final_metrics(cascade: Cascade) -> Dict[str, float]:
    values: Dict[str, float] = {}
    for k, result in enumerate(cascade.histories, start=1):
        if result.history:
            last = result.history[-1]
            values[f"stage{k}_loss"] = last.loss
            if last.entropy is not None:
                values[f"stage{k}_entropy"] = last.entropy
        if result.gamma is not None:
            values[f"stage{k}_gamma"] = result.gamma
    return values


def run_train_seed(run: RunConfig, seed: int, directory: str, corpus: Optional[List[str]] = None) -> SeedOutput:
    if run.experiment == EXPERIMENT_SPHERE:
        dataset = generate_sphere_data(run.sphere_spec(seed))
    else:
        dataset = corpus
    # 与 sphere 命令使用同一条训练子流
    cascade = train_cascade(run.stages, dataset, Rng(seed).child(1), training=run.training)
    loss_trace = write_loss_trace(os.path.join(directory, "loss_trace.csv"), cascade)
    checkpoints = save_cascade(cascade, os.path.join(directory, CASCADE_SUBDIR))
    return SeedOutput(seed=seed, directory=directory, files=[loss_trace], checkpoints=checkpoints,
                      metrics=final_metrics(cascade))


class TrainCommand(Command):
    """按配置训练级联（smiles 语料或 sphere 数据）"""

    name = "train"
    description = "Train the configured cascade for each seed and persist all stages."
    parameters = {
        "type": "object",
        "properties": {
            "config": CONFIG_PARAM,
            "seed": SEED_PARAM,
            "out": OUT_PARAM,
            "force": FORCE_PARAM,
        },
        "required": [],
    }

    def call(self, **kwargs) -> CommandResult:
        try:
            run = self.app.run_config(kwargs.get("config"), None, {
                "seeds": kwargs.get("seed"),
                "output_dir": kwargs.get("out"),
            })
            corpus = None
            if run.experiment != EXPERIMENT_SPHERE:
                corpus, _ = load_corpora(run.train_corpus, run.reference_corpus, run.test_fraction, run.split_seed)
                if not corpus:
                    raise ConfigValidationError(f"training corpus {run.train_corpus} is empty")
        except (ConfigValidationError, ValueError) as e:
            logger.error(f"Invalid train config: {e}")
            return CommandResult(EXIT_CONFIG_ERROR, f"config error: {e}")

        if is_occupied(run.output_dir) and not kwargs.get("force"):
            return CommandResult(EXIT_CONFIG_ERROR,
                                 f"run directory {run.output_dir} is not empty (use --force to reuse it)",
                                 run.output_dir)

        scheduler = RunScheduler(run.output_dir)
        manifest = RunManifest(command=self.name, config=run.snapshot())
        outputs = scheduler.run_seeds(run.seeds, lambda seed, d: run_train_seed(run, seed, d, corpus))
        for output in outputs:
            manifest.add_seed(output)
        manifest.extra["cascade_subdir"] = CASCADE_SUBDIR
        scheduler.write_manifest(manifest)

        if any(not o.ok for o in outputs):
            return CommandResult(EXIT_RUNTIME_ERROR, f"training failed: {failure_message(outputs)}", run.output_dir)
        depth = len(run.stages)
        return CommandResult(EXIT_OK, f"trained {depth}-stage cascade for {len(outputs)} seed(s) in {run.output_dir}",
                             run.output_dir)
