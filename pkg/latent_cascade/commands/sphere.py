"""
sphere 子命令：球面流形恢复实验

每个种子在 `seed_<n>/` 下写出各深度的直方图（CSV / SVG / PNG）、stats.txt、
recovery.csv、loss_trace.csv 与级联 checkpoint；运行目录根部写跨种子汇总与 manifest.json。
"""

import os

from ..api import logger
from ..checkpoint import save_cascade
from ..config_validator import EXPERIMENT_SPHERE, ConfigValidationError, RunConfig
from ..manifold import DEFAULT_BINS, DEFAULT_EPS, DEFAULT_SAMPLES, run_sphere_experiment
from ..metrics import aggregate_seed_metrics
from ..numcore import Rng
from ..run_scheduler import RunManifest, RunScheduler, SeedOutput, is_occupied, relative_to
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
    write_seed_summary,
)


def run_sphere_seed(run: RunConfig, seed: int, directory: str) -> SeedOutput:
    """单个种子的完整球面实验"""
    sampling, metrics = run.sampling, run.metrics
    result = run_sphere_experiment(
        run.sphere_spec(seed),
        run.stages,
        Rng(seed),
        n_samples=int(sampling.get("n") or DEFAULT_SAMPLES),
        n_bins=int(metrics.get("bins", DEFAULT_BINS)),
        eps=float(metrics.get("eps", DEFAULT_EPS)),
        training=run.training,
        intermediate_noise=bool(sampling.get("intermediate_noise", False)),
        out_dir=directory,
    )
    files = list(result.files)
    files.append(write_loss_trace(os.path.join(directory, "loss_trace.csv"), result.cascade))
    checkpoints = save_cascade(result.cascade, os.path.join(directory, "cascade"))
    return SeedOutput(seed=seed, directory=directory, files=files, checkpoints=checkpoints,
                      metrics=result.metric_values())


class SphereCommand(Command):
    """训练 3 阶段级联并在每个深度统计样本到单位球面的径向偏差"""

    name = "sphere"
    description = "Run the sphere manifold-recovery experiment for each seed."
    parameters = {
        "type": "object",
        "properties": {
            "config": CONFIG_PARAM,
            "seed": SEED_PARAM,
            "out": OUT_PARAM,
            "n": {"type": "integer", "description": "每个深度的采样数"},
            "force": FORCE_PARAM,
        },
        "required": [],
    }

    def call(self, **kwargs) -> CommandResult:
        try:
            run = self.app.run_config(kwargs.get("config"), EXPERIMENT_SPHERE, {
                "seeds": kwargs.get("seed"),
                "output_dir": kwargs.get("out"),
                "sampling.n": kwargs.get("n"),
            })
        except ConfigValidationError as e:
            logger.error(f"Invalid sphere config: {e}")
            return CommandResult(EXIT_CONFIG_ERROR, f"config error: {e}")

        if is_occupied(run.output_dir) and not kwargs.get("force"):
            return CommandResult(EXIT_CONFIG_ERROR,
                                 f"run directory {run.output_dir} is not empty (use --force to reuse it)",
                                 run.output_dir)

        scheduler = RunScheduler(run.output_dir)
        manifest = RunManifest(command=self.name, config=run.snapshot())
        outputs = scheduler.run_seeds(run.seeds, lambda seed, d: run_sphere_seed(run, seed, d))
        for output in outputs:
            manifest.add_seed(output)

        succeeded = {o.seed: o.metrics for o in outputs if o.ok}
        failures = {o.seed: o.error for o in outputs if not o.ok}
        if succeeded:
            report = aggregate_seed_metrics(succeeded, failures)
            for path in write_seed_summary(run.output_dir, report):
                manifest.files.append(relative_to(path, run.output_dir))
        scheduler.write_manifest(manifest)

        if failures:
            return CommandResult(EXIT_RUNTIME_ERROR, f"sphere run failed: {failure_message(outputs)}", run.output_dir)
        return CommandResult(EXIT_OK, f"sphere run complete: {run.output_dir} ({len(outputs)} seed(s))",
                             run.output_dir)
