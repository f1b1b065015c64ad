"""
sample 子命令：从已训练的级联按指定深度采样

`--run` 可以是 train / sphere 的运行目录（通过 manifest.json 找到级联），
也可以直接是含 cascade.json 的 checkpoint 目录。每个采样种子写入 `seed_<n>/`：
序列写 samples.txt（一行一个），向量写 samples.csv；深度 ≥ 2 时额外写 latent_shift.csv。
"""

import os
from typing import Any, Dict, Optional, Tuple

from ..api import logger
from ..cascade import MODALITY_SEQUENCE, Cascade, latent_shift_report, sample_chain
from ..checkpoint import CASCADE_MANIFEST, CheckpointError, load_cascade
from ..config_validator import EXPERIMENT_SMILES, EXPERIMENT_SPHERE
from ..numcore import Rng
from ..reporting import write_csv, write_lines
from ..run_scheduler import RunError, RunManifest, RunScheduler, SeedOutput, is_occupied, load_manifest
from ..seqvae import SAMPLE_MODES
from .base import (
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
    FORCE_PARAM,
    OUT_PARAM,
    SEED_PARAM,
    Command,
    CommandResult,
    failure_message,
    write_vectors,
)

SAMPLES_TXT = "samples.txt"
SAMPLES_CSV = "samples.csv"
LATENT_SHIFT_CSV = "latent_shift.csv"


def resolve_cascade_dir(run_dir: str, cascade_seed: Optional[int] = None) -> Tuple[str, Dict[str, Any]]:
    """找到要采样的级联目录

    Returns:
        (级联目录, 来源运行的配置快照；直接给出 checkpoint 目录时为空字典)

    Raises:
        RunError: 找不到可用的级联
    """
    if os.path.exists(os.path.join(run_dir, CASCADE_MANIFEST)):
        return run_dir, {}
    manifest = load_manifest(run_dir)
    usable = sorted(int(k) for k, v in manifest.seeds.items() if v.ok and v.checkpoints)
    if not usable:
        raise RunError(f"run {run_dir} has no successfully trained cascade")
    seed = usable[0] if cascade_seed is None else int(cascade_seed)
    if seed not in usable:
        raise RunError(f"seed {seed} has no cascade in {run_dir} (available: {usable})")
    output = manifest.seed_output(seed)
    subdir = manifest.extra.get("cascade_subdir", "cascade")
    return os.path.join(run_dir, output.directory, subdir), manifest.config


def sample_seed(cascade: Cascade, sampling: Dict[str, Any], seed: int, directory: str) -> SeedOutput:
    n = int(sampling["n"])
    depth = int(sampling["depth"])
    samples = sample_chain(
        cascade,
        n,
        Rng(seed).child(2),
        decode_mode=sampling.get("decode_mode", "sample"),
        depth=depth,
        intermediate_noise=bool(sampling.get("intermediate_noise", False)),
        temperature=float(sampling.get("temperature", 1.0)),
        max_len=sampling.get("max_len"),
    )
    if cascade.modality == MODALITY_SEQUENCE:
        files = [write_lines(os.path.join(directory, SAMPLES_TXT), samples)]
    else:
        files = [write_vectors(os.path.join(directory, SAMPLES_CSV), samples)]
    metrics: Dict[str, float] = {"n": float(n)}
    if depth >= 2 and n >= 1:
        shifts = latent_shift_report(cascade, n, Rng(seed).child(3), depth=depth)
        files.append(write_csv(os.path.join(directory, LATENT_SHIFT_CSV), ["coordinate", "w1"],
                               list(enumerate(shifts))))
        metrics["mean_latent_shift"] = float(sum(shifts) / len(shifts))
    return SeedOutput(seed=seed, directory=directory, files=files, metrics=metrics)


class SampleCommand(Command):
    """沿级联解码采样，深度可截断"""

    name = "sample"
    description = "Sample from a trained cascade at a given stage depth."
    parameters = {
        "type": "object",
        "properties": {
            "run": {"type": "string", "description": "训练运行目录，或含 cascade.json 的 checkpoint 目录"},
            "seed": SEED_PARAM,
            "out": OUT_PARAM,
            "n": {"type": "integer", "description": "每个种子的采样数"},
            "depth": {"type": "integer", "description": "从第几个阶段的先验开始解码（缺省为最深阶段）"},
            "cascade_seed": {"type": "integer", "description": "运行目录含多个训练种子时选用哪一个"},
            "decode_mode": {"type": "string", "enum": list(SAMPLE_MODES), "description": "序列解码方式"},
            "force": FORCE_PARAM,
        },
        "required": ["run"],
    }

    def call(self, **kwargs) -> CommandResult:
        run_dir = kwargs.get("run")
        try:
            cascade_dir, source_config = resolve_cascade_dir(run_dir, kwargs.get("cascade_seed"))
            cascade = load_cascade(cascade_dir)
        except (RunError, CheckpointError) as e:
            logger.error(f"Cannot load cascade: {e}")
            return CommandResult(EXIT_CONFIG_ERROR, f"config error: {e}")

        experiment = EXPERIMENT_SMILES if cascade.modality == MODALITY_SEQUENCE else EXPERIMENT_SPHERE
        sampling = self.app.load_config(None, experiment)["sampling"]
        sampling.update(source_config.get("sampling") or {})
        for key in ("n", "depth", "decode_mode"):
            if kwargs.get(key) is not None:
                sampling[key] = kwargs[key]
        if sampling.get("depth") is None:
            sampling["depth"] = cascade.depth
        depth, n = int(sampling["depth"]), int(sampling["n"])
        if depth < 1 or depth > cascade.depth:
            return CommandResult(EXIT_CONFIG_ERROR, f"config error: depth {depth} exceeds cascade length {cascade.depth}")
        if n < 0:
            return CommandResult(EXIT_CONFIG_ERROR, f"config error: n must be >= 0, got {n}")

        seeds = kwargs.get("seed") or [0]
        if len(set(seeds)) != len(seeds):
            return CommandResult(EXIT_CONFIG_ERROR, f"config error: seeds must be distinct, got {seeds}")
        out = kwargs.get("out") or os.path.join(run_dir, f"samples_depth{depth}")
        if is_occupied(out) and not kwargs.get("force"):
            return CommandResult(EXIT_CONFIG_ERROR, f"output directory {out} is not empty (use --force to reuse it)", out)

        snapshot = {
            "experiment": experiment,
            "source_run": os.path.abspath(run_dir),
            "cascade_dir": os.path.abspath(cascade_dir),
            "corpus": source_config.get("corpus", {}),
            "metrics": source_config.get("metrics", {}),
            "seeds": sorted(seeds),
            "sampling": sampling,
        }
        scheduler = RunScheduler(out)
        manifest = RunManifest(command=self.name, config=snapshot)
        outputs = scheduler.run_seeds(seeds, lambda seed, d: sample_seed(cascade, sampling, seed, d))
        for output in outputs:
            manifest.add_seed(output)
        manifest.extra["depth"] = depth
        scheduler.write_manifest(manifest)

        if any(not o.ok for o in outputs):
            return CommandResult(EXIT_RUNTIME_ERROR, f"sampling failed: {failure_message(outputs)}", out)
        return CommandResult(EXIT_OK, f"wrote {n} sample(s) per seed at depth {depth} to {out}", out)
