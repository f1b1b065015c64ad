"""
运行配置校验

把合并后的配置字典转换为 RunConfig，并在任何训练开始前检查：
- experiment 只能是 sphere / smiles
- seeds 非空、互不相同、非负
- 阶段配置可以串联（第 1 阶段与数据模态匹配，后续阶段维度一致）
- smiles 实验引用的语料文件存在，留出比例在 [0, 1) 内
- 采样与评估参数在合法范围内
"""

import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from .cascade import MODALITY_SEQUENCE, MODALITY_VECTOR, CascadeError, StageSpec, check_specs
from .manifold import ManifoldError, SphereDatasetSpec
from .seqvae import SAMPLE_MODES
from .utils import resolve_corpus_path

EXPERIMENT_SPHERE = "sphere"
EXPERIMENT_SMILES = "smiles"
EXPERIMENTS = (EXPERIMENT_SPHERE, EXPERIMENT_SMILES)
TOP_LEVEL_KEYS = ("experiment", "seeds", "output_dir", "sphere", "corpus", "stages", "training", "sampling", "metrics")


class ConfigValidationError(Exception):
    """配置不合法（命令以退出码 2 结束）"""
    pass


@dataclass
class RunConfig:
    experiment: str
    seeds: List[int]
    output_dir: str
    stages: List[StageSpec]
    sphere: Dict[str, Any] = field(default_factory=dict)
    train_corpus: Optional[str] = None
    reference_corpus: Optional[str] = None
    test_fraction: float = 0.0
    split_seed: int = 0
    training: Dict[str, Any] = field(default_factory=dict)
    sampling: Dict[str, Any] = field(default_factory=dict)
    metrics: Dict[str, Any] = field(default_factory=dict)

    @property
    def modality(self) -> str:
        return MODALITY_SEQUENCE if self.experiment == EXPERIMENT_SMILES else MODALITY_VECTOR

    def sphere_spec(self, seed: int) -> SphereDatasetSpec:
        return SphereDatasetSpec(seed=int(seed), **self.sphere)

    def snapshot(self) -> Dict[str, Any]:
        """写入运行清单的有效配置"""
        return {
            "experiment": self.experiment,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "sphere": dict(self.sphere),
            "corpus": {
                "train": self.train_corpus,
                "reference": self.reference_corpus,
                "test_fraction": self.test_fraction,
                "split_seed": self.split_seed,
            },
            "stages": [s.to_dict() for s in self.stages],
            "training": dict(self.training),
            "sampling": dict(self.sampling),
            "metrics": dict(self.metrics),
        }


def _check_seeds(seeds: Any) -> Tuple[bool, str]:
    if not isinstance(seeds, (list, tuple)) or not seeds:
        return False, "seeds must be a non-empty list"
    for s in seeds:
        if isinstance(s, bool) or not isinstance(s, int) or s < 0:
            return False, f"seed {s!r} is not a non-negative integer"
    if len(set(seeds)) != len(seeds):
        return False, f"seeds must be distinct, got {list(seeds)}"
    return True, ""


def _check_sampling(sampling: Dict[str, Any]) -> Tuple[bool, str]:
    if int(sampling.get("n", 0)) < 0:
        return False, "sampling.n must be >= 0"
    mode = sampling.get("decode_mode", "sample")
    if mode not in SAMPLE_MODES:
        return False, f"sampling.decode_mode must be one of {SAMPLE_MODES}, got {mode!r}"
    if float(sampling.get("temperature", 1.0)) <= 0:
        return False, "sampling.temperature must be positive"
    max_len = sampling.get("max_len")
    if max_len is not None and int(max_len) < 1:
        return False, "sampling.max_len must be >= 1"
    depth = sampling.get("depth")
    if depth is not None and int(depth) < 1:
        return False, "sampling.depth must be >= 1"
    return True, ""


def _check_metrics(metrics: Dict[str, Any]) -> Tuple[bool, str]:
    if int(metrics.get("k", 1000)) < 1:
        return False, "metrics.k must be >= 1"
    if float(metrics.get("eps", 0.05)) <= 0:
        return False, "metrics.eps must be positive"
    if int(metrics.get("bins", 40)) < 1:
        return False, "metrics.bins must be >= 1"
    return True, ""


def _check_corpus(corpus: Dict[str, Any]) -> Tuple[bool, str]:
    fraction = corpus.get("test_fraction") or 0.0
    if isinstance(fraction, bool) or not isinstance(fraction, (int, float)) or not 0.0 <= fraction < 1.0:
        return False, f"corpus.test_fraction must lie in [0, 1), got {fraction!r}"
    split_seed = corpus.get("split_seed") or 0
    if isinstance(split_seed, bool) or not isinstance(split_seed, int) or split_seed < 0:
        return False, f"corpus.split_seed must be a non-negative integer, got {split_seed!r}"
    return True, ""


def build_run_config(config: Dict[str, Any], check_paths: bool = True) -> RunConfig:
    """校验并构建 RunConfig

    Args:
        config: 已与默认值合并的配置字典
        check_paths: 是否检查语料文件存在

    Raises:
        ConfigValidationError: 任一检查失败
    """
    unknown = sorted(set(config) - set(TOP_LEVEL_KEYS))
    if unknown:
        raise ConfigValidationError(f"unknown config keys: {', '.join(unknown)}")

    experiment = config.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigValidationError(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")

    ok, reason = _check_seeds(config.get("seeds"))
    if not ok:
        raise ConfigValidationError(reason)

    output_dir = config.get("output_dir")
    if not output_dir or not isinstance(output_dir, str):
        raise ConfigValidationError("output_dir must be a non-empty path")

    raw_stages = config.get("stages") or []
    if not isinstance(raw_stages, list):
        raise ConfigValidationError("stages must be a list of stage mappings")
    try:
        stages = [StageSpec.from_dict(dict(s)) for s in raw_stages]
    except (CascadeError, TypeError, ValueError) as e:
        raise ConfigValidationError(f"invalid stage spec: {e}") from e

    run = RunConfig(
        experiment=experiment,
        seeds=[int(s) for s in config["seeds"]],
        output_dir=output_dir,
        stages=stages,
        sphere=dict(config.get("sphere") or {}),
        training=dict(config.get("training") or {}),
        sampling=dict(config.get("sampling") or {}),
        metrics=dict(config.get("metrics") or {}),
    )

    ok, reason = check_specs(stages, run.modality)
    if not ok:
        raise ConfigValidationError(reason)

    if experiment == EXPERIMENT_SPHERE:
        try:
            run.sphere_spec(run.seeds[0])
        except (ManifoldError, TypeError) as e:
            raise ConfigValidationError(f"invalid sphere spec: {e}") from e
    else:
        corpus = config.get("corpus") or {}
        ok, reason = _check_corpus(corpus)
        if not ok:
            raise ConfigValidationError(reason)
        run.train_corpus = resolve_corpus_path(corpus.get("train"))
        run.reference_corpus = corpus.get("reference") or None
        run.test_fraction = float(corpus.get("test_fraction") or 0.0)
        run.split_seed = int(corpus.get("split_seed") or 0)
        if check_paths:
            for label, path in (("train", run.train_corpus), ("reference", run.reference_corpus)):
                if path and not os.path.isfile(path):
                    raise ConfigValidationError(f"corpus.{label} file does not exist: {path}")

    for check in (_check_sampling(run.sampling), _check_metrics(run.metrics)):
        ok, reason = check
        if not ok:
            raise ConfigValidationError(reason)
    return run


def validate_run_config(config: Dict[str, Any], check_paths: bool = True) -> Tuple[bool, str]:
    """非抛出版本

    Returns:
        Tuple[bool, str]: (是否合法, 原因)
    """
    try:
        build_run_config(config, check_paths=check_paths)
    except ConfigValidationError as e:
        return False, str(e)
    return True, "ok"
