"""
eval 子命令：样本质量与性质分布评估

输入可以是显式的样本文件（--samples 可重复），也可以是 sample 命令的运行目录（--run），
此时样本文件、训练语料与参考语料都从 manifest.json 解析。新颖性对照训练部分；
没有单独的参考语料时，性质分布的 W1 对照按 test_fraction 与 split_seed 从训练语料中留出的部分。输出：
- report.csv：每个指标一行，列为 mean、std 以及每个样本文件的原始值
- report.txt：键值文本，指标写成 mean ± std
"""

import os
from typing import Any, Dict, List, Optional, Tuple

from ..api import logger
from ..config_validator import ConfigValidationError
from ..metrics import DEFAULT_K, DESCRIPTORS, MetricsError, MultiSeedReport, multi_seed_report, property_report, sample_quality
from ..reporting import write_csv, write_key_values
from ..run_scheduler import RunError, RunManifest, RunScheduler, is_occupied, load_manifest, relative_to
from ..utils import format_mean_std, load_corpora, read_samples, resolve_corpus_path
from .base import (
    CONFIG_PARAM,
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
    FORCE_PARAM,
    OUT_PARAM,
    Command,
    CommandResult,
)
from .sample import SAMPLES_TXT

REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"


def evaluate_samples(gen: List[str], train: List[str], reference: List[str], k: int) -> Dict[str, float]:
    """单个样本集合的全部指标"""
    quality = sample_quality(gen, train, k)
    values: Dict[str, float] = dict(quality.metric_values())
    values["total"] = float(quality.total)
    values["invalid"] = float(quality.invalid)
    values["unsupported"] = float(quality.unsupported)
    values["k_used"] = float(quality.k)
    distances = property_report(gen, reference)
    for name in DESCRIPTORS:
        values[f"w1_{name}"] = distances.distances[name]
    return values


def resolve_inputs(run_dir: Optional[str], samples: Optional[List[str]]) -> Tuple[Dict[int, str], Dict[str, Any]]:
    """返回 {标签: 样本文件} 与来源配置快照

    来自运行目录时标签为采样种子，否则为文件序号。
    """
    config: Dict[str, Any] = {}
    if run_dir:
        manifest = load_manifest(run_dir)
        config = manifest.config
        if not samples:
            files = {}
            for key, output in sorted(manifest.seeds.items(), key=lambda kv: int(kv[0])):
                if output.ok:
                    files[int(key)] = os.path.join(run_dir, output.directory, SAMPLES_TXT)
            if not files:
                raise RunError(f"run {run_dir} lists no successful sample files")
            return files, config
    if not samples:
        raise RunError("no sample files given (use --samples or --run)")
    return {i: path for i, path in enumerate(samples)}, config


def write_report(out_dir: str, report: MultiSeedReport, labels: List[int], header: Dict[str, Any]) -> List[str]:
    columns = [f"set_{label}" for label in labels]
    rows = []
    for name, (mean, std) in report.summary.items():
        raw = [report.per_seed.get(label, {}).get(name, "") for label in labels]
        rows.append([name, mean, std] + raw)
    csv_path = write_csv(os.path.join(out_dir, REPORT_CSV), ["metric", "mean", "std"] + columns, rows)

    items = dict(header)
    items["n_sets"] = len(labels)
    items["failed_sets"] = " ".join(str(s) for s in report.failures) or "none"
    for label, reason in report.failures.items():
        items[f"failure_set_{label}"] = reason
    for name, (mean, std) in report.summary.items():
        items[name] = format_mean_std(mean, std)
    txt_path = write_key_values(os.path.join(out_dir, REPORT_TXT), items)
    return [csv_path, txt_path]


class EvalCommand(Command):
    """Valid / Unique@k / Novelty 与 4 个描述符的 W1 距离；多个样本集合时给出 mean ± std"""

    name = "eval"
    description = "Evaluate sampled SMILES against the training and reference corpora."
    parameters = {
        "type": "object",
        "properties": {
            "samples": {"type": "array", "items": {"type": "string"}, "description": "样本文件，可重复指定"},
            "run": {"type": "string", "description": "sample 命令的输出目录"},
            "reference": {"type": "string", "description": "参考语料（性质分布）；缺省时按 test_fraction 从训练语料留出"},
            "test_fraction": {"type": "number", "description": "从训练语料留出参考集的比例（0 表示不切分）"},
            "train": {"type": "string", "description": "训练语料（新颖性）"},
            "k": {"type": "integer", "description": "Unique@k 的 k"},
            "config": CONFIG_PARAM,
            "out": OUT_PARAM,
            "force": FORCE_PARAM,
        },
        "required": [],
    }

    def call(self, **kwargs) -> CommandResult:
        run_dir = kwargs.get("run")
        try:
            files, source = resolve_inputs(run_dir, kwargs.get("samples"))
            file_config = self.app.read_config_file(kwargs.get("config"))
        except (RunError, ConfigValidationError) as e:
            logger.error(f"Invalid eval inputs: {e}")
            return CommandResult(EXIT_CONFIG_ERROR, f"config error: {e}")

        corpus = dict(source.get("corpus") or {})
        corpus.update({k: v for k, v in (file_config.get("corpus") or {}).items() if v is not None})
        train_path = kwargs.get("train") or resolve_corpus_path(corpus.get("train"))
        reference_path = kwargs.get("reference") or corpus.get("reference")
        test_fraction = kwargs.get("test_fraction")
        if test_fraction is None:
            test_fraction = corpus.get("test_fraction") or 0.0
        split_seed = int(corpus.get("split_seed") or 0)
        if not 0.0 <= float(test_fraction) < 1.0:
            return CommandResult(EXIT_CONFIG_ERROR, f"config error: test_fraction must lie in [0, 1), got {test_fraction}")
        k = kwargs.get("k") or (file_config.get("metrics") or {}).get("k") \
            or (source.get("metrics") or {}).get("k") or DEFAULT_K
        if int(k) < 1:
            return CommandResult(EXIT_CONFIG_ERROR, f"config error: k must be >= 1, got {k}")

        missing = [p for p in list(files.values()) + [train_path, reference_path] if p and not os.path.isfile(p)]
        if missing:
            return CommandResult(EXIT_CONFIG_ERROR, f"config error: file not found: {missing[0]}")

        out = kwargs.get("out") or (os.path.join(run_dir, "eval") if run_dir else "eval")
        if is_occupied(out) and not kwargs.get("force"):
            return CommandResult(EXIT_CONFIG_ERROR, f"output directory {out} is not empty (use --force to reuse it)", out)

        try:
            train, reference = load_corpora(train_path, reference_path, float(test_fraction), split_seed)
        except ValueError as e:
            return CommandResult(EXIT_CONFIG_ERROR, f"config error: {e}", out)
        logger.info(f"Evaluating {len(files)} sample set(s) against {len(train)} training / {len(reference)} reference strings")

        def run_fn(label: int) -> Dict[str, float]:
            return evaluate_samples(read_samples(files[label]), train, reference, int(k))

        try:
            report = multi_seed_report(run_fn, list(files))
        except MetricsError as e:
            return CommandResult(EXIT_RUNTIME_ERROR, f"evaluation failed: {e}", out)

        labels = sorted(files)
        header = {
            "train": train_path,
            "reference": reference_path or ("held out from train" if float(test_fraction) > 0 else train_path),
            "test_fraction": float(test_fraction),
            "split_seed": split_seed,
            "n_train": len(train),
            "n_reference": len(reference),
            "k_requested": int(k),
        }
        for label in labels:
            header[f"samples_set_{label}"] = files[label]
        os.makedirs(out, exist_ok=True)
        written = write_report(out, report, labels, header)

        scheduler = RunScheduler(out)
        manifest = RunManifest(command=self.name, config={
            "samples": {str(label): files[label] for label in labels},
            "train": train_path,
            "reference": reference_path,
            "test_fraction": float(test_fraction),
            "split_seed": split_seed,
            "k": int(k),
            "source_run": run_dir,
        })
        manifest.files = [relative_to(p, out) for p in written]
        manifest.extra["summary"] = report.to_dict()["summary"]
        scheduler.write_manifest(manifest)

        if report.failures:
            detail = "; ".join(f"set {s}: {r}" for s, r in report.failures.items())
            return CommandResult(EXIT_RUNTIME_ERROR, f"evaluation failed for some sets: {detail}", out)
        return CommandResult(EXIT_OK, f"evaluation report written to {out}", out)
