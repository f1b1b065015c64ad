"""
分布学习评估：样本质量（Valid / Unique@k / Novelty）与性质分布的 Wasserstein-1 距离

约定：
- 唯一性与新颖性比较去除首尾空白后的原始字符串，不做规范化
- 性质距离只在有效分子上计算
- 使用了不支持语法特性的字符串计入无效，但单独计数
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .api import logger
from .smiles import (
    STATUS_INVALID,
    STATUS_UNSUPPORTED,
    STATUS_VALID,
    check_smiles,
    molecular_weight,
    simple_descriptors,
)

DEFAULT_K = 1000
DESCRIPTORS = ("MW", "heavy_atoms", "rings", "aromatic_fraction")


class MetricsError(Exception):
    """评估输入不合法"""
    pass


def _sorted_sample(values) -> np.ndarray:
    if not isinstance(values, np.ndarray):
        values = list(values)
    return np.sort(np.asarray(values, dtype=np.float64).ravel())


def w1_distance(a: Iterable[float], b: Iterable[float]) -> float:
    """一维经验分布的 Wasserstein-1 距离（分位函数积分）

    两组样本数相同时为排序后逐项差的绝对值均值；否则在两组分位点合并后的网格上
    对 |F_a⁻¹ − F_b⁻¹| 分段积分。网格用整数刻度 n·m 表示，避免浮点取整误差。

    Raises:
        MetricsError: 任一输入为空或含非有限值
    """
    a, b = _sorted_sample(a), _sorted_sample(b)
    if a.size == 0 or b.size == 0:
        raise MetricsError("w1_distance needs two non-empty samples")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise MetricsError("w1_distance inputs must be finite")
    n, m = a.size, b.size
    if n == m:
        return float(np.mean(np.abs(a - b)))
    # 分位点 i/n 与 j/m 在公共刻度上分别是 i·m 与 j·n
    points = np.union1d(np.arange(1, n + 1) * m, np.arange(1, m + 1) * n)
    widths = np.diff(np.concatenate([[0], points])) / float(n * m)
    idx_a = (points + m - 1) // m - 1
    idx_b = (points + n - 1) // n - 1
    return float(np.sum(widths * np.abs(a[idx_a] - b[idx_b])))


def normalize(text: str) -> str:
    return text.strip()


# =============================================
# 样本质量
# =============================================

@dataclass
class SampleReport:
    total: int
    valid: int
    invalid: int
    unsupported: int
    valid_fraction: float
    unique_at_k: float
    novelty: float
    k: int
    k_requested: int

    @property
    def k_clipped(self) -> bool:
        return self.k < self.k_requested

    def to_dict(self) -> dict:
        data = asdict(self)
        data["k_clipped"] = self.k_clipped
        return data

    def metric_values(self) -> Dict[str, float]:
        return {
            "valid": self.valid_fraction,
            "unique_at_k": self.unique_at_k,
            "novelty": self.novelty,
        }


def sample_quality(gen: Sequence[str], train: Iterable[str], k: int = DEFAULT_K) -> SampleReport:
    """计算有效率、前 k 个的唯一率和新颖率

    k 大于生成数量时按生成数量截断并记录警告。

    Raises:
        MetricsError: gen 为空或 k ≤ 0
    """
    gen = [normalize(s) for s in gen]
    if not gen:
        raise MetricsError("no generated strings to evaluate")
    if k <= 0:
        raise MetricsError(f"k must be positive, got {k}")
    k_used = min(int(k), len(gen))
    if k_used < k:
        logger.warning(f"unique@k requested k={k} but only {len(gen)} samples exist, using k={k_used}")

    train_set = {normalize(s) for s in train}
    counts = {STATUS_VALID: 0, STATUS_INVALID: 0, STATUS_UNSUPPORTED: 0}
    valid_strings: List[str] = []
    for text in gen:
        status = check_smiles(text).status
        counts[status] += 1
        if status == STATUS_VALID:
            valid_strings.append(text)

    total = len(gen)
    unique = len(set(gen[:k_used])) / k_used
    novel = sum(1 for s in valid_strings if s not in train_set)
    novelty = novel / len(valid_strings) if valid_strings else 0.0
    return SampleReport(
        total=total,
        valid=counts[STATUS_VALID],
        invalid=counts[STATUS_INVALID],
        unsupported=counts[STATUS_UNSUPPORTED],
        valid_fraction=counts[STATUS_VALID] / total,
        unique_at_k=unique,
        novelty=novelty,
        k=k_used,
        k_requested=int(k),
    )


# =============================================
# 性质分布
# =============================================

def descriptor_table(texts: Iterable[str]) -> Dict[str, List[float]]:
    """对有效分子计算各描述符，无效字符串跳过"""
    table: Dict[str, List[float]] = {name: [] for name in DESCRIPTORS}
    for text in texts:
        result = check_smiles(text)
        if not result.valid:
            continue
        heavy, rings, aromatic = simple_descriptors(result.mol)
        table["MW"].append(molecular_weight(result.mol))
        table["heavy_atoms"].append(float(heavy))
        table["rings"].append(float(rings))
        table["aromatic_fraction"].append(aromatic)
    return table


@dataclass
class PropertyDistance:
    distances: Dict[str, float]
    n_gen_valid: int
    n_ref_valid: int

    def to_dict(self) -> dict:
        return asdict(self)


def property_report(gen: Iterable[str], ref: Iterable[str]) -> PropertyDistance:
    """生成集与参考集在每个描述符上的 W1 距离

    Raises:
        MetricsError: 任一集合没有有效分子
    """
    gen_table = descriptor_table(gen)
    ref_table = descriptor_table(ref)
    n_gen, n_ref = len(gen_table["MW"]), len(ref_table["MW"])
    if n_gen == 0 or n_ref == 0:
        raise MetricsError(f"property report needs valid molecules in both sets (gen {n_gen}, ref {n_ref})")
    distances = {name: w1_distance(gen_table[name], ref_table[name]) for name in DESCRIPTORS}
    return PropertyDistance(distances=distances, n_gen_valid=n_gen, n_ref_valid=n_ref)


# =============================================
# 多种子汇总
# =============================================

@dataclass
class MultiSeedReport:
    seeds: List[int]
    per_seed: Dict[int, Dict[str, float]] = field(default_factory=dict)
    failures: Dict[int, str] = field(default_factory=dict)
    summary: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    @property
    def metric_names(self) -> List[str]:
        return list(self.summary.keys())

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "per_seed": {str(s): v for s, v in self.per_seed.items()},
            "failures": {str(s): v for s, v in self.failures.items()},
            "summary": {name: {"mean": mean, "std": std} for name, (mean, std) in self.summary.items()},
        }


def aggregate_seed_metrics(per_seed: Dict[int, Dict[str, float]],
                           failures: Optional[Dict[int, str]] = None) -> MultiSeedReport:
    """按种子排序后求各指标的均值与总体标准差（ddof=0）"""
    failures = dict(sorted((failures or {}).items()))
    ordered = dict(sorted(per_seed.items()))
    names: List[str] = []
    for values in ordered.values():
        for name in values:
            if name not in names:
                names.append(name)
    summary: Dict[str, Tuple[float, float]] = {}
    for name in names:
        column = np.array([values[name] for values in ordered.values() if name in values], dtype=np.float64)
        summary[name] = (float(column.mean()), float(column.std(ddof=0)))
    seeds = sorted(set(ordered) | set(failures))
    return MultiSeedReport(seeds=seeds, per_seed=ordered, failures=failures, summary=summary)


def multi_seed_report(run_fn: Callable[[int], Dict[str, float]], seeds: Sequence[int]) -> MultiSeedReport:
    """逐个种子执行采样+评估闭包并汇总；失败的种子单独记录，不会被静默丢弃

    Raises:
        MetricsError: seeds 为空
    """
    if not seeds:
        raise MetricsError("multi_seed_report needs at least one seed")
    per_seed: Dict[int, Dict[str, float]] = {}
    failures: Dict[int, str] = {}
    for seed in sorted(seeds):
        try:
            per_seed[seed] = {k: float(v) for k, v in run_fn(seed).items()}
        except Exception as e:
            logger.error(f"Seed {seed} failed: {e}")
            failures[seed] = str(e)
    return aggregate_seed_metrics(per_seed, failures)
