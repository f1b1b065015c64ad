"""
球面流形恢复实验

训练数据：2 维单位球面上的均匀点（3 个坐标），补零到环境维度（默认 17，可配置为 19）。
每个级联深度采样 1000 个点，统计到单位球面的径向偏差并输出直方图。
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .api import logger
from .cascade import Cascade, StageSpec, sample_chain, train_cascade
from .numcore import Rng
from .reporting import (
    write_csv,
    write_histogram_csv,
    write_histogram_png,
    write_histogram_svg,
    write_key_values,
)

DEFAULT_EPS = 0.05
DEFAULT_BINS = 40
DEFAULT_SAMPLES = 1000


class ManifoldError(Exception):
    """球面实验相关异常"""
    pass


@dataclass
class SphereDatasetSpec:
    sphere_dim: int = 2
    ambient_dim: int = 17
    n_points: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.sphere_dim < 1:
            raise ManifoldError(f"sphere_dim must be >= 1, got {self.sphere_dim}")
        if self.ambient_dim < self.sphere_dim + 1:
            raise ManifoldError(
                f"ambient_dim {self.ambient_dim} cannot hold a {self.sphere_dim}-sphere "
                f"(needs >= {self.sphere_dim + 1})"
            )
        if self.n_points < 1:
            raise ManifoldError(f"n_points must be >= 1, got {self.n_points}")

    @property
    def pad_dims(self) -> int:
        return self.ambient_dim - self.sphere_dim - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SphereDatasetSpec":
        return cls(**data)


def generate_sphere_data(spec: SphereDatasetSpec) -> np.ndarray:
    """前 sphere_dim+1 个坐标为单位球面上的均匀点（标准正态归一化），其余坐标恰为 0"""
    rng = Rng(spec.seed).child(0)
    k = spec.sphere_dim + 1
    raw = rng.normal((spec.n_points, k))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    data = np.zeros((spec.n_points, spec.ambient_dim))
    data[:, :k] = raw / norms
    return data


def sample_norms(samples: np.ndarray) -> np.ndarray:
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise ManifoldError("cannot compute norms of an empty batch")
    return np.linalg.norm(samples, axis=1)


def radial_errors(samples: np.ndarray) -> np.ndarray:
    """每行完整环境向量的范数与 1 的偏差 |‖x‖ − 1|"""
    return np.abs(sample_norms(samples) - 1.0)


@dataclass
class RadialHistogram:
    edges: np.ndarray
    counts: np.ndarray
    total: int

    def rows(self) -> List[tuple]:
        return [(float(self.edges[i]), float(self.edges[i + 1]), int(self.counts[i]))
                for i in range(len(self.counts))]


def build_histogram(norms: Sequence[float], n_bins: int = DEFAULT_BINS) -> RadialHistogram:
    """在 [min, max] 上等宽分箱；输入全相同时 numpy 以该值为中心取单位宽度区间"""
    values = np.asarray(norms, dtype=np.float64).ravel()
    if values.size == 0:
        raise ManifoldError("cannot build a histogram of no values")
    if n_bins < 1:
        raise ManifoldError(f"n_bins must be >= 1, got {n_bins}")
    counts, edges = np.histogram(values, bins=int(n_bins))
    return RadialHistogram(edges=edges, counts=counts.astype(np.int64), total=int(values.size))


@dataclass
class RecoveryStats:
    median: float
    mean: float
    fraction_within: float
    eps: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def recovery_stats(samples: np.ndarray, eps: float = DEFAULT_EPS) -> RecoveryStats:
    errors = radial_errors(samples)
    return RecoveryStats(
        median=float(np.median(errors)),
        mean=float(np.mean(errors)),
        fraction_within=float(np.mean(errors <= eps)),
        eps=float(eps),
        n=int(errors.size),
    )


@dataclass
class DepthResult:
    """某个级联深度的采样诊断"""
    depth: int
    samples: np.ndarray
    histogram: RadialHistogram
    stats: RecoveryStats


@dataclass
class SphereExperimentResult:
    spec: SphereDatasetSpec
    cascade: Cascade
    depths: List[DepthResult] = field(default_factory=list)
    files: List[str] = field(default_factory=list)

    @property
    def gammas(self) -> List[Optional[float]]:
        return [getattr(m, "gamma", None) for m in self.cascade.stages]

    def metric_values(self) -> Dict[str, float]:
        """展平为 multi_seed_report 可汇总的指标"""
        values: Dict[str, float] = {}
        for d in self.depths:
            values[f"stage{d.depth}_median"] = d.stats.median
            values[f"stage{d.depth}_mean"] = d.stats.mean
            values[f"stage{d.depth}_fraction_within"] = d.stats.fraction_within
        for k, gamma in enumerate(self.gammas, start=1):
            if gamma is not None:
                values[f"stage{k}_gamma"] = gamma
        return values


def write_depth_files(result: DepthResult, out_dir: str) -> List[str]:
    stage_dir = os.path.join(out_dir, f"stage_{result.depth}")
    title = f"Stage {result.depth}: norm of sampled points"
    hist = result.histogram
    files = [
        write_histogram_csv(os.path.join(stage_dir, "histogram.csv"), hist.edges, hist.counts),
        write_histogram_svg(os.path.join(stage_dir, "histogram.svg"), hist.edges, hist.counts, title),
        write_key_values(os.path.join(stage_dir, "stats.txt"), {
            "depth": result.depth,
            "n_samples": result.stats.n,
            "eps": result.stats.eps,
            "median_radial_error": result.stats.median,
            "mean_radial_error": result.stats.mean,
            "fraction_within_eps": result.stats.fraction_within,
        }),
        write_csv(os.path.join(stage_dir, "samples.csv"),
                  [f"x{i}" for i in range(result.samples.shape[1])], result.samples.tolist()),
    ]
    png = write_histogram_png(os.path.join(stage_dir, "histogram.png"), hist.edges, hist.counts, title)
    if png:
        files.append(png)
    return files


def run_sphere_experiment(
    spec: SphereDatasetSpec,
    stage_specs: Sequence[StageSpec],
    rng: Rng,
    n_samples: int = DEFAULT_SAMPLES,
    n_bins: int = DEFAULT_BINS,
    eps: float = DEFAULT_EPS,
    training: Optional[dict] = None,
    intermediate_noise: bool = False,
    out_dir: Optional[str] = None,
) -> SphereExperimentResult:
    """训练级联，并在每个深度（链截断到该深度）采样、统计、输出直方图

    Args:
        spec: 球面数据集配置
        stage_specs: 各阶段配置，至少一个
        rng: 运行随机流
        n_samples: 每个深度的采样数
        n_bins: 直方图分箱数
        eps: 判定"落在球面上"的阈值
        training: training 配置段
        intermediate_noise: 中间阶段解码是否加 √γ 噪声
        out_dir: 给出时写出每个深度的 CSV / SVG / PNG / stats.txt 与 recovery.csv

    Returns:
        SphereExperimentResult
    """
    if not stage_specs:
        raise ManifoldError("at least one stage is required")
    data = generate_sphere_data(spec)
    logger.info(f"Sphere data: {spec.n_points} points, sphere dim {spec.sphere_dim}, ambient dim {spec.ambient_dim}")
    cascade = train_cascade(stage_specs, data, rng.child(1), training=training)

    result = SphereExperimentResult(spec=spec, cascade=cascade)
    for depth in range(1, cascade.depth + 1):
        samples = sample_chain(cascade, n_samples, rng.child(100 + depth), depth=depth,
                               intermediate_noise=intermediate_noise)
        norms = sample_norms(samples)
        depth_result = DepthResult(
            depth=depth,
            samples=samples,
            histogram=build_histogram(norms, n_bins),
            stats=recovery_stats(samples, eps),
        )
        result.depths.append(depth_result)
        logger.info(
            f"Depth {depth}: median |norm-1|={depth_result.stats.median:.4f}, "
            f"within eps={depth_result.stats.fraction_within:.3f}"
        )
        if out_dir:
            result.files.extend(write_depth_files(depth_result, out_dir))

    if out_dir:
        rows = [(d.depth, d.stats.median, d.stats.mean, d.stats.fraction_within) for d in result.depths]
        result.files.append(write_csv(os.path.join(out_dir, "recovery.csv"),
                                      ["depth", "median", "mean", "fraction_within_eps"], rows))
    return result
