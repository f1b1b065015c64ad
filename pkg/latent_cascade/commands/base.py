"""
命令基类与各命令共用的辅助函数
"""

import os
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Union

import numpy as np

from ..cascade import Cascade
from ..metrics import MultiSeedReport
from ..reporting import write_csv, write_key_values
from ..run_scheduler import SeedOutput
from ..utils import format_mean_std

if TYPE_CHECKING:
    from ..main import LatentCascadeApp

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3

LOSS_TRACE_HEADER = ["stage", "epoch", "loss", "recon", "kl", "beta", "gamma", "entropy"]


@dataclass
class CommandResult:
    exit_code: int
    message: str
    run_dir: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.exit_code == EXIT_OK


class Command:
    """子命令基类

    name / description / parameters 描述命令行参数（parameters 为 JSON schema 风格，
    由 main.py 生成 argparse 选项），call(**kwargs) 执行命令。
    """

    name: str = ""
    description: str = ""
    parameters: Dict[str, Any] = {"type": "object", "properties": {}, "required": []}

    def __init__(self, app: "LatentCascadeApp"):
        self.app = app

    def call(self, **kwargs) -> CommandResult:
        raise NotImplementedError


# 常用参数定义
CONFIG_PARAM = {"type": "string", "description": "YAML 运行配置路径"}
SEED_PARAM = {"type": "array", "items": {"type": "integer"}, "description": "随机种子，可重复指定"}
OUT_PARAM = {"type": "string", "description": "输出目录"}
FORCE_PARAM = {"type": "boolean", "description": "允许写入已有内容的运行目录"}


def _cell(value: Any) -> Any:
    return "" if value is None else value


def write_loss_trace(path: str, cascade: Cascade) -> str:
    """每个阶段每轮一行"""
    rows = []
    for k, result in enumerate(cascade.histories, start=1):
        for record in result.history:
            d = record.to_dict()
            rows.append([k] + [_cell(d[key]) for key in LOSS_TRACE_HEADER[1:]])
    return write_csv(path, LOSS_TRACE_HEADER, rows)


def write_seed_summary(run_dir: str, report: MultiSeedReport, stem: str = "summary") -> List[str]:
    """跨种子汇总：CSV（metric, mean, std）与键值文本"""
    csv_path = write_csv(
        os.path.join(run_dir, f"{stem}.csv"),
        ["metric", "mean", "std", "n_seeds"],
        [(name, mean, std, len(report.per_seed)) for name, (mean, std) in report.summary.items()],
    )
    items: Dict[str, Any] = {
        "seeds": " ".join(str(s) for s in report.seeds),
        "failed_seeds": " ".join(str(s) for s in report.failures) or "none",
    }
    for name, (mean, std) in report.summary.items():
        items[name] = format_mean_std(mean, std)
    txt_path = write_key_values(os.path.join(run_dir, f"{stem}.txt"), items)
    return [csv_path, txt_path]


def failure_message(outputs: Sequence[SeedOutput]) -> str:
    failed = [o for o in outputs if not o.ok]
    return "; ".join(f"seed {o.seed}: {o.error}" for o in failed)


def write_vectors(path: str, samples: Union[np.ndarray, Sequence[Sequence[float]]]) -> str:
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    header = [f"x{i}" for i in range(samples.shape[1])]
    return write_csv(path, header, samples.tolist())
