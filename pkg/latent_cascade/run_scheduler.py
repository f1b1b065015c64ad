"""
运行调度与运行清单

负责把多个种子分派到有限的工作线程上执行，每个种子写入自己的 `seed_<n>/` 子目录，
全部完成后写出唯一一份 `manifest.json`。
"""

import asyncio
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

from . import __version__
from .api import logger

MANIFEST_NAME = "manifest.json"
THREADS_ENV = "LATENT_CASCADE_THREADS"


class RunError(Exception):
    """运行目录或清单相关错误"""
    pass


@dataclass
class SeedOutput:
    """单个种子的产出索引（路径相对运行目录）"""
    seed: int
    directory: str
    files: List[str] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    metrics: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SeedOutput":
        return cls(**data)


@dataclass
class RunManifest:
    """运行清单：配置快照、版本、各阶段 checkpoint、起止时间与各种子产出"""
    command: str
    config: Dict[str, Any]
    version: str = __version__
    started_at: float = field(default_factory=time.time)
    finished_at: Optional[float] = None
    seeds: Dict[str, SeedOutput] = field(default_factory=dict)
    files: List[str] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["seeds"] = {k: v.to_dict() for k, v in self.seeds.items()}
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        data = dict(data)
        data["seeds"] = {k: SeedOutput.from_dict(v) for k, v in data.get("seeds", {}).items()}
        return cls(**data)

    def add_seed(self, output: SeedOutput) -> None:
        self.seeds[str(output.seed)] = output

    def seed_output(self, seed: int) -> Optional[SeedOutput]:
        return self.seeds.get(str(seed))

    @property
    def failed_seeds(self) -> List[int]:
        return sorted(int(k) for k, v in self.seeds.items() if not v.ok)

    def listed_files(self) -> List[str]:
        paths = list(self.files)
        for output in self.seeds.values():
            paths.extend(output.files)
            paths.extend(output.checkpoints)
        return paths


def worker_limit(n_jobs: int) -> int:
    """工作线程上限：环境变量 LATENT_CASCADE_THREADS，缺省为 min(任务数, CPU 数)"""
    default = max(1, min(n_jobs, os.cpu_count() or 1))
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning(f"Ignoring {THREADS_ENV}={raw!r}: not an integer")
        return default
    if value < 1:
        logger.warning(f"Ignoring {THREADS_ENV}={value}: must be >= 1")
        return default
    return min(value, max(n_jobs, 1))


def relative_to(path: str, root: str) -> str:
    return os.path.relpath(path, root).replace(os.sep, "/")


class RunScheduler:
    """种子扇出调度器"""

    def __init__(self, run_dir: str, max_workers: Optional[int] = None):
        self.run_dir = run_dir
        self.manifest_path = os.path.join(run_dir, MANIFEST_NAME)
        self.max_workers = max_workers
        self._manifest_written = False

    def seed_dir(self, seed: int) -> str:
        return os.path.join(self.run_dir, f"seed_{seed}")

    def _run_one(self, job: Callable[[int, str], SeedOutput], seed: int) -> SeedOutput:
        directory = self.seed_dir(seed)
        os.makedirs(directory, exist_ok=True)
        try:
            output = job(seed, directory)
        except Exception as e:
            logger.error(f"Seed {seed} failed: {e}")
            return SeedOutput(seed=seed, directory=relative_to(directory, self.run_dir), error=str(e))
        output.directory = relative_to(directory, self.run_dir)
        output.files = [relative_to(p, self.run_dir) for p in output.files]
        output.checkpoints = [relative_to(p, self.run_dir) for p in output.checkpoints]
        return output

    async def run_seeds_async(self, seeds: Sequence[int],
                              job: Callable[[int, str], SeedOutput]) -> List[SeedOutput]:
        """并行执行各种子的任务

        Args:
            seeds: 种子列表
            job: job(seed, seed_dir) -> SeedOutput，在工作线程中执行

        Returns:
            按种子排序的 SeedOutput 列表；失败的种子带 error 字段
        """
        seeds = sorted(int(s) for s in seeds)
        workers = self.max_workers or worker_limit(len(seeds))
        os.makedirs(self.run_dir, exist_ok=True)
        logger.info(f"Running {len(seeds)} seed(s) on {workers} worker(s)")
        loop = asyncio.get_running_loop()
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [loop.run_in_executor(executor, self._run_one, job, seed) for seed in seeds]
            results = await asyncio.gather(*futures)
        return sorted(results, key=lambda r: r.seed)

    def run_seeds(self, seeds: Sequence[int], job: Callable[[int, str], SeedOutput]) -> List[SeedOutput]:
        return asyncio.run(self.run_seeds_async(seeds, job))

    def _save_manifest_sync(self, data: dict) -> None:
        """同步写清单（供 run_in_executor 使用）"""
        with open(self.manifest_path, "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2)

    async def write_manifest_async(self, manifest: RunManifest) -> str:
        if self._manifest_written:
            raise RunError(f"manifest for {self.run_dir} was already written")
        missing = [p for p in manifest.listed_files() if not os.path.exists(os.path.join(self.run_dir, p))]
        if missing:
            raise RunError(f"manifest lists {len(missing)} missing file(s), first: {missing[0]}")
        manifest.finished_at = time.time()
        try:
            loop = asyncio.get_running_loop()
            await loop.run_in_executor(None, self._save_manifest_sync, manifest.to_dict())
        except Exception as e:
            logger.error(f"Failed to save run manifest: {e}")
            raise
        self._manifest_written = True
        logger.info(f"Run manifest written: {self.manifest_path}")
        return self.manifest_path

    def write_manifest(self, manifest: RunManifest) -> str:
        return asyncio.run(self.write_manifest_async(manifest))


def load_manifest(run_dir: str) -> RunManifest:
    path = os.path.join(run_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise RunError(f"no {MANIFEST_NAME} in {run_dir}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return RunManifest.from_dict(json.load(f))
    except (json.JSONDecodeError, TypeError) as e:
        raise RunError(f"cannot read run manifest {path}: {e}") from e


def is_occupied(run_dir: str) -> bool:
    """目录存在且非空即视为已被占用"""
    return os.path.isdir(run_dir) and bool(os.listdir(run_dir))
