import copy
import os
from typing import Any, Dict, List, Optional, Tuple

from .api import logger
from .numcore import Rng

PACKAGE_DIR = os.path.dirname(os.path.abspath(__file__))
DATA_DIR = os.path.join(PACKAGE_DIR, "data")
DEFAULT_CORPUS_PATH = os.path.join(DATA_DIR, "toy_corpus.smi")


def read_corpus(path: Optional[str] = None) -> List[str]:
    """读取一行一个 SMILES 的语料

    '#' 开头的注释行与空行跳过；其余行去除首尾空白后原样返回（不做去重）。

    Args:
        path: 语料路径，缺省为内置的 toy_corpus.smi

    Returns:
        字符串列表

    Raises:
        FileNotFoundError: 文件不存在
    """
    path = path or DEFAULT_CORPUS_PATH
    lines: List[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            lines.append(line)
    logger.debug(f"Read {len(lines)} entries from {path}")
    return lines


def resolve_corpus_path(path: Optional[str]) -> str:
    """空值表示内置语料"""
    return path if path else DEFAULT_CORPUS_PATH


def split_corpus(lines: List[str], test_fraction: float, split_seed: int = 0) -> Tuple[List[str], List[str]]:
    """按固定种子把语料切成 (训练部分, 留出部分)，两部分内保持原顺序

    留出条数为 round(test_fraction · n)，两部分都必须非空。

    Raises:
        ValueError: 比例不在 (0, 1) 内，或切分后某部分为空
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(lines)
    n_test = int(round(test_fraction * n))
    if n_test < 1 or n_test >= n:
        raise ValueError(f"cannot hold out {test_fraction} of {n} entries, both parts must be non-empty")
    order = Rng(int(split_seed)).child(0).permutation(n)
    held_out = {int(i) for i in order[:n_test]}
    train = [line for i, line in enumerate(lines) if i not in held_out]
    test = [line for i, line in enumerate(lines) if i in held_out]
    return train, test


def load_corpora(train_path: Optional[str], reference_path: Optional[str] = None,
                 test_fraction: float = 0.0, split_seed: int = 0) -> Tuple[List[str], List[str]]:
    """返回 (训练语料, 参考语料)

    - 给出 reference_path 时，两者分别读取各自的文件
    - 否则 test_fraction > 0 时，从训练文件中按 split_seed 留出参考部分
    - 否则参考语料就是训练语料本身

    Raises:
        FileNotFoundError: 文件不存在
        ValueError: 留出比例无法切分
    """
    lines = read_corpus(train_path)
    if reference_path:
        return lines, read_corpus(reference_path)
    if test_fraction and float(test_fraction) > 0:
        train, test = split_corpus(lines, float(test_fraction), int(split_seed))
        logger.info(f"Corpus split with seed {split_seed}: {len(train)} train / {len(test)} held out")
        return train, test
    logger.warning("No held-out reference set, property distances use the training corpus")
    return lines, lines


def deep_merge(base: Dict[str, Any], override: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    """递归合并字典，override 中的值优先；列表整体替换，不逐项合并"""
    result = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = copy.deepcopy(value)
    return result


def get_nested(config: Dict[str, Any], dotted: str, default: Any = None) -> Any:
    """按 'a.b.c' 取嵌套值，任一层缺失时返回 default"""
    node: Any = config
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def set_nested(config: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = config
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def format_mean_std(mean: float, std: float, digits: int = 4) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def read_samples(path: str) -> List[str]:
    """读取采样结果：每一行都是一个样本（空行是空字符串样本，'#' 开头也不是注释）"""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if not text:
        return []
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    return lines
