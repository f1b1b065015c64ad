"""
多阶段 VAE 级联

第 1 阶段在原始数据上训练；第 k 阶段在第 k−1 阶段提取的潜变量 {v_i} 上训练。
采样时在最深阶段抽取 z ~ N(0, I)，逐级用高斯解码均值向下解码，
最后由第 1 阶段解码回数据空间。
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .api import logger
from .metrics import w1_distance
from .numcore import Rng, Tensor
from .seqvae import PAD_INDEX, SeqVaeModel, Vocab, encode_sequence, sample_sequences, train_seq_stage
from .vae import (
    HEAD_CATEGORICAL,
    HEAD_GAUSSIAN,
    HEAD_KINDS,
    TrainConfig,
    TrainResult,
    VaeModel,
    encode,
    reparameterize,
    train_stage,
)

MODALITY_VECTOR = "vector"
MODALITY_SEQUENCE = "sequence"

StageModel = Union[VaeModel, SeqVaeModel]
Dataset = Union[np.ndarray, Sequence[str]]

_EXTRACT_CHUNK = 1024


class CascadeError(Exception):
    """级联训练或采样失败，stage_index 为出错阶段（从 1 开始）"""

    def __init__(self, stage_index: Optional[int], detail: str):
        self.stage_index = stage_index
        self.detail = detail
        prefix = f"stage {stage_index}: " if stage_index is not None else ""
        super().__init__(f"{prefix}{detail}")


@dataclass
class StageSpec:
    """单个阶段的结构与训练参数"""
    latent_dim: int
    hidden: List[int] = field(default_factory=lambda: [64, 64])
    epochs: int = 60
    beta: float = 1.0
    head: str = HEAD_GAUSSIAN
    lr: float = 2e-3
    batch_size: int = 100
    # 高斯阶段：log γ 的初始值
    init_log_gamma: float = 0.0
    # KL 系数线性退火的步数比例；空值时序列阶段取 0.2，高斯阶段不退火
    kl_anneal_fraction: Optional[float] = None
    # 以下仅用于序列（categorical）阶段
    embed_dim: int = 32
    hidden_size: int = 64
    decoder_layers: int = 1
    max_len: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "StageSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise CascadeError(None, f"unknown stage keys: {', '.join(unknown)}")
        spec = cls(**data)
        spec.hidden = [int(h) for h in spec.hidden]
        return spec

    @property
    def anneal_fraction(self) -> float:
        if self.kl_anneal_fraction is None:
            return 0.2 if self.head == HEAD_CATEGORICAL else 0.0
        return float(self.kl_anneal_fraction)

    def train_config(self, training: Optional[dict] = None) -> TrainConfig:
        """合并 training 配置段（Adam 超参数、log_every）得到 TrainConfig"""
        training = training or {}
        betas = training.get("adam_betas", [0.9, 0.999])
        return TrainConfig(
            epochs=int(self.epochs),
            batch_size=int(self.batch_size),
            lr=float(self.lr),
            beta=float(self.beta),
            beta1=float(betas[0]),
            beta2=float(betas[1]),
            eps=float(training.get("adam_eps", 1e-8)),
            kl_anneal_fraction=self.anneal_fraction,
            log_every=int(training.get("log_every", 10)),
        )


@dataclass
class LatentDataset:
    """某阶段编码器对训练集的一次后验采样"""
    data: np.ndarray
    stage_index: int
    seed: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise CascadeError(self.stage_index, f"latent matrix must be 2-d, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise CascadeError(self.stage_index, "latent matrix contains NaN/Inf")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape


@dataclass
class Cascade:
    """训练完成（冻结）的级联"""
    stages: List[StageModel]
    specs: List[StageSpec]
    latents: List[LatentDataset]
    modality: str
    data_dim: Optional[int] = None
    seed: int = 0
    histories: List[TrainResult] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.stages)

    @property
    def vocab(self) -> Optional[Vocab]:
        first = self.stages[0] if self.stages else None
        return first.vocab if isinstance(first, SeqVaeModel) else None

    def describe(self) -> List[dict]:
        rows = []
        for k, (model, spec) in enumerate(zip(self.stages, self.specs), start=1):
            rows.append({
                "stage": k,
                "kind": model.kind,
                "head": spec.head,
                "input_dim": self.input_dim(k),
                "latent_dim": model.latent_dim,
                "gamma": getattr(model, "gamma", None),
            })
        return rows

    def input_dim(self, stage_index: int) -> Optional[int]:
        if stage_index == 1:
            return self.data_dim
        return self.stages[stage_index - 2].latent_dim


# =============================================
# 校验
# =============================================

def check_specs(specs: Sequence[StageSpec], modality: str) -> Tuple[bool, str]:
    """检查阶段配置能否串联

    Returns:
        (是否合法, 原因)
    """
    if not specs:
        return False, "at least one stage is required"
    for k, spec in enumerate(specs, start=1):
        if spec.head not in HEAD_KINDS:
            return False, f"stage {k}: unknown head '{spec.head}'"
        if spec.latent_dim < 1:
            return False, f"stage {k}: latent_dim must be >= 1"
        if spec.epochs < 0:
            return False, f"stage {k}: epochs must be >= 0"
        if spec.kl_anneal_fraction is not None and not 0.0 <= spec.kl_anneal_fraction <= 1.0:
            return False, f"stage {k}: kl_anneal_fraction must lie in [0, 1]"
        if k == 1:
            expected = HEAD_CATEGORICAL if modality == MODALITY_SEQUENCE else HEAD_GAUSSIAN
            if spec.head != expected:
                return False, f"stage 1: {modality} data needs a {expected} head, got {spec.head}"
            continue
        if spec.head != HEAD_GAUSSIAN:
            return False, f"stage {k}: stages after the first must use a gaussian head"
        previous = specs[k - 2].latent_dim
        if spec.latent_dim != previous:
            return False, (f"stage {k}: latent_dim {spec.latent_dim} must equal its input dim "
                           f"(stage {k - 1} latent_dim {previous})")
    return True, ""


def _first_bad_stage(reason: str) -> Optional[int]:
    if reason.startswith("stage "):
        head = reason.split(":", 1)[0]
        try:
            return int(head.split()[1])
        except (IndexError, ValueError):
            return None
    return None


def validate_specs(specs: Sequence[StageSpec], modality: str) -> None:
    ok, reason = check_specs(specs, modality)
    if not ok:
        raise CascadeError(_first_bad_stage(reason), reason.split(": ", 1)[-1])


def detect_modality(dataset: Dataset) -> str:
    if isinstance(dataset, np.ndarray):
        return MODALITY_VECTOR
    return MODALITY_SEQUENCE


# =============================================
# 训练
# =============================================

def _build_stage(spec: StageSpec, input_dim: Optional[int], vocab: Optional[Vocab], rng: Rng) -> StageModel:
    if spec.head == HEAD_CATEGORICAL:
        return SeqVaeModel(
            vocab,
            latent_dim=spec.latent_dim,
            hidden_size=spec.hidden_size,
            embed_dim=spec.embed_dim,
            decoder_layers=spec.decoder_layers,
            max_len=spec.max_len,
            rng=rng,
        )
    return VaeModel(input_dim, spec.latent_dim, hidden=spec.hidden, head=HEAD_GAUSSIAN, rng=rng,
                    init_log_gamma=spec.init_log_gamma)


def extract_latents(model: StageModel, dataset: Dataset, rng: Rng,
                    stage_index: int = 1, seed: int = 0) -> LatentDataset:
    """对每个数据点抽一次 v_i ~ q(v|x_i)

    Raises:
        CascadeError: 模型未训练或数据维度不符
    """
    if not model.trained:
        raise CascadeError(stage_index, "cannot extract latents from an untrained model")
    chunks = []
    if isinstance(model, SeqVaeModel):
        tokens = model.vocab.pad_batch(list(dataset), model.max_len)
        lengths = (tokens != PAD_INDEX).sum(axis=1)
        for start in range(0, len(tokens), _EXTRACT_CHUNK):
            rows = tokens[start:start + _EXTRACT_CHUNK]
            width = int(lengths[start:start + _EXTRACT_CHUNK].max())
            post = encode_sequence(model, rows[:, :width])
            chunks.append(reparameterize(post, rng).data)
    else:
        data = np.asarray(dataset, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != model.input_dim:
            raise CascadeError(stage_index, f"dataset shape {data.shape} does not match input dim {model.input_dim}")
        for start in range(0, len(data), _EXTRACT_CHUNK):
            post = encode(model, Tensor._wrap(data[start:start + _EXTRACT_CHUNK]))
            chunks.append(reparameterize(post, rng).data)
    matrix = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, model.latent_dim))
    return LatentDataset(matrix, stage_index=stage_index, seed=seed)


def _stage_rng(rng: Rng, stage_index: int, slot: int) -> Rng:
    return rng.child(10 * stage_index + slot)


def train_cascade(
    specs: Sequence[StageSpec],
    dataset: Dataset,
    rng: Rng,
    training: Optional[dict] = None,
    vocab: Optional[Vocab] = None,
    on_stage_done: Optional[Callable[[int, StageModel, TrainResult], None]] = None,
) -> Cascade:
    """按顺序训练全部阶段，返回冻结的级联

    Args:
        specs: 各阶段配置
        dataset: 向量矩阵 [n × d] 或 SMILES 字符串列表
        rng: 运行随机流
        training: training 配置段（Adam 超参数、resample_latents、log_every）
        vocab: 序列数据的词表，缺省时由数据构建
        on_stage_done: 每个阶段训练结束后的回调

    Raises:
        CascadeError: 配置不可串联（训练前），或某阶段训练失败（附阶段序号）
    """
    training = training or {}
    specs = list(specs)
    modality = detect_modality(dataset)
    validate_specs(specs, modality)
    if len(dataset) == 0:
        raise CascadeError(1, "dataset is empty")

    data_dim = None
    if modality == MODALITY_VECTOR:
        dataset = np.asarray(dataset, dtype=np.float64)
        data_dim = int(dataset.shape[1])
    else:
        dataset = [str(s) for s in dataset]
        vocab = vocab or Vocab.from_corpus(dataset)

    resample = bool(training.get("resample_latents", False))
    stages: List[StageModel] = []
    latents: List[LatentDataset] = []
    histories: List[TrainResult] = []

    for k, spec in enumerate(specs, start=1):
        stage_input = dataset if k == 1 else latents[-1].data
        input_dim = data_dim if k == 1 else specs[k - 2].latent_dim
        model = _build_stage(spec, input_dim, vocab, _stage_rng(rng, k, 0))
        config = spec.train_config(training)
        logger.info(f"Cascade stage {k}/{len(specs)}: {model!r}")
        try:
            if isinstance(model, SeqVaeModel):
                result = train_seq_stage(model, stage_input, config, _stage_rng(rng, k, 1), stage_index=k)
            else:
                dataset_fn = None
                if resample and k > 1:
                    previous = stages[-1]
                    previous_input = dataset if k == 2 else latents[-2].data
                    extract_rng = _stage_rng(rng, k, 3)

                    def dataset_fn(epoch: int, _prev=previous, _inp=previous_input, _rng=extract_rng, _k=k):
                        return extract_latents(_prev, _inp, _rng.child(epoch), stage_index=_k - 1).data

                result = train_stage(model, stage_input, config, _stage_rng(rng, k, 1),
                                     stage_index=k, dataset_fn=dataset_fn)
            if config.epochs == 0:
                model.trained = True
        except CascadeError:
            raise
        except Exception as e:
            logger.error(f"Stage {k} training failed: {e}")
            raise CascadeError(k, f"training failed: {e}") from e

        stages.append(model)
        histories.append(result)
        latents.append(extract_latents(model, stage_input, _stage_rng(rng, k, 2), stage_index=k, seed=rng.seed))
        if on_stage_done is not None:
            on_stage_done(k, model, result)

    return Cascade(
        stages=stages,
        specs=specs,
        latents=latents,
        modality=modality,
        data_dim=data_dim,
        seed=rng.seed,
        histories=histories,
    )


# =============================================
# 采样
# =============================================

def _check_depth(cascade: Cascade, depth: Optional[int]) -> int:
    depth = cascade.depth if depth is None else int(depth)
    if depth < 1 or depth > cascade.depth:
        raise CascadeError(None, f"depth {depth} is outside 1..{cascade.depth}")
    return depth


def chain_latents(cascade: Cascade, n: int, rng: Rng, depth: Optional[int] = None,
                  intermediate_noise: bool = False) -> np.ndarray:
    """从第 depth 阶段的先验出发，解码到第 1 阶段的潜空间

    depth=1 时直接返回第 1 阶段的先验样本。
    """
    depth = _check_depth(cascade, depth)
    z = rng.child(0).normal((n, cascade.stages[depth - 1].latent_dim))
    noise_rng = rng.child(1)
    for k in range(depth, 1, -1):
        model = cascade.stages[k - 1]
        if n == 0:
            z = np.zeros((0, model.output_dim))
            continue
        z = model.decode_mean(z)
        if intermediate_noise and model.gamma is not None:
            z = z + math.sqrt(model.gamma) * noise_rng.normal(z.shape)
    return z


def sample_chain(
    cascade: Cascade,
    n: int,
    rng: Rng,
    decode_mode: str = "sample",
    depth: Optional[int] = None,
    intermediate_noise: bool = False,
    temperature: float = 1.0,
    max_len: Optional[int] = None,
) -> Union[np.ndarray, List[str]]:
    """沿级联向下解码 n 个样本

    中间阶段取高斯解码均值（intermediate_noise 为真时再加 √γ·ε）；
    第 1 阶段对向量数据输出解码均值，对序列数据做自回归采样
    （decode_mode 为 sample 时温度 temperature，argmax 时取最大）。

    Returns:
        向量数据为 [n × data_dim] 数组，序列数据为 n 个字符串
    """
    if n < 0:
        raise CascadeError(None, f"sample count must be >= 0, got {n}")
    z = chain_latents(cascade, n, rng, depth, intermediate_noise)
    first = cascade.stages[0]
    if isinstance(first, SeqVaeModel):
        if n == 0:
            return []
        return sample_sequences(first, z, rng.child(2), mode=decode_mode,
                                max_len=max_len, temperature=temperature)
    if n == 0:
        return np.zeros((0, first.output_dim))
    return first.decode_mean(z)


def latent_shift_report(cascade: Cascade, n: int, rng: Rng, depth: int = 2) -> List[float]:
    """逐坐标比较第 1 阶段先验 N(0, I) 与深层链解码出的潜变量之间的 W1 距离"""
    depth = _check_depth(cascade, depth)
    if depth < 2:
        raise CascadeError(None, "latent shift needs a chain of depth >= 2")
    if n < 1:
        raise CascadeError(None, "latent shift needs at least one sample")
    prior = rng.child(7).normal((n, cascade.stages[0].latent_dim))
    decoded = chain_latents(cascade, n, rng.child(8), depth)
    shifts = [w1_distance(prior[:, j], decoded[:, j]) for j in range(prior.shape[1])]
    logger.info(f"Latent shift at depth {depth}: mean W1 {float(np.mean(shifts)):.4f} over {len(shifts)} coordinates")
    return shifts
