"""
单阶段 VAE

包含：
- MLP 编码器 / 解码器（tanh 隐层，Xavier 均匀初始化）
- 高斯解码头（可学习的标量方差 γ，以 log_gamma 参数化并设下限）与多项分布解码头
- 目标函数：recon + beta * KL，其中 recon 为单样本蒙特卡洛负对数似然
- 小批量 Adam 训练循环（序列模型同样复用 run_training）
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .api import logger
from .numcore import (
    AdamState,
    NonFiniteError,
    NumcoreError,
    Rng,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    as_tensor,
    backward,
    clamp_min,
    exp,
    log,
    log_softmax,
    parameter,
    sample_standard_normal,
    tanh,
    xavier_uniform,
)

HEAD_GAUSSIAN = "gaussian"
HEAD_CATEGORICAL = "categorical"
HEAD_KINDS = (HEAD_GAUSSIAN, HEAD_CATEGORICAL)

GAMMA_MIN = 1e-6
LOG_GAMMA_MIN = math.log(GAMMA_MIN)
LOG_2PI = math.log(2.0 * math.pi)


class VaeError(Exception):
    """VAE 相关异常"""
    pass


class TrainingError(VaeError):
    """训练中出现非有限 loss 等不可恢复错误，附带定位信息"""

    def __init__(self, detail: str, stage: Optional[int] = None,
                 epoch: Optional[int] = None, step: Optional[int] = None):
        self.detail = detail
        self.stage = stage
        self.epoch = epoch
        self.step = step
        where = []
        if stage is not None:
            where.append(f"stage {stage}")
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if step is not None:
            where.append(f"step {step}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(f"{prefix}{detail}")


# =============================================
# 分布与目标函数的数据结构
# =============================================

@dataclass
class GaussianPosterior:
    """对角高斯后验 q(z|x)"""
    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise VaeError(f"posterior shapes differ: mu {self.mu.shape}, logvar {self.logvar.shape}")

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[-1]


@dataclass
class GaussianHead:
    """高斯解码头，方差为全局标量 γ = exp(log_gamma)，下限 GAMMA_MIN"""
    mean: Tensor
    log_gamma: Tensor

    @property
    def gamma_tensor(self) -> Tensor:
        return exp(clamp_min(self.log_gamma, LOG_GAMMA_MIN))

    @property
    def gamma(self) -> float:
        return float(np.exp(max(self.log_gamma.item(), LOG_GAMMA_MIN)))


@dataclass
class CategoricalHead:
    """每个位置一组 logits，最后一维为词表"""
    logits: Tensor

    def probs(self) -> np.ndarray:
        shifted = self.logits.data - self.logits.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ElboTerms:
    """loss = recon + beta * kl，最小化 loss 即最大化加权下界"""
    recon: Tensor
    kl: Tensor
    beta: float

    @property
    def loss(self) -> Tensor:
        if self.beta == 0.0:
            return self.recon
        return self.recon + self.kl * self.beta

    def as_dict(self) -> Dict[str, float]:
        return {
            "loss": self.loss.item(),
            "recon": self.recon.item(),
            "kl": self.kl.item(),
            "beta": float(self.beta),
        }


# =============================================
# 网络
# =============================================

class Mlp:
    """全连接网络，隐层 tanh，输出层线性"""

    def __init__(self, sizes: Sequence[int], rng: Rng, name: str = "mlp"):
        if len(sizes) < 2:
            raise VaeError(f"an MLP needs at least input and output sizes, got {list(sizes)}")
        self.sizes = [int(s) for s in sizes]
        self.name = name
        self.weights: List[Tensor] = []
        self.biases: List[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.weights.append(xavier_uniform(rng, fan_in, fan_out, name=f"{name}.W{i}"))
            self.biases.append(parameter(np.zeros(fan_out), name=f"{name}.b{i}"))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = tanh(h)
        return h

    def parameters(self) -> List[Tensor]:
        params: List[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params


class VaeModel:
    """向量数据上的 VAE

    编码器输出 2 × latent_dim（mu ‖ logvar），解码器输入 latent_dim。
    head 为 gaussian 时带可学习的 log_gamma；为 categorical 时输入视作
    展平的 one-hot 矩阵 [seq_len × vocab_size]。
    """

    kind = "vae"

    def __init__(
        self,
        input_dim: int,
        latent_dim: int,
        hidden: Sequence[int] = (64, 64),
        head: str = HEAD_GAUSSIAN,
        rng: Optional[Rng] = None,
        vocab_size: Optional[int] = None,
        init_log_gamma: float = 0.0,
    ):
        if head not in HEAD_KINDS:
            raise VaeError(f"unknown head kind '{head}', expected one of {HEAD_KINDS}")
        if input_dim < 1 or latent_dim < 1:
            raise VaeError(f"dimensions must be positive, got input {input_dim}, latent {latent_dim}")
        if head == HEAD_CATEGORICAL:
            if not vocab_size or input_dim % vocab_size != 0:
                raise VaeError(f"categorical head needs vocab_size dividing input_dim {input_dim}")
        rng = rng or Rng(0)
        self.input_dim = int(input_dim)
        self.latent_dim = int(latent_dim)
        self.hidden = [int(h) for h in hidden]
        self.head = head
        self.vocab_size = vocab_size
        self.encoder = Mlp([self.input_dim, *self.hidden, 2 * self.latent_dim], rng.child(0), name="encoder")
        self.decoder = Mlp([self.latent_dim, *reversed(self.hidden), self.input_dim], rng.child(1), name="decoder")
        self.log_gamma: Optional[Tensor] = None
        if head == HEAD_GAUSSIAN:
            self.log_gamma = parameter(np.array(float(init_log_gamma)), name="log_gamma")
        self.trained = False

    def __repr__(self) -> str:
        return (f"<VaeModel {self.input_dim}->{self.latent_dim} hidden={self.hidden} "
                f"head={self.head} trained={self.trained}>")

    @property
    def output_dim(self) -> int:
        return self.input_dim

    @property
    def gamma(self) -> Optional[float]:
        if self.log_gamma is None:
            return None
        return float(np.exp(max(self.log_gamma.item(), LOG_GAMMA_MIN)))

    def parameters(self) -> List[Tensor]:
        params = self.encoder.parameters() + self.decoder.parameters()
        if self.log_gamma is not None:
            params.append(self.log_gamma)
        return params

    def decoder_head(self, z: Tensor) -> Union[GaussianHead, CategoricalHead]:
        out = self.decoder(z)
        if self.head == HEAD_GAUSSIAN:
            return GaussianHead(mean=out, log_gamma=self.log_gamma)
        seq_len = self.input_dim // self.vocab_size
        return CategoricalHead(logits=out.reshape(out.shape[0], seq_len, self.vocab_size))

    def decode_mean(self, z: np.ndarray) -> np.ndarray:
        """推理用：z -> 解码器均值（categorical 头返回概率）"""
        head = self.decoder_head(Tensor(np.atleast_2d(z)))
        if isinstance(head, GaussianHead):
            return head.mean.data
        return head.probs().reshape(head.logits.shape[0], -1)


# =============================================
# 运算
# =============================================

def encode(model: VaeModel, x: Union[Tensor, np.ndarray]) -> GaussianPosterior:
    """确定性前向，得到 (mu, logvar)

    一维输入返回一维后验，二维输入按行返回。

    Raises:
        ShapeError: 输入维度与模型不符
    """
    x = as_tensor(x)
    if x.shape[-1] != model.input_dim:
        raise ShapeError(f"encoder expects input dim {model.input_dim}, got shape {x.shape}")
    single = x.ndim == 1
    if single:
        x = x.reshape(1, model.input_dim)
    h = model.encoder(x)
    d = model.latent_dim
    mu, logvar = h[:, :d], h[:, d:]
    if single:
        mu, logvar = mu.reshape(d), logvar.reshape(d)
    return GaussianPosterior(mu=mu, logvar=logvar)


def reparameterize(post: GaussianPosterior, rng: Rng) -> Tensor:
    """z = mu + exp(0.5·logvar) ⊙ ε，ε ~ N(0, I)"""
    eps = sample_standard_normal(rng, post.mu.shape)
    return post.mu + exp(post.logvar * 0.5) * eps


def _batch_count(t: Tensor, event_ndim: int) -> int:
    if t.ndim <= event_ndim:
        return 1
    return int(np.prod(t.shape[: t.ndim - event_ndim]))


def kl_to_standard_normal(post: GaussianPosterior) -> Tensor:
    """KL(q || N(0, I)) 闭式解：½ Σ (mu² + exp(logvar) − 1 − logvar)

    批量输入时返回每行 KL 的平均值。
    """
    for name, t in (("mu", post.mu), ("logvar", post.logvar)):
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError("kl_to_standard_normal", f"{name} is not finite")
    mu, logvar = post.mu, post.logvar
    terms = mu * mu + exp(logvar) - 1.0 - logvar
    return terms.sum() * (0.5 / _batch_count(mu, 1))


def gaussian_nll(x: Union[Tensor, np.ndarray], mean: Tensor, gamma: Union[Tensor, float]) -> Tensor:
    """Σᵢ ½[(xᵢ − meanᵢ)²/γ + ln γ + ln 2π]，批量时取每行之和的平均

    Raises:
        VaeError: γ ≤ 0 或形状不一致
    """
    x = as_tensor(x)
    if x.shape != mean.shape:
        raise VaeError(f"gaussian_nll shape mismatch: x {x.shape}, mean {mean.shape}")
    if isinstance(gamma, Tensor):
        if np.any(gamma.data <= 0):
            raise VaeError(f"decoder variance must be positive, got {gamma.data}")
        log_gamma = log(gamma)
    else:
        if gamma <= 0:
            raise VaeError(f"decoder variance must be positive, got {gamma}")
        log_gamma = math.log(gamma)
    diff = x - mean
    per_elem = (diff * diff / gamma + log_gamma + LOG_2PI) * 0.5
    return per_elem.sum() * (1.0 / _batch_count(x, 1))


def sequence_mask(targets: np.ndarray, eos_index: int) -> np.ndarray:
    """保留到第一个 EOS（含）为止的位置，其后全部屏蔽"""
    targets = np.atleast_2d(targets)
    is_eos = targets == eos_index
    seen_before = np.cumsum(is_eos, axis=-1) - is_eos
    return (seen_before == 0).astype(np.float64)


def categorical_nll(targets: np.ndarray, head: CategoricalHead,
                    mask: Optional[np.ndarray] = None) -> Tensor:
    """Σ_t −log softmax(logits_t)[target_t]，mask 为 0 的位置不计入

    logits 形状 [T × V] 或 [B × T × V]；批量时取每条序列之和的平均。

    Raises:
        VaeError: 目标下标越界或形状不一致
    """
    logits = head.logits
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise VaeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise VaeError(f"target index out of range for vocab size {vocab}")
    logp = log_softmax(logits, axis=-1)
    index = tuple(np.indices(targets.shape)) + (targets,)
    picked = logp[index]
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != targets.shape:
            raise VaeError(f"mask shape {mask.shape} does not match targets {targets.shape}")
        picked = picked * mask
    return -picked.sum() * (1.0 / _batch_count(logits, 2))


def elbo_loss(model: VaeModel, x: Union[Tensor, np.ndarray], rng: Rng, beta: float) -> ElboTerms:
    """目标函数的单样本估计：recon + beta · KL"""
    x = as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, x.shape[0])
    post = encode(model, x)
    z = reparameterize(post, rng)
    head = model.decoder_head(z)
    if isinstance(head, GaussianHead):
        recon = gaussian_nll(x, head.mean, head.gamma_tensor)
    else:
        seq_len = model.input_dim // model.vocab_size
        targets = x.data.reshape(x.shape[0], seq_len, model.vocab_size).argmax(axis=-1)
        recon = categorical_nll(targets, head)
    kl = kl_to_standard_normal(post)
    return ElboTerms(recon=recon, kl=kl, beta=float(beta))


# =============================================
# 训练
# =============================================

@dataclass
class TrainConfig:
    """单阶段训练参数；优化器默认值与 numcore.AdamState 一致"""
    epochs: int = 50
    batch_size: int = 100
    lr: float = 1e-3
    beta: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kl_anneal_fraction: float = 0.0
    log_every: int = 10

    def beta_at(self, step: int, total_steps: int) -> float:
        """KL 系数线性退火：前 kl_anneal_fraction 的步数从 0 升到 beta"""
        if self.kl_anneal_fraction <= 0 or total_steps <= 0:
            return self.beta
        ramp = max(1, int(round(self.kl_anneal_fraction * total_steps)))
        return self.beta * min(1.0, step / ramp)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    recon: float
    kl: float
    beta: float
    gamma: Optional[float] = None
    entropy: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch, "loss": self.loss, "recon": self.recon, "kl": self.kl,
            "beta": self.beta, "gamma": self.gamma, "entropy": self.entropy,
        }


@dataclass
class TrainResult:
    model: object
    history: List[EpochRecord] = field(default_factory=list)

    @property
    def loss_trace(self) -> List[float]:
        return [r.loss for r in self.history]

    @property
    def gamma(self) -> Optional[float]:
        return getattr(self.model, "gamma", None)


LossFn = Callable[[np.ndarray, float, Rng], ElboTerms]


def run_training(
    model,
    n_items: int,
    loss_fn: LossFn,
    config: TrainConfig,
    rng: Rng,
    stage_index: Optional[int] = None,
    on_epoch: Optional[Callable[[int], Dict[str, float]]] = None,
    on_epoch_start: Optional[Callable[[int], None]] = None,
) -> TrainResult:
    """通用小批量 Adam 训练循环

    Args:
        model: 带 parameters() 的模型
        n_items: 数据集大小
        loss_fn: (批下标, 当前 beta, 噪声流) -> ElboTerms
        config: 训练参数
        rng: 运行种子对应的随机流（打乱顺序与重参数化噪声各用一个子流）
        stage_index: 级联中的阶段序号，用于日志与错误信息
        on_epoch: 每轮结束后的附加遥测，返回值并入 EpochRecord
        on_epoch_start: 每轮开始前的回调（例如重新采样潜变量）

    Returns:
        TrainResult: 每轮平均 loss 等记录

    Raises:
        TrainingError: loss 或梯度出现非有限值
    """
    result = TrainResult(model=model)
    if config.epochs <= 0:
        return result
    if n_items <= 0:
        raise TrainingError("dataset is empty", stage=stage_index)

    params = model.parameters()
    state = AdamState.for_params(params, lr=config.lr, beta1=config.beta1,
                                 beta2=config.beta2, eps=config.eps)
    shuffle_rng = rng.child(0)
    noise_rng = rng.child(1)
    batch_size = max(1, min(config.batch_size, n_items))
    steps_per_epoch = (n_items + batch_size - 1) // batch_size
    total_steps = steps_per_epoch * config.epochs
    label = f"stage {stage_index}" if stage_index is not None else "model"
    logger.info(f"Training {label}: {n_items} items, {config.epochs} epochs, batch {batch_size}, lr {config.lr}")

    step = 0
    for epoch in range(1, config.epochs + 1):
        if on_epoch_start is not None:
            on_epoch_start(epoch)
        order = shuffle_rng.permutation(n_items)
        sums = {"loss": 0.0, "recon": 0.0, "kl": 0.0}
        beta_now = config.beta
        for start in range(0, n_items, batch_size):
            batch = order[start:start + batch_size]
            beta_now = config.beta_at(step, total_steps)
            try:
                with Tape() as tape:
                    terms = loss_fn(batch, beta_now, noise_rng)
                    loss = terms.loss
                grads = backward(tape, loss, params)
                adam_step(state, params, grads.for_params(params))
            except NonFiniteError as e:
                logger.error(f"Non-finite value while training {label} at epoch {epoch}, step {step}: {e}")
                raise TrainingError(f"non-finite loss or gradient ({e})", stage=stage_index, epoch=epoch, step=step)
            except NumcoreError as e:
                raise TrainingError(str(e), stage=stage_index, epoch=epoch, step=step)
            values = terms.as_dict()
            weight = len(batch)
            for key in sums:
                sums[key] += values[key] * weight
            step += 1

        record = EpochRecord(
            epoch=epoch,
            loss=sums["loss"] / n_items,
            recon=sums["recon"] / n_items,
            kl=sums["kl"] / n_items,
            beta=beta_now,
            gamma=getattr(model, "gamma", None),
        )
        if on_epoch is not None:
            extra = on_epoch(epoch) or {}
            record.entropy = extra.get("entropy")
        result.history.append(record)

        message = f"{label} epoch {epoch}/{config.epochs}: loss={record.loss:.5f} kl={record.kl:.5f}"
        if record.gamma is not None:
            message += f" gamma={record.gamma:.3e}"
        if record.entropy is not None:
            message += f" entropy={record.entropy:.4f}"
        if config.log_every > 0 and (epoch % config.log_every == 0 or epoch == config.epochs):
            logger.info(message)
        else:
            logger.debug(message)

    model.trained = True
    return result


def train_stage(
    model: VaeModel,
    dataset: np.ndarray,
    config: TrainConfig,
    rng: Rng,
    stage_index: Optional[int] = None,
    dataset_fn: Optional[Callable[[int], np.ndarray]] = None,
) -> TrainResult:
    """在向量数据上训练一个 VAE 阶段

    Args:
        model: 待训练模型（原地更新）
        dataset: [n × input_dim] 数据
        config: 训练参数
        rng: 运行随机流
        stage_index: 级联阶段序号
        dataset_fn: 可选，按轮次返回新的数据矩阵（每轮重新采样潜变量时使用）

    Returns:
        TrainResult: 含每轮 loss 与最终 γ
    """
    data = {"current": np.asarray(dataset, dtype=np.float64)}
    if data["current"].ndim != 2 or data["current"].shape[1] != model.input_dim:
        raise VaeError(f"dataset shape {data['current'].shape} does not match model input dim {model.input_dim}")

    def on_epoch_start(epoch: int) -> None:
        if dataset_fn is not None:
            data["current"] = np.asarray(dataset_fn(epoch), dtype=np.float64)

    def loss_fn(batch: np.ndarray, beta: float, noise_rng: Rng) -> ElboTerms:
        return elbo_loss(model, Tensor._wrap(data["current"][batch]), noise_rng, beta)

    result = run_training(model, len(data["current"]), loss_fn, config, rng,
                          stage_index=stage_index, on_epoch_start=on_epoch_start)
    if model.gamma is not None and config.epochs > 0:
        logger.info(f"Stage {stage_index or 1} finished with decoder variance gamma={model.gamma:.3e}")
    return result
