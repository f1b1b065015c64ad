"""
字符级序列 VAE（GRU 编码器 / 解码器）

词表由 SMILES 的底层符号组成（Cl、Br、方括号原子各算一个符号），
固定特殊符号 PAD=0, BOS=1, EOS=2。
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .api import logger
from .numcore import (
    Rng,
    ShapeError,
    Tensor,
    as_tensor,
    parameter,
    sigmoid,
    stack,
    tanh,
    xavier_uniform,
)
from .smiles import SmilesError, tokenize
from .vae import (
    CategoricalHead,
    ElboTerms,
    GaussianPosterior,
    TrainConfig,
    TrainResult,
    categorical_nll,
    kl_to_standard_normal,
    reparameterize,
    run_training,
    sequence_mask,
)

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
PAD_INDEX, BOS_INDEX, EOS_INDEX = 0, 1, 2
SPECIALS = (PAD, BOS, EOS)

SAMPLE_MODES = ("sample", "argmax")


class SeqVaeError(Exception):
    """序列模型异常"""
    pass


def split_symbols(text: str) -> List[str]:
    """把字符串切成词表符号；无法按 SMILES 分词时退回逐字符"""
    try:
        return [t.lexeme for t in tokenize(text)]
    except SmilesError:
        return list(text)


# =============================================
# 词表
# =============================================

@dataclass
class Vocab:
    tokens: List[str]
    _index: Dict[str, int] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != SPECIALS:
            raise SeqVaeError(f"vocab must start with {SPECIALS}, got {self.tokens[:3]}")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise SeqVaeError("vocab contains duplicate tokens")

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "Vocab":
        symbols = set()
        for text in texts:
            symbols.update(split_symbols(text))
        return cls(list(SPECIALS) + sorted(symbols))

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        if token not in self._index:
            raise SeqVaeError(f"token {token!r} is not in the vocabulary")
        return self._index[token]

    def encode(self, text: str, add_eos: bool = True) -> List[int]:
        ids = [self.index(sym) for sym in split_symbols(text)]
        if add_eos:
            ids.append(EOS_INDEX)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """遇到 EOS 截止，跳过 PAD/BOS"""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_INDEX:
                break
            if i in (PAD_INDEX, BOS_INDEX):
                continue
            out.append(self.tokens[i])
        return "".join(out)

    def pad_batch(self, texts: Sequence[str], max_len: int) -> np.ndarray:
        """编码并右侧补 PAD；超过 max_len 的序列截断并以 EOS 结尾"""
        rows = []
        truncated = 0
        for text in texts:
            ids = self.encode(text)
            if len(ids) > max_len:
                ids = ids[: max_len - 1] + [EOS_INDEX]
                truncated += 1
            rows.append(ids)
        if truncated:
            logger.warning(f"{truncated} sequences longer than max_len={max_len} were truncated")
        width = max((len(r) for r in rows), default=1)
        batch = np.full((len(rows), width), PAD_INDEX, dtype=np.int64)
        for i, row in enumerate(rows):
            batch[i, : len(row)] = row
        return batch


# =============================================
# GRU
# =============================================

class GruCell:
    """单层 GRU 单元，行向量约定：x [B×in] @ W [in×H]"""

    def __init__(self, input_dim: int, hidden_dim: int, rng: Rng, name: str = "gru"):
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        self.name = name
        H = self.hidden_dim
        self.w_z = xavier_uniform(rng.child(0), input_dim, H, name=f"{name}.w_z")
        self.u_z = xavier_uniform(rng.child(1), H, H, name=f"{name}.u_z")
        self.b_z = parameter(np.zeros(H), name=f"{name}.b_z")
        self.w_r = xavier_uniform(rng.child(2), input_dim, H, name=f"{name}.w_r")
        self.u_r = xavier_uniform(rng.child(3), H, H, name=f"{name}.u_r")
        self.b_r = parameter(np.zeros(H), name=f"{name}.b_r")
        self.w_h = xavier_uniform(rng.child(4), input_dim, H, name=f"{name}.w_h")
        self.u_h = xavier_uniform(rng.child(5), H, H, name=f"{name}.u_h")
        self.b_h = parameter(np.zeros(H), name=f"{name}.b_h")

    def parameters(self) -> List[Tensor]:
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h, self.b_h]


def gru_step(cell: GruCell, x_t, h_prev) -> Tensor:
    """z=σ(Wz x+Uz h+bz), r=σ(Wr x+Ur h+br), h̃=tanh(Wh x+Uh(r⊙h)+bh), h=(1−z)⊙h̃+z⊙h_prev

    Raises:
        ShapeError: 输入或隐状态维度不符
    """
    x_t, h_prev = as_tensor(x_t), as_tensor(h_prev)
    single = x_t.ndim == 1
    if single:
        x_t = x_t.reshape(1, x_t.shape[0])
        h_prev = h_prev.reshape(1, h_prev.shape[0])
    if x_t.shape[-1] != cell.input_dim or h_prev.shape[-1] != cell.hidden_dim:
        raise ShapeError(
            f"{cell.name} expects input dim {cell.input_dim} and hidden dim {cell.hidden_dim}, "
            f"got {x_t.shape} and {h_prev.shape}"
        )
    if x_t.shape[0] != h_prev.shape[0]:
        raise ShapeError(f"{cell.name} batch sizes differ: {x_t.shape[0]} vs {h_prev.shape[0]}")
    z = sigmoid(x_t @ cell.w_z + h_prev @ cell.u_z + cell.b_z)
    r = sigmoid(x_t @ cell.w_r + h_prev @ cell.u_r + cell.b_r)
    candidate = tanh(x_t @ cell.w_h + (r * h_prev) @ cell.u_h + cell.b_h)
    h = (1.0 - z) * candidate + z * h_prev
    if single:
        h = h.reshape(cell.hidden_dim)
    return h


# =============================================
# 模型
# =============================================

class SeqVaeModel:
    """GRU 编码器 + 以 z 仿射初始化隐状态的 GRU 解码器"""

    kind = "seqvae"

    def __init__(
        self,
        vocab: Vocab,
        latent_dim: int = 16,
        hidden_size: int = 64,
        embed_dim: int = 32,
        decoder_layers: int = 1,
        max_len: int = 64,
        rng: Optional[Rng] = None,
    ):
        if decoder_layers < 1:
            raise SeqVaeError(f"decoder_layers must be >= 1, got {decoder_layers}")
        rng = rng or Rng(0)
        self.vocab = vocab
        self.latent_dim = int(latent_dim)
        self.hidden_size = int(hidden_size)
        self.embed_dim = int(embed_dim)
        self.decoder_layers = int(decoder_layers)
        self.max_len = int(max_len)
        V, E, H, L = len(vocab), self.embed_dim, self.hidden_size, self.latent_dim

        self.embedding = parameter(rng.child(0).normal((V, E)) * 0.1, name="embedding")
        self.encoder = GruCell(E, H, rng.child(1), name="encoder")
        self.to_latent_w = xavier_uniform(rng.child(2), H, 2 * L, name="to_latent.W")
        self.to_latent_b = parameter(np.zeros(2 * L), name="to_latent.b")
        self.decoder_cells: List[GruCell] = []
        self.init_w: List[Tensor] = []
        self.init_b: List[Tensor] = []
        for layer in range(self.decoder_layers):
            in_dim = E if layer == 0 else H
            self.decoder_cells.append(GruCell(in_dim, H, rng.child(10 + layer), name=f"decoder{layer}"))
            self.init_w.append(xavier_uniform(rng.child(100 + layer), L, H, name=f"init{layer}.W"))
            self.init_b.append(parameter(np.zeros(H), name=f"init{layer}.b"))
        self.out_w = xavier_uniform(rng.child(3), H, V, name="out.W")
        self.out_b = parameter(np.zeros(V), name="out.b")
        self.trained = False

    def __repr__(self) -> str:
        return (f"<SeqVaeModel vocab={len(self.vocab)} latent={self.latent_dim} hidden={self.hidden_size} "
                f"decoder_layers={self.decoder_layers} trained={self.trained}>")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def gamma(self) -> None:
        return None

    def parameters(self) -> List[Tensor]:
        params = [self.embedding]
        params += self.encoder.parameters()
        params += [self.to_latent_w, self.to_latent_b]
        for cell, w, b in zip(self.decoder_cells, self.init_w, self.init_b):
            params += cell.parameters()
            params += [w, b]
        params += [self.out_w, self.out_b]
        return params

    def initial_hidden(self, z: Tensor) -> List[Tensor]:
        return [z @ w + b for w, b in zip(self.init_w, self.init_b)]

    def step_logits(self, token_ids: np.ndarray, hidden: List[Tensor]) -> Tuple[Tensor, List[Tensor]]:
        x = self.embedding[np.asarray(token_ids, dtype=np.int64)]
        new_hidden = []
        for cell, h in zip(self.decoder_cells, hidden):
            x = gru_step(cell, x, h)
            new_hidden.append(x)
        return x @ self.out_w + self.out_b, new_hidden


def _check_tokens(model: SeqVaeModel, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.vocab_size):
        raise SeqVaeError(f"token index out of vocabulary range [0, {model.vocab_size})")
    return tokens


def encode_sequence(model: SeqVaeModel, tokens, mask: Optional[np.ndarray] = None) -> GaussianPosterior:
    """GRU 读完整条序列，末隐状态投影为 (mu, logvar)

    mask 为 0 的位置保持上一步隐状态不变；默认把 PAD 位置屏蔽，
    因此右侧补 PAD 的输入与未补齐的输入得到完全相同的后验。

    Raises:
        SeqVaeError: 越界下标或空序列
    """
    tokens = _check_tokens(model, tokens)
    single = tokens.ndim == 1
    tokens = np.atleast_2d(tokens)
    if tokens.shape[1] == 0:
        raise SeqVaeError("cannot encode an empty sequence")
    if mask is None:
        mask = (tokens != PAD_INDEX).astype(np.float64)
    mask = np.asarray(mask, dtype=np.float64).reshape(tokens.shape)

    B = tokens.shape[0]
    h = Tensor._wrap(np.zeros((B, model.hidden_size)))
    for t in range(tokens.shape[1]):
        x = model.embedding[tokens[:, t]]
        h_new = gru_step(model.encoder, x, h)
        m = mask[:, t:t + 1]
        h = h_new * m + h * (1.0 - m)
    out = h @ model.to_latent_w + model.to_latent_b
    L = model.latent_dim
    mu, logvar = out[:, :L], out[:, L:]
    if single:
        mu, logvar = mu.reshape(L), logvar.reshape(L)
    return GaussianPosterior(mu=mu, logvar=logvar)


def decode_sequence_train(model: SeqVaeModel, z, targets) -> CategoricalHead:
    """教师强制解码：第 t 步输入为 target[t−1]（t=0 时为 BOS）

    Raises:
        SeqVaeError: 目标为空或去掉特殊符号后长度为 0
    """
    z = as_tensor(z)
    targets = _check_tokens(model, targets)
    single = targets.ndim == 1
    targets = np.atleast_2d(targets)
    if z.ndim == 1:
        z = z.reshape(1, z.shape[0])
    if targets.shape[1] == 0:
        raise SeqVaeError("target sequence has length 0")
    content = (targets > EOS_INDEX) & (sequence_mask(targets, EOS_INDEX) > 0)
    if not np.all(content.any(axis=1)):
        raise SeqVaeError("target sequence is empty once BOS/EOS/PAD are stripped")
    if z.shape[0] != targets.shape[0]:
        raise ShapeError(f"latent batch {z.shape[0]} does not match target batch {targets.shape[0]}")

    B, T = targets.shape
    inputs = np.concatenate([np.full((B, 1), BOS_INDEX, dtype=np.int64), targets[:, :-1]], axis=1)
    hidden = model.initial_hidden(z)
    steps = []
    for t in range(T):
        logits, hidden = model.step_logits(inputs[:, t], hidden)
        steps.append(logits)
    logits = stack(steps, axis=1)
    if single:
        logits = logits.reshape(T, model.vocab_size)
    return CategoricalHead(logits=logits)


def sample_sequences(
    model: SeqVaeModel,
    z: np.ndarray,
    rng: Rng,
    mode: str = "sample",
    max_len: Optional[int] = None,
    temperature: float = 1.0,
) -> List[str]:
    """自回归生成，直到 EOS 或 max_len；PAD 与 BOS 永远不会被输出"""
    if mode not in SAMPLE_MODES:
        raise SeqVaeError(f"unknown sampling mode '{mode}', expected one of {SAMPLE_MODES}")
    if temperature <= 0:
        raise SeqVaeError(f"temperature must be positive, got {temperature}")
    max_len = int(max_len or model.max_len)
    if max_len < 1:
        raise SeqVaeError(f"max_len must be >= 1, got {max_len}")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n = z.shape[0]
    if n == 0:
        return []

    hidden = model.initial_hidden(Tensor(z))
    current = np.full(n, BOS_INDEX, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    generated = np.full((n, max_len), PAD_INDEX, dtype=np.int64)
    for t in range(max_len):
        logits, hidden = model.step_logits(current, hidden)
        scores = logits.data / temperature
        scores[:, PAD_INDEX] = -np.inf
        scores[:, BOS_INDEX] = -np.inf
        if mode == "argmax":
            choice = scores.argmax(axis=1)
        else:
            shifted = scores - scores.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            choice = rng.categorical(probs)
        choice = np.where(done, PAD_INDEX, choice)
        generated[:, t] = choice
        done |= choice == EOS_INDEX
        current = np.where(done, EOS_INDEX, choice)
        if done.all():
            break
    return [model.vocab.decode(row) for row in generated]


def sample_sequence(model: SeqVaeModel, z, rng: Rng, mode: str = "sample",
                    max_len: Optional[int] = None, temperature: float = 1.0) -> str:
    return sample_sequences(model, np.atleast_2d(z), rng, mode, max_len, temperature)[0]


# =============================================
# 目标函数与训练
# =============================================

def seq_elbo_loss(model: SeqVaeModel, tokens: np.ndarray, rng: Rng, beta: float) -> ElboTerms:
    """tokens 为补齐后的 [B×T]，每行以 EOS 结尾"""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    post = encode_sequence(model, tokens)
    z = reparameterize(post, rng)
    head = decode_sequence_train(model, z, tokens)
    recon = categorical_nll(tokens, head, mask=sequence_mask(tokens, EOS_INDEX))
    kl = kl_to_standard_normal(post)
    return ElboTerms(recon=recon, kl=kl, beta=float(beta))


def teacher_forced_nll(model: SeqVaeModel, tokens: np.ndarray) -> float:
    """以后验均值为 z 的教师强制 NLL（每条序列平均）"""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    post = encode_sequence(model, tokens)
    head = decode_sequence_train(model, post.mu, tokens)
    return categorical_nll(tokens, head, mask=sequence_mask(tokens, EOS_INDEX)).item()


def mean_position_entropy(model: SeqVaeModel, tokens: np.ndarray) -> float:
    """有效位置上解码分布的平均熵（nats）

    解码器越确定，熵越低；这是高斯解码方差 γ→0 在序列模型上的对应量。
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    post = encode_sequence(model, tokens)
    head = decode_sequence_train(model, post.mu, tokens)
    probs = head.probs()
    entropy = -(probs * np.log(np.clip(probs, 1e-300, None))).sum(axis=-1)
    mask = sequence_mask(tokens, EOS_INDEX)
    return float((entropy * mask).sum() / max(mask.sum(), 1.0))


def train_seq_stage(
    model: SeqVaeModel,
    sequences: Sequence[str],
    config: TrainConfig,
    rng: Rng,
    stage_index: Optional[int] = None,
    telemetry_size: int = 64,
) -> TrainResult:
    """在字符串语料上训练序列 VAE，KL 系数按 config.kl_anneal_fraction 线性退火

    每轮结束记录前 telemetry_size 条序列上的平均位置熵。
    """
    if not sequences:
        raise SeqVaeError("cannot train on an empty corpus")
    data = model.vocab.pad_batch(list(sequences), model.max_len)
    lengths = (data != PAD_INDEX).sum(axis=1)
    telemetry = data[: min(telemetry_size, len(data))]
    telemetry = telemetry[:, : int(lengths[: len(telemetry)].max())]

    def loss_fn(batch: np.ndarray, beta: float, noise_rng: Rng) -> ElboTerms:
        width = int(lengths[batch].max())
        return seq_elbo_loss(model, data[batch, :width], noise_rng, beta)

    def on_epoch(epoch: int) -> Dict[str, float]:
        return {"entropy": mean_position_entropy(model, telemetry)}

    logger.info(f"Sequence stage: {len(data)} strings, vocab {model.vocab_size}, max width {data.shape[1]}")
    return run_training(model, len(data), loss_fn, config, rng, stage_index=stage_index, on_epoch=on_epoch)
