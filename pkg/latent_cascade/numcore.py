"""
数值核心模块

提供训练所需的全部底层能力：
- float64 稠密张量 Tensor，前向运算后强制检查有限值
- 基于 Tape 的反向模式自动微分
- 带偏差修正的 Adam 优化器
- 可复现、可拆分的随机数流 Rng

随机数算法（固定，跨版本保持不变）：
    位生成器为 Philox4x64（计数器式），种子经 numpy SeedSequence 展开，
    子流通过 spawn_key 派生；均匀分布取 Generator.random() 的 53 位双精度，
    标准正态分布由本模块自行做 Box-Muller 变换（不依赖 numpy 的正态采样实现）。
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .api import logger

DTYPE = np.float64

ArrayLike = Union[np.ndarray, float, int, Sequence]


class NumcoreError(Exception):
    """数值核心异常基类"""
    pass


class ShapeError(NumcoreError):
    """形状不匹配"""
    pass


class NonFiniteError(NumcoreError):
    """运算产生 NaN/Inf"""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        message = f"non-finite value produced by op '{op}'"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class DetachedNodeError(NumcoreError):
    """loss 不在当前 tape 上"""
    pass


class NonScalarLossError(NumcoreError):
    """反向传播的起点不是标量"""
    pass


# =============================================
# Tape
# =============================================

_TAPE_STATE = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_TAPE_STATE, "stack", None)
    if stack is None:
        stack = []
        _TAPE_STATE.stack = stack
    return stack


def current_tape() -> Optional["Tape"]:
    """返回当前线程正在记录的 tape（训练模式），没有则为 None"""
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class TapeNode:
    """一次被记录的原语运算"""
    op: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """运算记录带

    以 `with Tape() as tape:` 进入训练模式，期间对可求导张量的运算按执行顺序
    记录，天然满足拓扑序。tape 只属于创建它的线程。
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.gradients: Optional["Gradients"] = None

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)


# =============================================
# Tensor
# =============================================

class Tensor:
    """float64 稠密张量

    Attributes:
        data: 行主序 numpy 数组
        requires_grad: 叶子参数为 True；被 tape 记录的中间结果也为 True
        name: 可选名称，出现在错误信息与 checkpoint 中
    """

    __slots__ = ("data", "requires_grad", "name", "_tape")
    # ndarray 与 Tensor 混合运算时让 numpy 交给 Tensor 的反射运算符处理
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor", "constructor received NaN/Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.name = None
        t._tape = None
        return t

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"<Tensor shape={self.shape}{label} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    # 运算符重载
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    """创建可训练的叶子参数"""
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _emit(op: str, out: np.ndarray, inputs: Tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    """包装前向结果：检查有限值，并在训练模式下记录到 tape"""
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    result = Tensor._wrap(np.asarray(out, dtype=DTYPE))
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._tape = tape
        tape.record(TapeNode(op, inputs, result, backward_fn))
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回输入形状"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# =============================================
# 原语运算
# =============================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _emit(
        "div", out, (a, b),
        lambda g: (g / b.data, -g * a.data / (b.data * b.data)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** p
    return _emit("power", out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def matmul(a, b) -> Tensor:
    """矩阵乘法 [m×k] @ [k×n] -> [m×n]

    Raises:
        ShapeError: 不是二维或内维不一致
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _emit(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _emit("log", out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh 形式数值稳定，不会溢出
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp_min(a, floor: float) -> Tensor:
    """逐元素下限截断，低于下限处梯度为 0"""
    a = as_tensor(a)
    out = np.maximum(a.data, floor)
    return _emit("clamp_min", out, (a,), lambda g: (g * (a.data >= floor),))


def reduce_sum(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), backward_fn)


def reduce_mean(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


def reshape(a, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}: {e}")
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got {a.shape}")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def getitem(a, index) -> Tensor:
    """切片与花式索引；反向时用 np.add.at 累加重复位置"""
    a = as_tensor(a)
    out = np.array(a.data[index], dtype=DTYPE)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", out, (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat of an empty tensor list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}: {e}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", out, tensors, backward_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("stack of an empty tensor list")
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack shape mismatch: {[t.shape for t in tensors]}: {e}")

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit("stack", out, tensors, backward_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward_fn(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (a,), backward_fn)


# =============================================
# 反向传播
# =============================================

class Gradients:
    """一次反向传播的结果，按张量身份索引；不在路径上的张量得到全零梯度"""

    def __init__(self, by_id: Dict[int, np.ndarray]):
        self._by_id = by_id

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._by_id.get(id(tensor))
        if grad is None:
            return np.zeros_like(tensor.data)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._by_id

    def for_params(self, params: Iterable[Tensor]) -> List[np.ndarray]:
        return [self[p] for p in params]


def backward(tape: Tape, loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> Gradients:
    """从标量 loss 出发做反向传播

    Args:
        tape: 记录前向运算的 tape
        loss: 标量节点
        params: 可选；仅用于在日志中报告参数个数

    Returns:
        Gradients: 按张量索引的梯度

    Raises:
        NonScalarLossError: loss 不是标量
        DetachedNodeError: loss 由其他 tape 记录
    """
    if loss.size != 1:
        raise NonScalarLossError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._tape is not None and loss._tape is not tape:
        raise DetachedNodeError("loss was recorded on a different tape")

    grads: Dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)

    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = _unbroadcast(np.asarray(ig, dtype=DTYPE), inp.shape)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig

    result = Gradients(grads)
    tape.gradients = result
    if params is not None:
        logger.debug(f"backward over {len(tape)} nodes for {len(params)} parameters")
    return result


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """中心差分数值梯度，用于梯度校验

    fn 在 tape 之外调用，每次都重新读取 param.data。
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = fn().item()
        flat[i] = original - step
        lower = fn().item()
        flat[i] = original
        grad.reshape(-1)[i] = (upper - lower) / (2.0 * step)
    return grad


# =============================================
# Adam
# =============================================

@dataclass
class AdamState:
    """Adam 优化器状态

    默认超参数 lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8，可由配置覆盖。
    """
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> Sequence[Tensor]:
    """原地执行一步带偏差修正的 Adam 更新

    Raises:
        ShapeError: 参数、梯度、累加器数量或形状不一致
        NonFiniteError: 梯度含 NaN/Inf
    """
    if len(params) != len(grads):
        raise ShapeError(f"adam_step got {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError(f"optimizer tracks {len(state.m)} params, got {len(params)}")

    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != np.shape(g) or p.shape != state.m[i].shape:
            raise ShapeError(
                f"adam_step shape mismatch at param {i} ({p.name}): "
                f"param {p.shape}, grad {np.shape(g)}, moment {state.m[i].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("adam_step", f"gradient of param {i} ({p.name})")

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# =============================================
# 随机数
# =============================================

class Rng:
    """可复现、可拆分的随机流

    相同 (seed, spawn_key) 产生完全相同的序列；child(key) 按键派生互不重叠的子流，
    供并行的消费者各自持有。
    """

    def __init__(self, seed: int, spawn_key: Tuple[int, ...] = ()):
        seed = int(seed)
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = seed
        self.spawn_key = tuple(int(k) for k in spawn_key)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._generator = np.random.Generator(np.random.Philox(sequence))
        self.counter = 0

    def __repr__(self) -> str:
        return f"<Rng seed={self.seed} spawn_key={self.spawn_key} draws={self.counter}>"

    def uniform(self, shape) -> np.ndarray:
        """[0, 1) 均匀分布"""
        shape = _as_shape(shape)
        out = self._generator.random(shape)
        self.counter += int(np.prod(shape, dtype=np.int64))
        return out

    def normal(self, shape) -> np.ndarray:
        """Box-Muller 标准正态"""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # (0, 1]，避免 log(0)
        u2 = self.uniform(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def categorical(self, probs: np.ndarray) -> np.ndarray:
        """按行做逆 CDF 采样，probs 形状 [batch × k]"""
        probs = np.atleast_2d(probs)
        cdf = np.cumsum(probs, axis=1)
        u = self.uniform(probs.shape[0])[:, None] * cdf[:, -1:]
        idx = (u >= cdf).sum(axis=1)
        return np.minimum(idx, probs.shape[1] - 1)

    def child(self, key: int) -> "Rng":
        """按 key 派生确定性子流，与父流已消耗多少无关"""
        return Rng(self.seed, self.spawn_key + (int(key),))


def _as_shape(shape) -> Tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    return shape


def sample_standard_normal(rng: Rng, shape) -> Tensor:
    """由随机流采样 N(0, 1) 张量"""
    return Tensor._wrap(rng.normal(shape))


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int, name: Optional[str] = None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    weights = (2.0 * rng.uniform((fan_in, fan_out)) - 1.0) * limit
    return parameter(weights, name=name)
