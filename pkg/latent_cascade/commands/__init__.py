from .sphere import SphereCommand
from .train import TrainCommand
from .sample import SampleCommand
from .eval import EvalCommand

__all__ = [
    # 实验与训练
    "SphereCommand",
    "TrainCommand",
    # 采样与评估
    "SampleCommand",
    "EvalCommand",
]
