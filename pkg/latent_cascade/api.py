"""
latent_cascade 公共入口

集中导出日志对象。各模块统一通过 `from .api import logger` 记录日志，
不要在模块内各自 getLogger。
"""

import logging
import sys

logger = logging.getLogger("latent_cascade")

_LOG_FORMAT = "[%(asctime)s] [%(levelname)s] [%(name)s] %(message)s"
_HANDLER_FLAG = "_latent_cascade_handler"


def setup_logging(level: int = logging.INFO) -> None:
    """安装命令行使用的日志输出

    多次调用只会调整级别，不会重复添加 handler。

    Args:
        level: 日志级别，--verbose 时为 DEBUG
    """
    if not any(getattr(h, _HANDLER_FLAG, False) for h in logger.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        setattr(handler, _HANDLER_FLAG, True)
        logger.addHandler(handler)
    logger.setLevel(level)
