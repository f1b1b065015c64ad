"""
命令行入口

LatentCascadeApp 负责：
- 读取 YAML 配置，与默认配置深度合并，再用命令行参数覆盖
- 注册 sphere / train / sample / eval 四个子命令，并由各命令的 parameters 生成 argparse 选项
- 把命令结果映射为退出码（0 成功，2 配置错误，3 运行错误）
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

import yaml

from . import __version__
from .api import logger, setup_logging
from .commands import EvalCommand, SampleCommand, SphereCommand, TrainCommand
from .commands.base import EXIT_CONFIG_ERROR, EXIT_RUNTIME_ERROR, Command, CommandResult
from .config_validator import (
    EXPERIMENT_SMILES,
    EXPERIMENT_SPHERE,
    EXPERIMENTS,
    ConfigValidationError,
    RunConfig,
    build_run_config,
)
from .utils import deep_merge, set_nested

_TRAINING = {
    "adam_betas": [0.9, 0.999],
    "adam_eps": 1e-8,
    "log_every": 10,
    "resample_latents": False,
}

_METRICS = {"k": 1000, "eps": 0.05, "bins": 40}

_SPHERE_STAGE = {
    "latent_dim": 3,
    "hidden": [64, 64],
    "epochs": 60,
    "beta": 1.0,
    "head": "gaussian",
    "lr": 2e-3,
    "batch_size": 100,
}

_SPHERE_LATENT_STAGE = dict(
    _SPHERE_STAGE,
    hidden=[128, 128],
    epochs=100,
    init_log_gamma=-3.0,
    kl_anneal_fraction=0.3,
)

DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    EXPERIMENT_SPHERE: {
        "experiment": EXPERIMENT_SPHERE,
        "seeds": [0],
        "output_dir": "runs/sphere",
        "sphere": {"sphere_dim": 2, "ambient_dim": 17, "n_points": 10000},
        "stages": [dict(_SPHERE_STAGE), dict(_SPHERE_LATENT_STAGE), dict(_SPHERE_LATENT_STAGE)],
        "training": dict(_TRAINING),
        "sampling": {
            "n": 1000,
            "decode_mode": "sample",
            "temperature": 1.0,
            "max_len": None,
            "intermediate_noise": False,
            "depth": None,
        },
        "metrics": dict(_METRICS),
    },
    EXPERIMENT_SMILES: {
        "experiment": EXPERIMENT_SMILES,
        "seeds": [0],
        "output_dir": "runs/smiles",
        "corpus": {"train": None, "reference": None, "test_fraction": 0.1, "split_seed": 0},
        "stages": [
            {
                "latent_dim": 16,
                "head": "categorical",
                "epochs": 40,
                "beta": 0.1,
                "lr": 3e-3,
                "batch_size": 32,
                "embed_dim": 32,
                "hidden_size": 64,
                "decoder_layers": 1,
                "max_len": 64,
                "kl_anneal_fraction": 0.2,
            },
            {
                "latent_dim": 16,
                "hidden": [64, 64],
                "epochs": 80,
                "beta": 1.0,
                "head": "gaussian",
                "lr": 2e-3,
                "batch_size": 64,
            },
        ],
        "training": dict(_TRAINING),
        "sampling": {
            "n": 500,
            "decode_mode": "sample",
            "temperature": 1.0,
            "max_len": 64,
            "intermediate_noise": False,
            "depth": None,
        },
        "metrics": dict(_METRICS),
    },
}


class LatentCascadeApp:

    def __init__(self):
        self.commands: Dict[str, Command] = {}
        self._manage_command(SphereCommand(self))
        self._manage_command(TrainCommand(self))
        self._manage_command(SampleCommand(self))
        self._manage_command(EvalCommand(self))

    def _manage_command(self, command: Command) -> None:
        if command.name in self.commands:
            logger.warning(f"Command {command.name} registered twice, keeping the latest")
        self.commands[command.name] = command

    # =============================================
    # 配置
    # =============================================

    def read_config_file(self, path: Optional[str]) -> Dict[str, Any]:
        if not path:
            return {}
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except FileNotFoundError as e:
            raise ConfigValidationError(f"config file not found: {path}") from e
        except yaml.YAMLError as e:
            raise ConfigValidationError(f"config file {path} is not valid YAML: {e}") from e
        if not isinstance(data, dict):
            raise ConfigValidationError(f"config file {path} must contain a mapping at the top level")
        return data

    def load_config(self, path: Optional[str] = None, experiment: Optional[str] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """读取配置文件并与默认配置合并

        Args:
            path: YAML 配置路径，可为空
            experiment: 命令要求的实验类型；与文件中的 experiment 冲突时报错
            overrides: 命令行覆盖项，键为点分路径（如 "sampling.n"），值为 None 的忽略

        Raises:
            ConfigValidationError: 文件不可读或实验类型不符
        """
        file_config = self.read_config_file(path)
        declared = file_config.get("experiment")
        if experiment and declared and declared != experiment:
            raise ConfigValidationError(f"config declares experiment '{declared}' but command needs '{experiment}'")
        kind = experiment or declared or EXPERIMENT_SMILES
        if kind not in EXPERIMENTS:
            raise ConfigValidationError(f"experiment must be one of {EXPERIMENTS}, got {kind!r}")
        config = deep_merge(DEFAULT_CONFIG[kind], file_config)
        config["experiment"] = kind
        for dotted, value in (overrides or {}).items():
            if value is not None:
                set_nested(config, dotted, value)
        return config

    def run_config(self, path: Optional[str] = None, experiment: Optional[str] = None,
                   overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        return build_run_config(self.load_config(path, experiment, overrides))

    # =============================================
    # 命令行
    # =============================================

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog="latent_cascade",
            description="Multi-stage VAE experiments: sphere manifold recovery and SMILES distribution learning.",
        )
        parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
        sub = parser.add_subparsers(dest="command", required=True)
        for command in self.commands.values():
            p = sub.add_parser(command.name, help=command.description, description=command.description)
            _add_schema_arguments(p, command.parameters)
            p.add_argument("--verbose", "-v", action="store_true", help="输出 DEBUG 级别日志")
        return parser

    def run_command(self, name: str, **kwargs) -> CommandResult:
        command = self.commands.get(name)
        if command is None:
            return CommandResult(EXIT_CONFIG_ERROR, f"unknown command '{name}'")
        return command.call(**kwargs)

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        parser = self.build_parser()
        args = vars(parser.parse_args(argv))
        name = args.pop("command")
        verbose = args.pop("verbose", False)
        setup_logging(logging.DEBUG if verbose else logging.INFO)
        try:
            result = self.run_command(name, **args)
        except Exception as e:
            if verbose:
                raise
            logger.error(f"{name} failed unexpectedly: {e}")
            return EXIT_RUNTIME_ERROR
        stream = sys.stdout if result.ok else sys.stderr
        print(result.message, file=stream)
        return result.exit_code


def _add_schema_arguments(parser: argparse.ArgumentParser, schema: Dict[str, Any]) -> None:
    """按 JSON schema 风格的参数定义生成 argparse 选项"""
    required = set(schema.get("required", []))
    types = {"string": str, "integer": int, "number": float}
    for name, spec in schema.get("properties", {}).items():
        flag = "--" + name.replace("_", "-")
        kwargs: Dict[str, Any] = {"dest": name, "help": spec.get("description")}
        kind = spec.get("type")
        if kind == "boolean":
            kwargs["action"] = "store_true"
        elif kind == "array":
            kwargs["action"] = "append"
            kwargs["type"] = types.get(spec.get("items", {}).get("type"), str)
        else:
            kwargs["type"] = types.get(kind, str)
            if "enum" in spec:
                kwargs["choices"] = spec["enum"]
        if name in required:
            kwargs["required"] = True
        parser.add_argument(flag, **kwargs)


def main(argv: Optional[List[str]] = None) -> int:
    return LatentCascadeApp().run(argv)


if __name__ == "__main__":
    sys.exit(main())
