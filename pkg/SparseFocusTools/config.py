import os
from copy import deepcopy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .basic_io import ReadJsonFile
from .exceptions import ConfigError
from .model import ModelConfig
from .training import TrainConfig

try:
    from ujson import loads as json_loads
except ImportError:
    from json import loads as json_loads

__all__ = [
    "CONFIG_SECTIONS",
    "SEED_ENV_VAR",
    "RunConfig",
    "LoadConfigFile",
    "ApplyOverrides",
    "ResolveSeed",
    "BuildModelConfig",
    "BuildTrainConfig",
    "ConfigToDict",
]

CONFIG_SECTIONS = ("extractor", "sft", "decoder", "train")
SEED_ENV_VAR = "SFT_SEED"


@dataclass
class RunConfig:
    """一次命令行运行的完整配置，写入 run.json"""

    command: str
    seed: int
    config_path: Optional[str] = None
    overrides: List[str] = field(default_factory=list)
    paths: Dict[str, str] = field(default_factory=dict)
    resolved: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "seed": self.seed,
            "config_path": self.config_path,
            "overrides": list(self.overrides),
            "paths": dict(self.paths),
            "resolved": self.resolved,
        }


def LoadConfigFile(path: Optional[Union[str, Path]]) -> Dict[str, Dict[str, Any]]:
    """读取 JSON 配置文件，未指定路径时返回空配置

    Args:
        path (Optional[Union[str, Path]]): 配置文件路径

    Raises:
        ConfigError: 存在未知配置段或配置段不是对象时抛出此错误

    Returns:
        Dict[str, Dict[str, Any]]: 以配置段名为键的字典
    """
    data = {section: {} for section in CONFIG_SECTIONS}
    if path is None:
        return data
    loaded = ReadJsonFile(path)
    if not isinstance(loaded, dict):
        raise ConfigError(f"配置文件 {path} 的顶层应为 JSON 对象")
    for section, values in loaded.items():
        if section not in CONFIG_SECTIONS:
            raise ConfigError(f"配置文件 {path} 中存在未知配置段 {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"配置文件 {path} 中的 {section} 段应为 JSON 对象")
        data[section] = dict(values)
    return data


def _ParseOverride(text: str) -> Tuple[str, str, Any]:
    key, sep, raw = text.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not name:
        raise ConfigError(f"无法解析配置覆盖项 {text!r}，应为 section.key=value")
    if section not in CONFIG_SECTIONS:
        raise ConfigError(f"配置覆盖项 {text!r} 中的配置段 {section!r} 不存在")
    try:
        value = json_loads(raw)
    except ValueError:
        value = raw
    return section, name, value


def ApplyOverrides(
    data: Mapping[str, Dict[str, Any]], overrides: Sequence[str]
) -> Dict[str, Dict[str, Any]]:
    """应用 section.key=value 形式的覆盖项，value 按 JSON 解析，失败时作为字符串

    Args:
        data (Mapping[str, Dict[str, Any]]): 原配置
        overrides (Sequence[str]): 覆盖项

    Returns:
        Dict[str, Dict[str, Any]]: 新配置，原配置不会被修改
    """
    result = deepcopy(dict(data))
    for text in overrides:
        section, name, value = _ParseOverride(text)
        result.setdefault(section, {})[name] = value
    return result


def ResolveSeed(
    flag: Optional[int],
    data: Optional[Mapping[str, Dict[str, Any]]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> int:
    """确定随机种子，优先级为命令行参数、环境变量 SFT_SEED、配置文件 train.seed，默认为 0"""
    if flag is not None:
        return flag
    environ = os.environ if environ is None else environ
    env_value = environ.get(SEED_ENV_VAR)
    if env_value is not None and env_value.strip():
        try:
            seed = int(env_value)
        except ValueError:
            raise ConfigError(f"环境变量 {SEED_ENV_VAR}={env_value!r} 不是整数") from None
        if seed < 0:
            raise ConfigError(f"环境变量 {SEED_ENV_VAR} 应为非负整数，实际为 {seed}")
        return seed
    if data is not None and "seed" in data.get("train", {}):
        return data["train"]["seed"]
    return 0


def BuildModelConfig(data: Mapping[str, Dict[str, Any]]) -> ModelConfig:
    try:
        return ModelConfig.from_dict({k: data.get(k, {}) for k in ("extractor", "sft", "decoder")})
    except TypeError as e:
        raise ConfigError(f"模型配置无效：{e}") from e


def BuildTrainConfig(data: Mapping[str, Dict[str, Any]], seed: int) -> TrainConfig:
    values = {**data.get("train", {}), "seed": seed}
    try:
        return TrainConfig.from_dict(values)
    except TypeError as e:
        raise ConfigError(f"训练配置无效：{e}") from e


def ConfigToDict(
    model_cfg: ModelConfig, train_cfg: Optional[TrainConfig] = None
) -> Dict[str, Any]:
    result = model_cfg.to_dict()
    if train_cfg is not None:
        result["train"] = train_cfg.to_dict()
    return result
