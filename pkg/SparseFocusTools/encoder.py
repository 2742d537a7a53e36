from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np

from .assert_funcs import AssertPositiveInt, AssertSameShape, AssertShape, AssertVariant
from .attention import AxialVariant, SparseFocusAttention
from .basic_io import ReadJsonFile, ReadTensorFile, WriteJsonFile, WriteTensorFile
from .exceptions import ConfigError
from .tensor import Concat, PointwiseConv, Tensor

__all__ = [
    "SftConfig",
    "SftLayerParams",
    "BitemporalFeatures",
    "InitSftLayerParams",
    "SftLayer",
    "Encode",
    "SaveSftParams",
    "LoadSftParams",
]


@dataclass(frozen=True)
class SftConfig:
    """稀疏聚焦编码器配置

    C_reduced 为 0 时取 C // 8（至少为 1）
    """

    C: int = 64
    C_reduced: int = 0
    W: int = 8
    H: int = 8
    R: int = 1
    variant: AxialVariant = field(default_factory=AxialVariant.full)
    scale_qk: bool = False

    def __post_init__(self) -> None:
        if self.C_reduced == 0 and isinstance(self.C, int):
            object.__setattr__(self, "C_reduced", max(1, self.C // 8))
        for name in ("C", "C_reduced", "W", "H", "R"):
            AssertPositiveInt(getattr(self, name), name)
        if self.C_reduced > self.C:
            raise ConfigError(f"C_reduced={self.C_reduced} 不能大于 C={self.C}")
        AssertVariant(self.variant, self.W, self.H)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SftConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"sft 配置中存在未知配置项 {sorted(unknown)}")
        data = dict(data)
        variant = data.get("variant", "full")
        if isinstance(variant, str):
            data["variant"] = AxialVariant.from_string(variant)
        elif isinstance(variant, dict):
            data["variant"] = AxialVariant.from_dict(variant)
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "C": self.C,
            "C_reduced": self.C_reduced,
            "W": self.W,
            "H": self.H,
            "R": self.R,
            "variant": str(self.variant),
            "scale_qk": self.scale_qk,
        }


@dataclass(frozen=True)
class SftLayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor

    def tensors(self) -> Dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class BitemporalFeatures:
    f1: Tensor
    f2: Tensor


def _Uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)))


def InitSftLayerParams(cfg: SftConfig, rng: np.random.Generator) -> SftLayerParams:
    """按 uniform(±1/√fan_in) 初始化一层投影参数

    Args:
        cfg (SftConfig): 编码器配置
        rng (np.random.Generator): 随机数生成器

    Returns:
        SftLayerParams: 层参数
    """
    C, reduced = cfg.C, cfg.C_reduced
    return SftLayerParams(
        wq=_Uniform(rng, (reduced, C), C),
        bq=_Uniform(rng, (reduced,), C),
        wk=_Uniform(rng, (reduced, C), C),
        bk=_Uniform(rng, (reduced,), C),
        wv=_Uniform(rng, (C, C), C),
        bv=_Uniform(rng, (C,), C),
    )


def _CheckLayerParams(params: SftLayerParams, cfg: SftConfig) -> None:
    C, reduced = cfg.C, cfg.C_reduced
    AssertShape(params.wq.shape, (reduced, C), "wq")
    AssertShape(params.bq.shape, (reduced,), "bq")
    AssertShape(params.wk.shape, (reduced, C), "wk")
    AssertShape(params.bk.shape, (reduced,), "bk")
    AssertShape(params.wv.shape, (C, C), "wv")
    AssertShape(params.bv.shape, (C,), "bv")


def SftLayer(
    f: Tensor, params: SftLayerParams, cfg: SftConfig, disable_check: bool = False
) -> Tensor:
    """单层稀疏聚焦注意力：1×1 卷积得到 Q、K、V，再做轴向注意力与残差

    Args:
        f (Tensor): C×W×H 特征图
        params (SftLayerParams): 层参数
        cfg (SftConfig): 编码器配置
        disable_check (bool, optional): 禁用参数有效性检查. Defaults to False.

    Returns:
        Tensor: C×W×H 特征图
    """
    if not disable_check:
        AssertShape(f.shape, (cfg.C, cfg.W, cfg.H), "特征图")
        _CheckLayerParams(params, cfg)
    q = PointwiseConv(f, params.wq, params.bq)
    k = PointwiseConv(f, params.wk, params.bk)
    v = PointwiseConv(f, params.wv, params.bv)
    return SparseFocusAttention(
        q, k, v, f, cfg.variant, scale_qk=cfg.scale_qk, disable_check=True
    )


def _EncodeOne(f: Tensor, layers: Sequence[SftLayerParams], cfg: SftConfig) -> Tensor:
    for params in layers:
        f = SftLayer(f, params, cfg, disable_check=True)
    return f


def Encode(
    bt: BitemporalFeatures,
    layers: Sequence[SftLayerParams],
    cfg: SftConfig,
    disable_check: bool = False,
) -> Tensor:
    """双时相编码

    两个时相共享同一组 R 层参数，输出沿通道拼接，前 C 个通道来自第一时相

    Args:
        bt (BitemporalFeatures): 双时相特征图
        layers (Sequence[SftLayerParams]): R 层参数
        cfg (SftConfig): 编码器配置
        disable_check (bool, optional): 禁用参数有效性检查. Defaults to False.

    Raises:
        ConfigError: 层数与 R 不一致时抛出此错误

    Returns:
        Tensor: 2C×W×H 特征图
    """
    if not disable_check:
        if len(layers) != cfg.R:
            raise ConfigError(f"编码器需要 R={cfg.R} 层参数，实际为 {len(layers)} 层")
        AssertSameShape(bt.f1.shape, bt.f2.shape, "Encode")
        AssertShape(bt.f1.shape, (cfg.C, cfg.W, cfg.H), "特征图")
        for params in layers:
            _CheckLayerParams(params, cfg)
    return Concat([_EncodeOne(bt.f1, layers, cfg), _EncodeOne(bt.f2, layers, cfg)], axis=0)


def SaveSftParams(
    directory: Union[str, Path], layers: Sequence[SftLayerParams], cfg: SftConfig
) -> None:
    """保存编码器参数，每个张量一个 SFT1 文件，另附 config.json"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, params in enumerate(layers):
        for name, tensor in params.tensors().items():
            WriteTensorFile(directory / f"layer{i}.{name}.sft", tensor)
    WriteJsonFile(directory / "config.json", cfg.to_dict())


def LoadSftParams(directory: Union[str, Path]) -> Tuple[List[SftLayerParams], SftConfig]:
    directory = Path(directory)
    cfg = SftConfig.from_dict(ReadJsonFile(directory / "config.json"))
    layers = []
    for i in range(cfg.R):
        tensors = {
            f.name: Tensor(ReadTensorFile(directory / f"layer{i}.{f.name}.sft"))
            for f in fields(SftLayerParams)
        }
        params = SftLayerParams(**tensors)
        _CheckLayerParams(params, cfg)
        layers.append(params)
    return layers, cfg
