from dataclasses import dataclass, fields
from math import sqrt
from typing import Any, Dict, Tuple

import numpy as np

from .assert_funcs import AssertPositiveInt, AssertShape
from .exceptions import ConfigError
from .tensor import Conv2d, Relu, Tensor

__all__ = [
    "ExtractorConfig",
    "ExtractorParams",
    "InitExtractorParams",
    "ToyExtractor",
]

# 两层卷积的 (卷积核, 步长)，64×64 输入得到 8×8 输出
_STAGES = ((4, 4), (2, 2))


@dataclass(frozen=True)
class ExtractorConfig:
    """卷积特征提取器配置"""

    in_channels: int = 3
    hidden: int = 16
    C: int = 64
    image_size: int = 64

    def __post_init__(self) -> None:
        for f in fields(self):
            AssertPositiveInt(getattr(self, f.name), f.name)
        if self.image_size % 8:
            raise ConfigError(f"image_size 应为 8 的倍数，实际为 {self.image_size}")

    @property
    def output_size(self) -> int:
        return self.image_size // 8

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExtractorConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"extractor 配置中存在未知配置项 {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class ExtractorParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def _ConvShapes(cfg: ExtractorConfig) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    (k1, _), (k2, _) = _STAGES
    return (cfg.hidden, cfg.in_channels, k1, k1), (cfg.C, cfg.hidden, k2, k2)


def InitExtractorParams(cfg: ExtractorConfig, rng: np.random.Generator) -> ExtractorParams:
    shape1, shape2 = _ConvShapes(cfg)
    bound1 = 1.0 / sqrt(int(np.prod(shape1[1:])))
    bound2 = 1.0 / sqrt(int(np.prod(shape2[1:])))
    return ExtractorParams(
        w1=Tensor(rng.uniform(-bound1, bound1, size=shape1)),
        b1=Tensor(rng.uniform(-bound1, bound1, size=shape1[:1])),
        w2=Tensor(rng.uniform(-bound2, bound2, size=shape2)),
        b2=Tensor(rng.uniform(-bound2, bound2, size=shape2[:1])),
    )


def ToyExtractor(
    img: Tensor,
    params: ExtractorParams,
    cfg: ExtractorConfig,
    disable_check: bool = False,
) -> Tensor:
    """小型跨步卷积特征提取器

    4×4 步长 4 卷积、ReLU、2×2 步长 2 卷积，3×64×64 图像得到 C×8×8 特征图

    Args:
        img (Tensor): in_channels×image_size×image_size 图像
        params (ExtractorParams): 提取器参数
        cfg (ExtractorConfig): 提取器配置
        disable_check (bool, optional): 禁用参数有效性检查. Defaults to False.

    Returns:
        Tensor: C×(image_size/8)×(image_size/8) 特征图
    """
    if not disable_check:
        AssertShape(img.shape, (cfg.in_channels, cfg.image_size, cfg.image_size), "图像")
        shape1, shape2 = _ConvShapes(cfg)
        AssertShape(params.w1.shape, shape1, "w1")
        AssertShape(params.b1.shape, shape1[:1], "b1")
        AssertShape(params.w2.shape, shape2, "w2")
        AssertShape(params.b2.shape, shape2[:1], "b2")
    (_, stride1), (_, stride2) = _STAGES
    hidden = Relu(Conv2d(img, params.w1, params.b1, stride1))
    return Conv2d(hidden, params.w2, params.b2, stride2)
