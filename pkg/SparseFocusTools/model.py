from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .assert_funcs import AssertShape
from .basic_io import ReadJsonFile, ReadTensorFile, WriteJsonFile, WriteTensorFile
from .decoder import (
    CaptionSequence,
    DecoderConfig,
    DecoderLogits,
    DecoderParams,
    GreedyDecode,
    InitDecoderParams,
    LogitFilter,
    ProjectImageTokens,
    Vocabulary,
)
from .encoder import (
    BitemporalFeatures,
    Encode,
    InitSftLayerParams,
    SftConfig,
    SftLayerParams,
)
from .exceptions import ConfigError, ResourceError
from .extractor import (
    ExtractorConfig,
    ExtractorParams,
    InitExtractorParams,
    ToyExtractor,
)
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "ModelParams",
    "InitModelParams",
    "FlattenParams",
    "UnflattenParams",
    "EncodeImages",
    "ModelLogits",
    "CaptionImages",
    "SaveCheckpoint",
    "LoadCheckpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    """完整模型配置：特征提取器、稀疏聚焦编码器与描述解码器"""

    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self) -> None:
        if self.extractor.C != self.sft.C:
            raise ConfigError(f"提取器输出通道数 {self.extractor.C} 与编码器通道数 {self.sft.C} 不一致")
        size = self.extractor.output_size
        if (self.sft.W, self.sft.H) != (size, size):
            raise ConfigError(
                f"提取器输出尺寸 {size}×{size} 与编码器网格 {self.sft.W}×{self.sft.H} 不一致"
            )

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        unknown = set(data) - {"extractor", "sft", "decoder"}
        if unknown:
            raise ConfigError(f"模型配置中存在未知配置段 {sorted(unknown)}")
        return cls(
            extractor=ExtractorConfig.from_dict(data.get("extractor", {})),
            sft=SftConfig.from_dict(data.get("sft", {})),
            decoder=DecoderConfig.from_dict(data.get("decoder", {})),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "extractor": self.extractor.to_dict(),
            "sft": self.sft.to_dict(),
            "decoder": self.decoder.to_dict(),
        }


@dataclass(frozen=True)
class ModelParams:
    extractor: ExtractorParams
    encoder: Tuple[SftLayerParams, ...]
    decoder: DecoderParams


def InitModelParams(cfg: ModelConfig, vocab_size: int, seed: int) -> ModelParams:
    """按固定顺序初始化全部参数：提取器、编码器各层、解码器

    Args:
        cfg (ModelConfig): 模型配置
        vocab_size (int): 词表大小
        seed (int): 随机种子

    Returns:
        ModelParams: 模型参数
    """
    rng = np.random.default_rng(seed)
    return ModelParams(
        extractor=InitExtractorParams(cfg.extractor, rng),
        encoder=tuple(InitSftLayerParams(cfg.sft, rng) for _ in range(cfg.sft.R)),
        decoder=InitDecoderParams(cfg.decoder, vocab_size, 2 * cfg.sft.C, rng),
    )


def _Walk(obj: Any, prefix: str) -> Iterator[Tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from _Walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, tuple):
        for i, item in enumerate(obj):
            yield from _Walk(item, f"{prefix}.{i}")


def FlattenParams(params: ModelParams) -> Dict[str, Tensor]:
    """展开为 {名称: 张量} 字典，名称形如 encoder.0.wq，顺序固定"""
    return dict(_Walk(params, ""))


def _Rebuild(obj: Any, values: Iterator[Tensor]) -> Any:
    if isinstance(obj, Tensor):
        value = next(values)
        AssertShape(value.shape, obj.shape, "参数")
        return value
    if is_dataclass(obj):
        return replace(obj, **{f.name: _Rebuild(getattr(obj, f.name), values) for f in fields(obj)})
    if isinstance(obj, tuple):
        return tuple(_Rebuild(item, values) for item in obj)
    return obj


def UnflattenParams(template: ModelParams, values: Sequence[Tensor]) -> ModelParams:
    """按 FlattenParams 的顺序用新的张量替换模型参数

    Args:
        template (ModelParams): 提供结构与形状的模型参数
        values (Sequence[Tensor]): 新的参数张量

    Returns:
        ModelParams: 新的模型参数
    """
    expected = len(FlattenParams(template))
    if len(values) != expected:
        raise ConfigError(f"需要 {expected} 个参数张量，实际为 {len(values)} 个")
    return _Rebuild(template, iter(values))


def EncodeImages(
    params: ModelParams, cfg: ModelConfig, img1: Tensor, img2: Tensor
) -> Tensor:
    """双时相图像经提取器与编码器后投影为图像词元"""
    bt = BitemporalFeatures(
        f1=ToyExtractor(img1, params.extractor, cfg.extractor),
        f2=ToyExtractor(img2, params.extractor, cfg.extractor),
    )
    features = Encode(bt, params.encoder, cfg.sft)
    return ProjectImageTokens(features, params.decoder)


def ModelLogits(
    params: ModelParams,
    cfg: ModelConfig,
    img1: Tensor,
    img2: Tensor,
    tokens: Sequence[int],
) -> Tensor:
    image_tokens = EncodeImages(params, cfg, img1, img2)
    return DecoderLogits(tokens, image_tokens, params.decoder, cfg.decoder)


def CaptionImages(
    params: ModelParams,
    cfg: ModelConfig,
    img1: Tensor,
    img2: Tensor,
    logit_filter: Optional[LogitFilter] = None,
) -> CaptionSequence:
    image_tokens = EncodeImages(params, cfg, img1, img2)
    return GreedyDecode(image_tokens, params.decoder, cfg.decoder, logit_filter)


def SaveCheckpoint(
    directory: Union[str, Path],
    params: ModelParams,
    cfg: ModelConfig,
    vocab: Vocabulary,
) -> Path:
    """保存检查点：tensors/ 下每个参数一个 SFT1 文件，另附 config.json 与 vocab.json

    Args:
        directory (Union[str, Path]): 检查点目录
        params (ModelParams): 模型参数
        cfg (ModelConfig): 模型配置
        vocab (Vocabulary): 词表

    Returns:
        Path: 检查点目录
    """
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    for name, tensor in FlattenParams(params).items():
        WriteTensorFile(directory / "tensors" / f"{name}.sft", tensor)
    WriteJsonFile(directory / "config.json", cfg.to_dict())
    WriteJsonFile(directory / "vocab.json", vocab.tokens)
    return directory


def LoadCheckpoint(directory: Union[str, Path]) -> Tuple[ModelParams, ModelConfig, Vocabulary]:
    """读取检查点

    Args:
        directory (Union[str, Path]): 检查点目录

    Raises:
        ResourceError: 文件缺失或格式错误时抛出此错误

    Returns:
        Tuple[ModelParams, ModelConfig, Vocabulary]: 模型参数、模型配置与词表
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ResourceError(f"检查点目录 {directory} 不存在")
    cfg = ModelConfig.from_dict(ReadJsonFile(directory / "config.json"))
    vocab = Vocabulary(ReadJsonFile(directory / "vocab.json"))
    template = InitModelParams(cfg, len(vocab), seed=0)
    values: List[Tensor] = []
    for name, expected in FlattenParams(template).items():
        path = directory / "tensors" / f"{name}.sft"
        array = ReadTensorFile(path)
        if array.shape != expected.shape:
            raise ResourceError(f"{path}：张量形状 {array.shape} 与配置要求的 {expected.shape} 不一致")
        values.append(Tensor(array))
    return UnflattenParams(template, values), cfg, vocab
