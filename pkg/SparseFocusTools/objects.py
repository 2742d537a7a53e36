from itertools import count
from pathlib import Path
from typing import Any, Callable, Dict, Union

from .accounting import CostReport, CountMacs, CountParams
from .assert_funcs import AssertType
from .attention import AxialAttentionMap, GetAxialAttentionMap
from .decoder import CaptionSequence, GreedyDecode, Vocabulary
from .encoder import SftLayer
from .extractor import ToyExtractor
from .model import (
    EncodeImages,
    InitModelParams,
    LoadCheckpoint,
    ModelConfig,
    ModelParams,
    SaveCheckpoint,
)
from .tensor import PointwiseConv, Tensor
from .utils import CallWithoutCheck, NameValueMappingToString

__all__ = [
    "CaptionModel",
    "get_cache_items_count",
    "get_cache_status",
    "set_cache_status",
    "clear_cache",
]

_cache_dict: Dict[int, Any] = {}
_DISABLE_CACHE = False  # 禁用缓存
_instance_counter = count()


def cache_result_wrapper(func: Callable) -> Callable:
    """该函数是一个装饰器，用于缓存方法的返回值

    Args:
        func (Callable): 被装饰的函数
    """

    def inner(*args: Any, **kwargs: Any) -> Any:
        if _DISABLE_CACHE:
            return func(*args, **kwargs)

        args_hash = hash(
            (hash(func.__qualname__),)
            + (hash(args[0]),)
            + tuple(args[1:])
            + tuple(kwargs.items())
        )

        cache_result = _cache_dict.get(args_hash)
        if cache_result is not None:
            return cache_result

        result = func(*args, **kwargs)
        _cache_dict[args_hash] = result
        return result

    return inner


def get_cache_items_count() -> int:
    """该函数用于获取已缓存值的数量

    Returns:
        int: 已缓存值数量
    """
    return len(_cache_dict)


def get_cache_status() -> bool:
    """查询缓存状态

    Returns:
        bool: True 为开启，False 为关闭
    """
    return not _DISABLE_CACHE


def set_cache_status(status: bool) -> None:
    """设置缓存状态

    Args:
        status (bool): True 为开启，False 为关闭
    """
    AssertType(status, bool)

    global _DISABLE_CACHE
    _DISABLE_CACHE = not status


def clear_cache():  # noqa: ANN201
    """该函数用于清空已缓存的所有值"""
    _cache_dict.clear()


class CaptionModel:
    """变化描述模型类"""

    def __init__(self, params: ModelParams, cfg: ModelConfig, vocab: Vocabulary) -> None:
        """构建新的模型对象

        Args:
            params (ModelParams): 模型参数
            cfg (ModelConfig): 模型配置
            vocab (Vocabulary): 词表
        """
        AssertType(params, ModelParams)
        AssertType(cfg, ModelConfig)
        AssertType(vocab, Vocabulary)
        if params.decoder.vocab_size != len(vocab):
            raise ValueError(f"参数词表大小 {params.decoder.vocab_size} 与词表大小 {len(vocab)} 不一致")
        self._params = params
        self._cfg = cfg
        self._vocab = vocab
        # 参数不可变，以实例序号作为缓存键
        self._key = next(_instance_counter)

    @classmethod
    def from_config(cls, cfg: ModelConfig, vocab: Vocabulary, seed: int = 0) -> "CaptionModel":
        """按配置随机初始化模型

        Args:
            cfg (ModelConfig): 模型配置
            vocab (Vocabulary): 词表
            seed (int, optional): 随机种子. Defaults to 0.

        Returns:
            CaptionModel: 模型对象
        """
        return cls(InitModelParams(cfg, len(vocab), seed), cfg, vocab)

    @classmethod
    def from_checkpoint(cls, directory: Union[str, Path]) -> "CaptionModel":
        """从检查点目录构建模型

        Args:
            directory (Union[str, Path]): 检查点目录

        Returns:
            CaptionModel: 模型对象
        """
        params, cfg, vocab = LoadCheckpoint(directory)
        return cls(params, cfg, vocab)

    @property
    def params(self) -> ModelParams:
        return self._params

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    @property
    @cache_result_wrapper
    def cost_report(self) -> CostReport:
        """获取参数量与 MAC 报告

        Returns:
            CostReport: 统计报告
        """
        vocab_size = len(self._vocab)
        return CountParams(self._cfg, vocab_size).merge(CountMacs(self._cfg, vocab_size))

    @property
    @cache_result_wrapper
    def parameters_count(self) -> int:
        """获取参数总量

        Returns:
            int: 参数总量
        """
        return self.cost_report.total_params

    def caption_sequence(self, img1: Tensor, img2: Tensor) -> CaptionSequence:
        image_tokens = EncodeImages(self._params, self._cfg, img1, img2)
        return CallWithoutCheck(
            GreedyDecode, image_tokens, self._params.decoder, self._cfg.decoder
        )

    def caption(self, img1: Tensor, img2: Tensor) -> str:
        """为一对双时相图像生成变化描述

        Args:
            img1 (Tensor): 第一时相图像
            img2 (Tensor): 第二时相图像

        Returns:
            str: 变化描述
        """
        return self._vocab.decode(self.caption_sequence(img1, img2).ids)

    def attention_map(self, img: Tensor, layer: int = 0) -> AxialAttentionMap:
        """获取单张图像在第 layer 层稀疏聚焦注意力的注意力图

        Args:
            img (Tensor): 图像
            layer (int, optional): 编码器层序号. Defaults to 0.

        Returns:
            AxialAttentionMap: 注意力图
        """
        if not 0 <= layer < len(self._params.encoder):
            raise IndexError(f"编码器只有 {len(self._params.encoder)} 层，无法获取第 {layer} 层")
        sft = self._cfg.sft
        f = ToyExtractor(img, self._params.extractor, self._cfg.extractor)
        for params in self._params.encoder[:layer]:
            f = CallWithoutCheck(SftLayer, f, params, sft)
        params = self._params.encoder[layer]
        q = PointwiseConv(f, params.wq, params.bq)
        k = PointwiseConv(f, params.wk, params.bk)
        return CallWithoutCheck(GetAxialAttentionMap, q, k, sft.variant, sft.scale_qk)

    def save(self, directory: Union[str, Path]) -> Path:
        return SaveCheckpoint(directory, self._params, self._cfg, self._vocab)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CaptionModel):
            return False
        return self._key == other._key

    def __hash__(self) -> int:
        return hash(("CaptionModel", self._key))

    def __str__(self) -> str:
        """输出模型信息摘要

        Returns:
            str: 模型信息摘要
        """
        sft, dec = self._cfg.sft, self._cfg.decoder
        return NameValueMappingToString(
            {
                "注意力变体": (sft.variant, False),
                "编码器层数": (sft.R, False),
                "通道数": (f"C={sft.C} C'={sft.C_reduced}", False),
                "特征图尺寸": (f"{sft.W}×{sft.H}", False),
                "解码器": (f"d_embed={dec.d_embed} h={dec.h} n_layers={dec.n_layers}", False),
                "词表大小": (len(self._vocab), False),
                "参数总量": (self.parameters_count, False),
            },
            title="变化描述模型信息摘要",
        )
