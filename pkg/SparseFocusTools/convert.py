import re
from typing import List, Sequence, Tuple

from .assert_funcs import AssertPixelInGrid
from .constants import END_ID, PAD_ID, START_ID
from .exceptions import DimensionError, GridIndexError
from .tensor import Reshape, Tensor, Transpose

__all__ = [
    "PixelToIndex",
    "IndexToPixel",
    "FeatureMapToImageTokens",
    "NormalizeCaption",
    "Tokenize",
    "StripSpecialIds",
]

_PUNCTUATION_PATTERN = re.compile(r"[^\w\s]")


def PixelToIndex(p: Tuple[int, int], W: int, H: int) -> int:
    """像素坐标转扁平索引

    Args:
        p (Tuple[int, int]): 像素坐标 (行, 列)
        W (int): 行数
        H (int): 列数

    Returns:
        int: 扁平索引 r·H + c
    """
    AssertPixelInGrid(p, W, H)
    return p[0] * H + p[1]


def IndexToPixel(index: int, W: int, H: int) -> Tuple[int, int]:
    if not 0 <= index < W * H:
        raise GridIndexError(f"像素索引 {index} 超出 {W}×{H} 网格范围")
    return divmod(index, H)


def FeatureMapToImageTokens(f: Tensor) -> Tensor:
    """C×W×H 特征图转 (W·H)×C 图像词元，第 p 行对应扁平索引为 p 的像素"""
    if f.ndim != 3:
        raise DimensionError(f"特征图应为 C×W×H 三维张量，实际形状为 {f.shape}")
    channels, W, H = f.shape
    return Transpose(Reshape(f, (channels, W * H)))


def NormalizeCaption(text: str) -> str:
    """转小写、去除标点并合并空白"""
    return " ".join(Tokenize(text))


def Tokenize(text: str) -> List[str]:
    return _PUNCTUATION_PATTERN.sub(" ", text.lower()).replace("_", " ").split()


def StripSpecialIds(ids: Sequence[int]) -> List[int]:
    """去掉开头的 START，截断到第一个 END，并去除 PAD"""
    ids = list(ids)
    if ids and ids[0] == START_ID:
        ids = ids[1:]
    if END_ID in ids:
        ids = ids[: ids.index(END_ID)]
    return [i for i in ids if i != PAD_ID]
