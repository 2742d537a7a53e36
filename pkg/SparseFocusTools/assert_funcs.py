from typing import Any, Iterable, Optional, Sequence, Tuple, Type

import numpy as np

from .exceptions import (
    ConfigError,
    ContractError,
    DimensionError,
    GridIndexError,
    NumericalError,
    VocabularyError,
)

__all__ = [
    "AssertType",
    "AssertShape",
    "AssertSameShape",
    "AssertSameExtents",
    "AssertPositiveInt",
    "AssertInRange",
    "AssertPixelInGrid",
    "AssertTokenIds",
    "AssertNonEmpty",
    "AssertFinite",
    "AssertVariant",
]


def AssertType(obj: Any, type_obj: Any) -> None:
    """判断对象是否是指定类型

    Args:
        obj (Any): 需要进行判断的对象
        type_obj (object): 目标类型

    Raises:
        TypeError: 对象类型错误时抛出此错误
    """
    if not isinstance(obj, type_obj):
        raise TypeError(f"{obj!r} 不是 {type_obj.__name__} 类型，而是 { type(obj).__name__ } 类型")


def AssertShape(
    shape: Sequence[int], expected: Sequence[Optional[int]], name: str = "张量"
) -> None:
    """判断形状是否与期望形状一致

    Args:
        shape (Sequence[int]): 实际形状
        expected (Sequence[Optional[int]]): 期望形状，None 表示该维度不做限制
        name (str, optional): 报错信息中使用的名称. Defaults to "张量".

    Raises:
        DimensionError: 形状不一致时抛出此错误
    """
    if len(shape) != len(expected) or any(
        want is not None and got != want for got, want in zip(shape, expected)
    ):
        shown = tuple("*" if want is None else want for want in expected)
        raise DimensionError(f"{name} 的形状应为 {shown}，实际为 {tuple(shape)}")


def AssertSameShape(a: Sequence[int], b: Sequence[int], op_name: str) -> None:
    """判断两个形状是否完全一致

    Args:
        a (Sequence[int]): 第一个形状
        b (Sequence[int]): 第二个形状
        op_name (str): 运算名称

    Raises:
        DimensionError: 形状不一致时抛出此错误
    """
    if tuple(a) != tuple(b):
        raise DimensionError(f"{op_name}：形状 {tuple(a)} 与 {tuple(b)} 不一致")


def AssertSameExtents(shapes: Iterable[Tuple[int, ...]], op_name: str) -> None:
    """判断一组特征图的空间尺寸（最后两维）是否一致

    Args:
        shapes (Iterable[Tuple[int, ...]]): 特征图形状
        op_name (str): 运算名称

    Raises:
        DimensionError: 特征图不是三维或空间尺寸不一致时抛出此错误
    """
    shapes = [tuple(shape) for shape in shapes]
    for shape in shapes:
        if len(shape) != 3:
            raise DimensionError(f"{op_name}：特征图应为 C×W×H 三维张量，实际形状为 {shape}")
    extents = {shape[1:] for shape in shapes}
    if len(extents) > 1:
        raise DimensionError(f"{op_name}：特征图空间尺寸不一致 {shapes}")


def AssertPositiveInt(value: Any, name: str) -> None:
    """判断配置值是否是正整数

    Args:
        value (Any): 配置值
        name (str): 配置项名称

    Raises:
        ConfigError: 不是正整数时抛出此错误
    """
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ConfigError(f"{name} 应为正整数，实际为 {value!r}")


def AssertInRange(
    value: float,
    low: float,
    high: float,
    name: str,
    *,
    low_inclusive: bool = True,
    error: Type[Exception] = ConfigError,
) -> None:
    """判断数值是否在指定区间内

    Args:
        value (float): 数值
        low (float): 下界
        high (float): 上界（闭区间）
        name (str): 数值名称
        low_inclusive (bool, optional): 下界是否可取. Defaults to True.
        error (Type[Exception], optional): 抛出的异常类型. Defaults to ConfigError.

    Raises:
        ConfigError: 数值不在区间内时抛出此错误
    """
    above_low = value >= low if low_inclusive else value > low
    if not (above_low and value <= high):
        left = "[" if low_inclusive else "("
        raise error(f"{name} 应在区间 {left}{low}, {high}] 内，实际为 {value!r}")


def AssertPixelInGrid(p: Tuple[int, int], W: int, H: int) -> None:
    """判断像素坐标是否在 W×H 网格内

    Args:
        p (Tuple[int, int]): 像素坐标 (行, 列)
        W (int): 行数
        H (int): 列数

    Raises:
        GridIndexError: 坐标越界时抛出此错误
    """
    r, c = p
    if not (0 <= r < W and 0 <= c < H):
        raise GridIndexError(f"像素 {tuple(p)} 超出 {W}×{H} 网格范围")


def AssertTokenIds(ids: Sequence[int], vocab_size: int) -> None:
    """判断词元 ID 是否都在词表范围内

    Args:
        ids (Sequence[int]): 词元 ID 序列
        vocab_size (int): 词表大小

    Raises:
        VocabularyError: 存在越界 ID 时抛出此错误
    """
    for position, token_id in enumerate(ids):
        if not 0 <= token_id < vocab_size:
            raise VocabularyError(
                f"位置 {position} 的词元 ID {token_id} 超出词表范围 [0, {vocab_size})"
            )


def AssertNonEmpty(seq: Sequence[Any], name: str) -> None:
    """判断序列是否非空

    Args:
        seq (Sequence[Any]): 序列
        name (str): 序列名称

    Raises:
        ContractError: 序列为空时抛出此错误
    """
    if len(seq) == 0:
        raise ContractError(f"{name} 不能为空")


def AssertFinite(array: np.ndarray, what: str) -> None:
    """判断数组中的元素是否全部为有限值

    Args:
        array (np.ndarray): 数组
        what (str): 产生该数组的运算名称

    Raises:
        NumericalError: 出现 NaN 或 Inf 时抛出此错误
    """
    if not np.isfinite(array).all():
        raise NumericalError(f"{what} 的结果中出现非有限值")


def AssertVariant(variant: Any, W: int, H: int) -> None:
    """判断轴向注意力变体在 W×H 网格上是否有效

    Args:
        variant (AxialVariant): 轴向注意力变体
        W (int): 行数
        H (int): 列数

    Raises:
        ConfigError: 变体类型未知或窗口长度越界时抛出此错误
    """
    if variant.kind not in ("full", "fixed"):
        raise ConfigError(f"未知的轴向注意力变体 {variant.kind!r}，应为 full 或 fixed")
    if variant.kind == "fixed":
        AssertPositiveInt(variant.l, "窗口长度 l")
        if variant.l > max(W, H):
            raise ConfigError(f"窗口长度 l={variant.l} 超过网格边长上限 {max(W, H)}")
