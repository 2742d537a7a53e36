"""轴向稀疏聚焦注意力

特征图形状为 C×W×H，像素 (r, c) 的扁平索引为 r·H + c。
像素的轴向邻域由其所在行（沿最后一维）与所在列组成，成员顺序固定为：
先行段从左到右（含中心），再列段从上到下（不含中心）。
"""

from dataclasses import dataclass
from functools import lru_cache
from math import sqrt
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from .assert_funcs import (
    AssertPixelInGrid,
    AssertSameExtents,
    AssertSameShape,
    AssertShape,
    AssertVariant,
)
from .basic_io import WriteJsonFile, WriteTensorFile
from .constants import MASK_FILL_VALUE
from .exceptions import ConfigError, ContractError, DimensionError
from .tensor import (
    Add,
    Einsum,
    MaskedFill,
    MatMul,
    Reshape,
    ScalarMul,
    SoftmaxLast,
    TakeRows,
    Tensor,
    Transpose,
)

__all__ = [
    "AxialVariant",
    "AxialNeighborhood",
    "AxialAttentionMap",
    "GetAxialNeighborhood",
    "GetNeighborhoodTable",
    "GetAxialMask",
    "SparseFocusAttention",
    "DenseMaskedAttention",
    "GetAxialAttentionMap",
    "ExportAttentionMap",
]


@dataclass(frozen=True)
class AxialVariant:
    """轴向注意力变体

    kind 为 "full" 时使用整行整列，为 "fixed" 时在行列上各取长度为 l 的窗口
    """

    kind: str = "full"
    l: int = 0  # noqa: E741

    @classmethod
    def full(cls) -> "AxialVariant":
        return cls("full", 0)

    @classmethod
    def fixed(cls, l: int) -> "AxialVariant":  # noqa: E741
        if isinstance(l, bool) or not isinstance(l, int) or l < 1:
            raise ConfigError(f"窗口长度 l 应为正整数，实际为 {l!r}")
        return cls("fixed", l)

    @classmethod
    def from_string(cls, text: str) -> "AxialVariant":
        """从 "full" 或 "fixed:4" 形式的字符串构建变体"""
        kind, _, length = text.strip().lower().partition(":")
        if kind == "full" and not length:
            return cls.full()
        if kind == "fixed" and length.isdigit():
            return cls.fixed(int(length))
        raise ConfigError(f"无法解析轴向注意力变体 {text!r}，应为 full 或 fixed:<l>")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AxialVariant":
        kind = data.get("kind", "full")
        if kind == "full":
            return cls.full()
        if kind == "fixed":
            return cls.fixed(data.get("l", 0))
        raise ConfigError(f"未知的轴向注意力变体 {kind!r}，应为 full 或 fixed")

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "l": self.l}

    def __str__(self) -> str:
        return self.kind if self.kind == "full" else f"fixed:{self.l}"


@dataclass(frozen=True)
class AxialNeighborhood:
    center: Tuple[int, int]
    members: Tuple[Tuple[int, int], ...]
    H: int

    @property
    def indices(self) -> List[int]:
        """成员的扁平像素索引"""
        return [r * self.H + c for r, c in self.members]

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class AxialAttentionMap:
    """每个像素在其轴向邻域上的注意力分布

    weights 与 index 形状均为 (W·H)×N_max，valid 标记有效槽位，无效槽位权重严格为 0
    """

    weights: np.ndarray
    index: np.ndarray
    valid: np.ndarray
    W: int
    H: int
    variant: AxialVariant

    def to_dense(self) -> np.ndarray:
        """展开为 (W·H)×(W·H) 的稠密注意力矩阵"""
        pixels = self.W * self.H
        dense = np.zeros((pixels, pixels))
        rows = np.broadcast_to(np.arange(pixels)[:, None], self.index.shape)
        dense[rows[self.valid], self.index[self.valid]] = self.weights[self.valid]
        return dense


def _Window(position: int, l: int, n: int) -> range:  # noqa: E741
    start = min(max(position - (l - 1) // 2, 0), max(n - l, 0))
    return range(start, min(start + l, n))


def GetAxialNeighborhood(
    p: Tuple[int, int], W: int, H: int, variant: AxialVariant
) -> AxialNeighborhood:
    """获取像素的轴向邻域

    固定长度变体的窗口从 p - ⌊(l-1)/2⌋ 开始，越过边界时平移回网格内，l 大于边长时截断

    Args:
        p (Tuple[int, int]): 像素坐标 (行, 列)
        W (int): 行数
        H (int): 列数
        variant (AxialVariant): 轴向注意力变体

    Raises:
        GridIndexError: 像素越界时抛出此错误

    Returns:
        AxialNeighborhood: 轴向邻域
    """
    AssertPixelInGrid(p, W, H)
    AssertVariant(variant, W, H)
    r, c = p
    if variant.kind == "full":
        row_span, column_span = range(H), range(W)
    else:
        row_span, column_span = _Window(c, variant.l, H), _Window(r, variant.l, W)
    members = [(r, c2) for c2 in row_span]
    members.extend((r2, c) for r2 in column_span if r2 != r)
    return AxialNeighborhood(center=(r, c), members=tuple(members), H=H)


@lru_cache(maxsize=64)
def GetNeighborhoodTable(
    W: int, H: int, variant: AxialVariant
) -> Tuple[np.ndarray, np.ndarray]:
    """获取全部像素邻域的索引表

    Args:
        W (int): 行数
        H (int): 列数
        variant (AxialVariant): 轴向注意力变体

    Returns:
        Tuple[np.ndarray, np.ndarray]: (W·H)×N_max 的索引表与有效性掩码，
            填充槽位的索引为像素自身
    """
    neighborhoods = [
        GetAxialNeighborhood((r, c), W, H, variant) for r in range(W) for c in range(H)
    ]
    n_max = max(len(n) for n in neighborhoods)
    index = np.empty((W * H, n_max), dtype=np.int64)
    valid = np.zeros((W * H, n_max), dtype=bool)
    for p, neighborhood in enumerate(neighborhoods):
        index[p, :] = p
        index[p, : len(neighborhood)] = neighborhood.indices
        valid[p, : len(neighborhood)] = True
    index.setflags(write=False)
    valid.setflags(write=False)
    return index, valid


def GetAxialMask(W: int, H: int, variant: AxialVariant) -> np.ndarray:
    """获取轴向注意力的稠密布尔掩码，mask[p, j] 表示像素 j 属于 p 的邻域"""
    index, valid = GetNeighborhoodTable(W, H, variant)
    mask = np.zeros((W * H, W * H), dtype=bool)
    rows = np.broadcast_to(np.arange(W * H)[:, None], index.shape)
    mask[rows[valid], index[valid]] = True
    return mask


def _CheckFeatureMaps(q: Tensor, k: Tensor, v: Tensor, f: Tensor, op_name: str) -> None:
    AssertSameExtents([q.shape, k.shape, v.shape, f.shape], op_name)
    if q.shape[0] != k.shape[0]:
        raise DimensionError(f"{op_name}：Q 形状 {q.shape} 与 K 形状 {k.shape} 通道数不一致")
    AssertSameShape(v.shape, f.shape, op_name)


def _PixelRows(x: Tensor) -> Tensor:
    channels, W, H = x.shape
    return Transpose(Reshape(x, (channels, W * H)))


def _AxialWeights(
    q: Tensor, k: Tensor, variant: AxialVariant, scale_qk: bool
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    reduced, W, H = q.shape
    index, valid = GetNeighborhoodTable(W, H, variant)
    logits = Einsum("pc,pnc->pn", _PixelRows(q), TakeRows(_PixelRows(k), index))
    if scale_qk:
        logits = ScalarMul(logits, 1.0 / sqrt(reduced))
    return SoftmaxLast(MaskedFill(logits, ~valid, MASK_FILL_VALUE)), index, valid


def SparseFocusAttention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    f: Tensor,
    variant: AxialVariant,
    scale_qk: bool = False,
    disable_check: bool = False,
) -> Tensor:
    """稀疏聚焦注意力

    每个像素只在其轴向邻域上计算 softmax(Q_p·K_i)，按权重聚合 V 后与 F 做残差相加

    Args:
        q (Tensor): C'×W×H 查询特征图
        k (Tensor): C'×W×H 键特征图
        v (Tensor): C×W×H 值特征图
        f (Tensor): C×W×H 输入特征图
        variant (AxialVariant): 轴向注意力变体
        scale_qk (bool, optional): 是否将 logit 除以 √C'. Defaults to False.
        disable_check (bool, optional): 禁用参数有效性检查. Defaults to False.

    Returns:
        Tensor: C×W×H 输出特征图
    """
    if not disable_check:
        _CheckFeatureMaps(q, k, v, f, "SparseFocusAttention")
        AssertVariant(variant, q.shape[1], q.shape[2])
    channels, W, H = v.shape
    weights, index, _ = _AxialWeights(q, k, variant, scale_qk)
    aggregated = Einsum("pn,pnc->pc", weights, TakeRows(_PixelRows(v), index))
    return Add(Reshape(Transpose(aggregated), (channels, W, H)), f)


def DenseMaskedAttention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    f: Tensor,
    mask: np.ndarray,
    scale_qk: bool = False,
    disable_check: bool = False,
) -> Tensor:
    """在全部 W·H 个像素上计算带掩码的稠密注意力，再与 F 做残差相加

    Args:
        q (Tensor): C'×W×H 查询特征图
        k (Tensor): C'×W×H 键特征图
        v (Tensor): C×W×H 值特征图
        f (Tensor): C×W×H 输入特征图
        mask (np.ndarray): (W·H)×(W·H) 布尔掩码，False 的位置不参与注意力
        scale_qk (bool, optional): 是否将 logit 除以 √C'. Defaults to False.
        disable_check (bool, optional): 禁用参数有效性检查. Defaults to False.

    Raises:
        ContractError: 掩码存在全 False 的行时抛出此错误

    Returns:
        Tensor: C×W×H 输出特征图
    """
    mask = np.asarray(mask, dtype=bool)
    channels, W, H = v.shape
    if not disable_check:
        _CheckFeatureMaps(q, k, v, f, "DenseMaskedAttention")
        AssertShape(mask.shape, (W * H, W * H), "掩码")
        empty_rows = np.flatnonzero(~mask.any(axis=1))
        if empty_rows.size:
            raise ContractError(f"掩码第 {int(empty_rows[0])} 行没有任何可关注的像素")
    logits = MatMul(_PixelRows(q), Transpose(_PixelRows(k)))
    if scale_qk:
        logits = ScalarMul(logits, 1.0 / sqrt(q.shape[0]))
    weights = SoftmaxLast(MaskedFill(logits, ~mask, MASK_FILL_VALUE))
    aggregated = MatMul(weights, _PixelRows(v))
    return Add(Reshape(Transpose(aggregated), (channels, W, H)), f)


def GetAxialAttentionMap(
    q: Tensor,
    k: Tensor,
    variant: AxialVariant,
    scale_qk: bool = False,
    disable_check: bool = False,
) -> AxialAttentionMap:
    """计算轴向注意力图

    Args:
        q (Tensor): C'×W×H 查询特征图
        k (Tensor): C'×W×H 键特征图
        variant (AxialVariant): 轴向注意力变体
        scale_qk (bool, optional): 是否将 logit 除以 √C'. Defaults to False.
        disable_check (bool, optional): 禁用参数有效性检查. Defaults to False.

    Returns:
        AxialAttentionMap: 注意力图
    """
    if not disable_check:
        AssertSameExtents([q.shape, k.shape], "GetAxialAttentionMap")
        AssertShape(k.shape, (q.shape[0], None, None), "K")
        AssertVariant(variant, q.shape[1], q.shape[2])
    weights, index, valid = _AxialWeights(q, k, variant, scale_qk)
    return AxialAttentionMap(
        weights=weights.data,
        index=index,
        valid=valid,
        W=q.shape[1],
        H=q.shape[2],
        variant=variant,
    )


def ExportAttentionMap(attention_map: AxialAttentionMap, path: Union[str, Path]) -> Path:
    """导出注意力图，权重写入 SFT1 文件，掩码描述写入同名 JSON 文件

    Args:
        attention_map (AxialAttentionMap): 注意力图
        path (Union[str, Path]): SFT1 文件路径

    Returns:
        Path: JSON 描述文件路径
    """
    path = Path(path)
    WriteTensorFile(path, attention_map.weights)
    sidecar = path.with_suffix(".json")
    WriteJsonFile(
        sidecar,
        {
            "tensor": path.name,
            "W": attention_map.W,
            "H": attention_map.H,
            "variant": attention_map.variant.to_dict(),
            "n_max": int(attention_map.index.shape[1]),
            "members": [
                [int(i) for i in row[mask]]
                for row, mask in zip(attention_map.index, attention_map.valid)
            ],
        },
    )
    return sidecar
