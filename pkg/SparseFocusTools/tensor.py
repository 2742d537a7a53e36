"""稠密张量与反向模式自动微分

所有运算均为输入的纯函数，结果张量只读，运算记录在结果张量的父节点与反向函数中，
由 Grad / ValueAndGrad 按拓扑序逆向累积梯度。
"""

from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .assert_funcs import AssertFinite, AssertShape
from .constants import LAYER_NORM_EPS
from .exceptions import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Gradient",
    "get_finite_check_status",
    "set_finite_check_status",
    "Add",
    "Sub",
    "Mul",
    "ScalarMul",
    "Sum",
    "Mean",
    "Exp",
    "Log",
    "Relu",
    "Reshape",
    "Transpose",
    "Concat",
    "TakeRows",
    "TakeAlongLast",
    "MaskedFill",
    "MatMul",
    "Einsum",
    "SoftmaxLast",
    "LogSoftmaxLast",
    "LayerNorm",
    "PointwiseConv",
    "Conv2d",
    "Grad",
    "ValueAndGrad",
]

_DISABLE_FINITE_CHECK = False  # 禁用有限值检查

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Operand = Union["Tensor", float, int, np.ndarray]


def get_finite_check_status() -> bool:
    """查询有限值检查状态

    Returns:
        bool: True 为开启，False 为关闭
    """
    return not _DISABLE_FINITE_CHECK


def set_finite_check_status(status: bool) -> None:
    """设置有限值检查状态

    Args:
        status (bool): True 为开启，False 为关闭
    """
    global _DISABLE_FINITE_CHECK
    _DISABLE_FINITE_CHECK = not status


class Tensor:
    """64 位浮点稠密张量，行优先存储"""

    __slots__ = ("_data", "_parents", "_backward")

    def __init__(self, data: Any) -> None:
        """构建新的张量，数据会被复制

        Args:
            data (Any): 可转换为 float64 数组的数据
        """
        array = np.array(data, dtype=np.float64)
        if any(extent < 1 for extent in array.shape):
            raise DimensionError(f"张量各维度长度必须为正整数，实际形状为 {array.shape}")
        array.setflags(write=False)
        self._data = array
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _from_op(
        cls, array: np.ndarray, parents: Tuple["Tensor", ...], backward: BackwardFn, op: str
    ) -> "Tensor":
        array = np.asarray(array, dtype=np.float64)
        if not _DISABLE_FINITE_CHECK:
            AssertFinite(array, op)
        array.setflags(write=False)
        result = cls.__new__(cls)
        result._data = array
        result._parents = parents
        result._backward = backward
        return result

    @property
    def data(self) -> np.ndarray:
        """只读的底层数组"""
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def T(self) -> "Tensor":  # noqa: N802
        return Transpose(self)

    def numpy(self) -> np.ndarray:
        """返回底层数组的可写副本"""
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"只有单元素张量可以转换为标量，实际形状为 {self.shape}")
        return float(self._data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other: Operand) -> "Tensor":
        return Add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return Add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return Sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return Sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        if isinstance(other, (int, float)):
            return ScalarMul(self, float(other))
        return Mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return ScalarMul(self, -1.0)

    def __truediv__(self, other: float) -> "Tensor":
        return ScalarMul(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return MatMul(self, other)


# 梯度与其对应的参数形状一致
Gradient = Tensor


def _AsTensor(x: Operand) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _Unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def Add(a: Operand, b: Operand) -> Tensor:
    a, b = _AsTensor(a), _AsTensor(b)
    return Tensor._from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_Unbroadcast(g, a.shape), _Unbroadcast(g, b.shape)),
        "Add",
    )


def Sub(a: Operand, b: Operand) -> Tensor:
    a, b = _AsTensor(a), _AsTensor(b)
    return Tensor._from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_Unbroadcast(g, a.shape), _Unbroadcast(-g, b.shape)),
        "Sub",
    )


def Mul(a: Operand, b: Operand) -> Tensor:
    a, b = _AsTensor(a), _AsTensor(b)
    return Tensor._from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_Unbroadcast(g * b.data, a.shape), _Unbroadcast(g * a.data, b.shape)),
        "Mul",
    )


def ScalarMul(x: Tensor, scalar: float) -> Tensor:
    return Tensor._from_op(x.data * scalar, (x,), lambda g: (g * scalar,), "ScalarMul")


def Sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "Sum")


def Mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return ScalarMul(Sum(x, axis, keepdims), 1.0 / count)


def Exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y,), "Exp")


def Log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g / x.data,), "Log")


def Relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return Tensor._from_op(x.data * positive, (x,), lambda g: (g * positive,), "Relu")


def Reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"无法将形状 {x.shape} 变换为 {tuple(shape)}") from None
    return Tensor._from_op(y, (x,), lambda g: (g.reshape(x.shape),), "Reshape")


def Transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "Transpose"
    )


def Concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"无法沿第 {axis} 维拼接形状为 {shapes} 的张量") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._from_op(
        y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "Concat"
    )


def TakeRows(x: Tensor, index: np.ndarray) -> Tensor:
    """按第一维索引取行，结果形状为 index.shape + x.shape[1:]

    Args:
        x (Tensor): 源张量
        index (np.ndarray): 整数索引数组

    Returns:
        Tensor: 取出的行
    """
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ContractError(f"行索引超出范围 [0, {x.shape[0]})")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros(x.shape)
        np.add.at(grad, index, g)
        return (grad,)

    return Tensor._from_op(x.data[index], (x,), backward, "TakeRows")


def TakeAlongLast(x: Tensor, index: np.ndarray) -> Tensor:
    """在最后一维上按索引取值，index 的形状为 x.shape[:-1]"""
    index = np.asarray(index, dtype=np.int64)
    AssertShape(index.shape, x.shape[:-1], "索引")
    expanded = index[..., None]

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros(x.shape)
        np.put_along_axis(grad, expanded, g[..., None], axis=-1)
        return (grad,)

    y = np.take_along_axis(x.data, expanded, axis=-1)[..., 0]
    return Tensor._from_op(y, (x,), backward, "TakeAlongLast")


def MaskedFill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """将 mask 为 True 的位置替换为常数 value"""
    mask = np.asarray(mask, dtype=bool)
    if np.broadcast_shapes(mask.shape, x.shape) != x.shape:
        raise DimensionError(f"掩码形状 {mask.shape} 无法广播到 {x.shape}")
    keep = ~mask
    return Tensor._from_op(
        np.where(mask, value, x.data), (x,), lambda g: (g * keep,), "MaskedFill"
    )


def MatMul(a: Tensor, b: Tensor) -> Tensor:
    """矩阵乘法

    Args:
        a (Tensor): m×k 矩阵
        b (Tensor): k×n 矩阵

    Returns:
        Tensor: m×n 矩阵
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"MatMul：形状 {a.shape} 与 {b.shape} 无法相乘")
    return Tensor._from_op(
        a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "MatMul"
    )


def Einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """双操作数爱因斯坦求和

    每个操作数的下标都必须出现在另一个操作数或输出中，反向时据此直接写出梯度表达式

    Args:
        subscripts (str): 形如 "pc,pnc->pn" 的下标表达式
        a (Tensor): 第一个操作数
        b (Tensor): 第二个操作数

    Returns:
        Tensor: 求和结果
    """
    inputs, out = subscripts.replace(" ", "").split("->")
    sa, sb = inputs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if len(set(own)) != len(own) or not set(own) <= set(other) | set(out):
            raise ContractError(f"不支持的求和表达式 {subscripts}")
    try:
        y = np.einsum(subscripts, a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"Einsum {subscripts}：形状 {a.shape} 与 {b.shape} 不匹配"
        ) from None
    return Tensor._from_op(
        y,
        (a, b),
        lambda g: (
            np.einsum(f"{out},{sb}->{sa}", g, b.data),
            np.einsum(f"{out},{sa}->{sb}", g, a.data),
        ),
        "Einsum",
    )


def SoftmaxLast(x: Tensor) -> Tensor:
    """沿最后一维计算 softmax，先减去最大值保证数值稳定"""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return Tensor._from_op(
        y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "SoftmaxLast"
    )


def LogSoftmaxLast(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return Tensor._from_op(
        y,
        (x,),
        lambda g: (g - np.exp(y) * g.sum(axis=-1, keepdims=True),),
        "LogSoftmaxLast",
    )


def LayerNorm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS
) -> Tensor:
    """沿最后一维做层归一化，再做仿射变换

    Args:
        x (Tensor): 形状为 (..., d) 的输入
        gamma (Tensor): 长度为 d 的缩放系数
        beta (Tensor): 长度为 d 的偏移量
        eps (float, optional): 方差平滑项. Defaults to 1e-5.

    Returns:
        Tensor: 与输入形状相同的输出
    """
    d = x.shape[-1]
    AssertShape(gamma.shape, (d,), "gamma")
    AssertShape(beta.shape, (d,), "beta")
    if eps <= 0:
        raise ContractError(f"eps 必须为正数，实际为 {eps}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        reduce_axes = tuple(range(x.ndim - 1))
        grad_gamma = (g * normalized).sum(axis=reduce_axes)
        grad_beta = g.sum(axis=reduce_axes)
        g_hat = g * gamma.data
        grad_x = (
            inv_std
            / d
            * (
                d * g_hat
                - g_hat.sum(axis=-1, keepdims=True)
                - normalized * (g_hat * normalized).sum(axis=-1, keepdims=True)
            )
        )
        return grad_x, grad_gamma, grad_beta

    return Tensor._from_op(
        normalized * gamma.data + beta.data, (x, gamma, beta), backward, "LayerNorm"
    )


def PointwiseConv(f: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1×1 卷积，对每个像素做跨通道线性变换

    Args:
        f (Tensor): C×W×H 特征图
        weight (Tensor): C_out×C 权重
        bias (Tensor): 长度为 C_out 的偏置

    Returns:
        Tensor: C_out×W×H 特征图
    """
    if f.ndim != 3:
        raise DimensionError(f"PointwiseConv：特征图应为三维，实际形状为 {f.shape}")
    channels, W, H = f.shape
    if weight.ndim != 2 or weight.shape[1] != channels:
        raise DimensionError(f"PointwiseConv：权重形状 {weight.shape} 与特征图 {f.shape} 通道数不匹配")
    out_channels = weight.shape[0]
    AssertShape(bias.shape, (out_channels,), "bias")
    flat = MatMul(weight, Reshape(f, (channels, W * H)))
    return Reshape(Add(flat, Reshape(bias, (out_channels, 1))), (out_channels, W, H))


def Conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int) -> Tensor:
    """无填充的跨步二维卷积

    Args:
        x (Tensor): C×H×W 输入
        weight (Tensor): O×C×k×k 卷积核
        bias (Tensor): 长度为 O 的偏置
        stride (int): 步长

    Returns:
        Tensor: O×H'×W' 输出
    """
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"Conv2d：输入形状 {x.shape} 与卷积核形状 {weight.shape} 不匹配")
    out_channels, _, k, k2 = weight.shape
    if k != k2 or x.shape[1] < k or x.shape[2] < k:
        raise DimensionError(f"Conv2d：卷积核 {weight.shape} 不适用于输入 {x.shape}")
    AssertShape(bias.shape, (out_channels,), "bias")
    windows = sliding_window_view(x.data, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    out_h, out_w = windows.shape[1], windows.shape[2]
    y = np.einsum("chwij,ocij->ohw", windows, weight.data) + bias.data[:, None, None]

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_weight = np.einsum("ohw,chwij->ocij", g, windows)
        grad_bias = g.sum(axis=(1, 2))
        grad_windows = np.einsum("ohw,ocij->chwij", g, weight.data)
        grad_x = np.zeros(x.shape)
        for i in range(k):
            for j in range(k):
                grad_x[
                    :,
                    i : i + stride * (out_h - 1) + 1 : stride,
                    j : j + stride * (out_w - 1) + 1 : stride,
                ] += grad_windows[:, :, :, i, j]
        return grad_x, grad_weight, grad_bias

    return Tensor._from_op(y, (x, weight, bias), backward, "Conv2d")


def _TopologicalOrder(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        stack.extend((parent, False) for parent in node._parents if id(parent) not in visited)
    return order


def _Backpropagate(output: Tensor, keep: Sequence[Tensor]) -> Dict[int, np.ndarray]:
    keep_ids = {id(t) for t in keep}
    grads: Dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    for node in reversed(_TopologicalOrder(output)):
        grad = grads.get(id(node))
        if grad is None or node._backward is None:
            continue
        if id(node) not in keep_ids:
            del grads[id(node)]  # 中间节点的梯度用完即释放
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
    return grads


def ValueAndGrad(
    fn: Callable[[], Tensor], params: Sequence[Tensor]
) -> Tuple[float, List[Gradient]]:
    """计算标量函数的值及其对各参数的梯度

    Args:
        fn (Callable[[], Tensor]): 只由本库运算构成、返回单元素张量的函数
        params (Sequence[Tensor]): 参数列表

    Returns:
        Tuple[float, List[Gradient]]: 函数值与梯度列表，梯度形状与参数一致
    """
    output = fn()
    if not isinstance(output, Tensor) or output.size != 1:
        shape = output.shape if isinstance(output, Tensor) else type(output).__name__
        raise ContractError(f"求导函数必须返回单元素张量，实际为 {shape}")
    grads = _Backpropagate(output, params)
    result = [
        Tensor(grads[id(p)].reshape(p.shape)) if id(p) in grads else Tensor(np.zeros(p.shape))
        for p in params
    ]
    return output.item(), result


def Grad(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> List[Gradient]:
    """反向模式自动微分

    Args:
        fn (Callable[[], Tensor]): 只由本库运算构成、返回单元素张量的函数
        params (Sequence[Tensor]): 参数列表

    Returns:
        List[Gradient]: 与参数一一对应的梯度
    """
    return ValueAndGrad(fn, params)[1]
