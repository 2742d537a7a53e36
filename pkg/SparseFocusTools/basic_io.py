import logging
import struct
from json import dumps as json_dumps
from pathlib import Path
from typing import Any, Dict, Iterator, List, Tuple, Union

import numpy as np

from .constants import SFT1_MAGIC
from .exceptions import ResourceError
from .tensor import Tensor

try:
    from ujson import loads as json_loads
except ImportError:
    from json import loads as json_loads

__all__ = [
    "EncodeTensorBytes",
    "DecodeTensorBytes",
    "WriteTensorFile",
    "ReadTensorFile",
    "DumpJson",
    "ReadJsonFile",
    "WriteJsonFile",
    "IterJsonLines",
    "ReadJsonLines",
    "WriteJsonLines",
]

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_HEADER_SIZE = len(SFT1_MAGIC) + 4


def EncodeTensorBytes(data: Union[Tensor, np.ndarray]) -> bytes:
    """将张量编码为 SFT1 格式

    格式为：魔数 SFT1、u32 小端秩、秩个 u32 小端维度长度、按行优先排列的 f64 小端数值

    Args:
        data (Union[Tensor, np.ndarray]): 张量或数组

    Returns:
        bytes: 编码结果
    """
    array = np.ascontiguousarray(data.data if isinstance(data, Tensor) else data, dtype="<f8")
    header = SFT1_MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    return header + array.tobytes(order="C")


def DecodeTensorBytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    """解码 SFT1 格式数据

    Args:
        buf (bytes): SFT1 格式数据
        source (str, optional): 数据来源，用于报错信息. Defaults to "<bytes>".

    Raises:
        ResourceError: 魔数错误、数据被截断或有多余数据时抛出此错误

    Returns:
        np.ndarray: float64 数组
    """
    if len(buf) < len(SFT1_MAGIC) or buf[: len(SFT1_MAGIC)] != SFT1_MAGIC:
        raise ResourceError(f"{source}：偏移 0 处魔数错误，不是 SFT1 张量文件")
    if len(buf) < _HEADER_SIZE:
        raise ResourceError(f"{source}：偏移 {len(buf)} 处数据被截断，缺少秩字段")
    (rank,) = struct.unpack_from("<I", buf, len(SFT1_MAGIC))
    shape_end = _HEADER_SIZE + 4 * rank
    if len(buf) < shape_end:
        raise ResourceError(f"{source}：偏移 {len(buf)} 处数据被截断，缺少维度字段")
    shape = struct.unpack_from(f"<{rank}I", buf, _HEADER_SIZE)
    expected_end = shape_end + 8 * int(np.prod(shape, dtype=np.int64))
    if len(buf) < expected_end:
        raise ResourceError(
            f"{source}：偏移 {len(buf)} 处数据被截断，形状 {shape} 需要 {expected_end} 字节"
        )
    if len(buf) > expected_end:
        raise ResourceError(f"{source}：偏移 {expected_end} 处存在多余数据")
    return np.frombuffer(buf, dtype="<f8", offset=shape_end).astype(np.float64).reshape(shape)


def WriteTensorFile(path: PathLike, data: Union[Tensor, np.ndarray]) -> None:
    Path(path).write_bytes(EncodeTensorBytes(data))


def ReadTensorFile(path: PathLike) -> np.ndarray:
    """读取 SFT1 张量文件

    Args:
        path (PathLike): 文件路径

    Raises:
        ResourceError: 文件不存在或格式错误时抛出此错误

    Returns:
        np.ndarray: float64 数组
    """
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise ResourceError(f"无法读取张量文件 {path}：{e.strerror}") from e
    return DecodeTensorBytes(buf, str(path))


def DumpJson(obj: Any) -> str:
    """以排序键、缩进 2 的形式序列化为 JSON，输出字节稳定"""
    return json_dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def ReadJsonFile(path: PathLike) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ResourceError(f"无法读取 JSON 文件 {path}：{e.strerror}") from e
    try:
        return json_loads(text)
    except ValueError as e:
        raise ResourceError(f"{path}：JSON 解析失败：{e}") from e


def WriteJsonFile(path: PathLike, obj: Any) -> None:
    Path(path).write_text(DumpJson(obj), encoding="utf-8")


def IterJsonLines(path: PathLike) -> Iterator[Tuple[int, Dict]]:
    """逐行读取 JSONL 文件，跳过空行

    Args:
        path (PathLike): 文件路径

    Raises:
        ResourceError: 文件无法读取或某行不是 JSON 对象时抛出此错误，信息中包含行号

    Yields:
        Iterator[Tuple[int, Dict]]: (行号, 对象)，行号从 1 开始
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ResourceError(f"无法读取 JSONL 文件 {path}：{e.strerror}") from e
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json_loads(line)
        except ValueError as e:
            raise ResourceError(f"{path} 第 {line_number} 行：JSON 解析失败：{e}") from e
        if not isinstance(obj, dict):
            raise ResourceError(f"{path} 第 {line_number} 行：应为 JSON 对象")
        yield line_number, obj


def ReadJsonLines(path: PathLike) -> List[Dict]:
    result = [obj for _, obj in IterJsonLines(path)]
    if not result:
        logger.warning("JSONL 文件 %s 为空", path)
    return result


def WriteJsonLines(path: PathLike, objs: List[Dict]) -> None:
    text = "".join(
        json_dumps(obj, sort_keys=True, ensure_ascii=False) + "\n" for obj in objs
    )
    Path(path).write_text(text, encoding="utf-8")
