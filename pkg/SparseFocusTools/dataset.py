"""合成双时相变化数据集

偶数下标的样本有变化（在某个象限加入或移除一个彩色形状），奇数下标的样本无变化，
两类数量平衡。每个样本附 1~5 条描述，第一条为规范描述。
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .assert_funcs import AssertInRange, AssertPositiveInt
from .basic_io import IterJsonLines, ReadTensorFile, WriteJsonLines, WriteTensorFile
from .constants import NO_CHANGE_CAPTIONS
from .exceptions import ResourceError
from .tensor import Tensor

__all__ = [
    "SHAPES",
    "COLOURS",
    "QUADRANTS",
    "ChangeRecord",
    "SyntheticSample",
    "GenerateDataset",
    "WriteDataset",
    "LoadManifest",
    "AllCaptions",
]

logger = logging.getLogger(__name__)

SHAPES = ("square", "circle")
COLOURS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.1, 0.2, 0.9),
}
# 象限名称到 (行起点, 列起点) 的半幅偏移
QUADRANTS = {
    "top left": (0, 0),
    "top right": (0, 1),
    "bottom left": (1, 0),
    "bottom right": (1, 1),
}

_CAPTION_TEMPLATES = {
    "added": (
        "a {colour} {shape} was added in the {quadrant}",
        "a {colour} {shape} has appeared in the {quadrant}",
        "there is a new {colour} {shape} in the {quadrant}",
        "someone placed a {colour} {shape} in the {quadrant}",
        "the {quadrant} now contains a {colour} {shape}",
    ),
    "removed": (
        "a {colour} {shape} was removed from the {quadrant}",
        "the {colour} {shape} in the {quadrant} has disappeared",
        "the {colour} {shape} is gone from the {quadrant}",
        "someone took away the {colour} {shape} in the {quadrant}",
        "the {quadrant} no longer contains a {colour} {shape}",
    ),
}


@dataclass(frozen=True)
class ChangeRecord:
    """一次编辑：kind 为 added 或 removed，box 为 (行起点, 列起点, 行终点, 列终点)，终点不含"""

    kind: str
    shape: str
    colour: str
    quadrant: str
    box: Tuple[int, int, int, int]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "shape": self.shape,
            "colour": self.colour,
            "quadrant": self.quadrant,
            "box": list(self.box),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ChangeRecord":
        return cls(
            kind=data["kind"],
            shape=data["shape"],
            colour=data["colour"],
            quadrant=data["quadrant"],
            box=tuple(data["box"]),  # type: ignore
        )


@dataclass(frozen=True)
class SyntheticSample:
    img1: Tensor
    img2: Tensor
    captions: Tuple[str, ...]
    change: Optional[ChangeRecord]
    image_id: str

    @property
    def is_change(self) -> bool:
        return self.change is not None


def _Background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.3, 0.5, size=(3, 1, 1))
    image = base + rng.uniform(-0.05, 0.05, size=(3, size, size))
    # 两个时相共有的灰色干扰块
    for _ in range(rng.integers(0, 3)):
        r, c = rng.integers(0, size - 6, size=2)
        h, w = rng.integers(3, 7, size=2)
        image[:, r : r + h, c : c + w] = rng.uniform(0.55, 0.7)
    return image


def _Draw(image: np.ndarray, change: ChangeRecord) -> np.ndarray:
    r0, c0, r1, c1 = change.box
    region = np.zeros(image.shape[1:], dtype=bool)
    if change.shape == "square":
        region[r0:r1, c0:c1] = True
    else:
        rows, cols = np.ogrid[: image.shape[1], : image.shape[2]]
        center_r, center_c = (r0 + r1 - 1) / 2, (c0 + c1 - 1) / 2
        radius = (r1 - r0) / 2
        region = (rows - center_r) ** 2 + (cols - center_c) ** 2 <= radius**2
    drawn = image.copy()
    drawn[:, region] = np.array(COLOURS[change.colour])[:, None]
    return drawn


def _RandomChange(rng: np.random.Generator, size: int) -> ChangeRecord:
    kind = ("added", "removed")[rng.integers(0, 2)]
    shape = SHAPES[rng.integers(0, len(SHAPES))]
    colour = sorted(COLOURS)[rng.integers(0, len(COLOURS))]
    quadrant = list(QUADRANTS)[rng.integers(0, len(QUADRANTS))]
    half = size // 2
    side = int(rng.integers(half // 4, half // 2 + 1))
    quad_r, quad_c = QUADRANTS[quadrant]
    r0 = quad_r * half + int(rng.integers(0, half - side + 1))
    c0 = quad_c * half + int(rng.integers(0, half - side + 1))
    return ChangeRecord(kind, shape, colour, quadrant, (r0, c0, r0 + side, c0 + side))


def _Captions(change: Optional[ChangeRecord], count: int) -> Tuple[str, ...]:
    if change is None:
        return NO_CHANGE_CAPTIONS[:count]
    templates = _CAPTION_TEMPLATES[change.kind][:count]
    return tuple(
        t.format(colour=change.colour, shape=change.shape, quadrant=change.quadrant)
        for t in templates
    )


def AllCaptions() -> Tuple[str, ...]:
    """生成器可能输出的全部描述，用于构建完整词表"""
    captions = list(NO_CHANGE_CAPTIONS)
    for kind, templates in _CAPTION_TEMPLATES.items():
        for shape in SHAPES:
            for colour in COLOURS:
                for quadrant in QUADRANTS:
                    change = ChangeRecord(kind, shape, colour, quadrant, (0, 0, 0, 0))
                    captions.extend(_Captions(change, len(templates)))
    return tuple(captions)


def GenerateDataset(
    n: int, seed: int, captions_per_sample: int = 5, image_size: int = 64
) -> List[SyntheticSample]:
    """生成合成双时相变化数据集

    Args:
        n (int): 样本数量
        seed (int): 随机种子，相同种子得到完全相同的数据集
        captions_per_sample (int, optional): 每个样本的描述数量，1~5. Defaults to 5.
        image_size (int, optional): 图像边长. Defaults to 64.

    Returns:
        List[SyntheticSample]: 样本列表，偶数下标为变化样本
    """
    AssertPositiveInt(n, "n")
    AssertPositiveInt(image_size, "image_size")
    AssertInRange(captions_per_sample, 1, 5, "captions_per_sample")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        background = _Background(rng, image_size)
        change = _RandomChange(rng, image_size) if i % 2 == 0 else None
        img1 = img2 = background
        if change is not None:
            drawn = _Draw(background, change)
            img1, img2 = (background, drawn) if change.kind == "added" else (drawn, background)
        samples.append(
            SyntheticSample(
                img1=Tensor(np.clip(img1, 0.0, 1.0)),
                img2=Tensor(np.clip(img2, 0.0, 1.0)),
                captions=_Captions(change, captions_per_sample),
                change=change,
                image_id=f"{i:05d}",
            )
        )
    logger.info("生成了 %d 个样本（种子 %d）", n, seed)
    return samples


def WriteDataset(samples: List[SyntheticSample], directory: Union[str, Path]) -> Path:
    """写入数据集：images/ 下为 SFT1 图像，manifest.jsonl 中的路径相对于清单所在目录

    Args:
        samples (List[SyntheticSample]): 样本列表
        directory (Union[str, Path]): 输出目录

    Returns:
        Path: 清单文件路径
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for sample in samples:
        t1 = f"images/{sample.image_id}_t1.sft"
        t2 = f"images/{sample.image_id}_t2.sft"
        WriteTensorFile(directory / t1, sample.img1)
        WriteTensorFile(directory / t2, sample.img2)
        lines.append(
            {
                "image_id": sample.image_id,
                "t1": t1,
                "t2": t2,
                "captions": list(sample.captions),
                "change": None if sample.change is None else sample.change.to_dict(),
            }
        )
    manifest = directory / "manifest.jsonl"
    WriteJsonLines(manifest, lines)
    return manifest


def _ParseManifestLine(
    obj: Dict[str, Any], line_number: int, manifest: Path
) -> SyntheticSample:
    where = f"{manifest} 第 {line_number} 行"
    for key in ("t1", "t2"):
        if not isinstance(obj.get(key), str):
            raise ResourceError(f"{where}：缺少图像路径字段 {key}")
    captions = obj.get("captions")
    if (
        not isinstance(captions, list)
        or not 1 <= len(captions) <= 5
        or not all(isinstance(c, str) and c.strip() for c in captions)
    ):
        raise ResourceError(f"{where}：captions 应为 1~5 条非空字符串")
    try:
        img1 = ReadTensorFile(manifest.parent / obj["t1"])
        img2 = ReadTensorFile(manifest.parent / obj["t2"])
    except ResourceError as e:
        raise ResourceError(f"{where}：{e}") from e
    if img1.ndim != 3 or img1.shape != img2.shape:
        raise ResourceError(f"{where}：两个时相的图像形状 {img1.shape} 与 {img2.shape} 不一致")
    try:
        change = None if obj.get("change") is None else ChangeRecord.from_dict(obj["change"])
    except (KeyError, TypeError) as e:
        raise ResourceError(f"{where}：change 字段格式错误") from e
    return SyntheticSample(
        img1=Tensor(img1),
        img2=Tensor(img2),
        captions=tuple(captions),
        change=change,
        image_id=str(obj.get("image_id", f"{line_number:05d}")),
    )


def LoadManifest(path: Union[str, Path]) -> List[SyntheticSample]:
    """读取 JSONL 数据集清单

    Args:
        path (Union[str, Path]): 清单文件路径，或包含 manifest.jsonl 的目录

    Raises:
        ResourceError: 清单某行格式错误、图像文件缺失或损坏时抛出此错误

    Returns:
        List[SyntheticSample]: 样本列表，空文件返回空列表
    """
    manifest = Path(path)
    if manifest.is_dir():
        manifest = manifest / "manifest.jsonl"
    samples = [
        _ParseManifestLine(obj, line_number, manifest)
        for line_number, obj in IterJsonLines(manifest)
    ]
    if not samples:
        logger.warning("数据集清单 %s 为空", manifest)
    return samples
