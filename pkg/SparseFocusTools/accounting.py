"""参数量与乘加运算量（MAC）统计

全部为由配置推导的解析计数。一次乘法加一次累加记为 1 MAC，
softmax、残差相加与归一化不计入。
"""

from dataclasses import dataclass, field, replace
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from .attention import AxialVariant, GetNeighborhoodTable
from .basic_io import ReadTensorFile
from .exceptions import ContractError, ResourceError
from .model import ModelConfig
from .utils import AlignedColumnsToString

__all__ = [
    "CostReport",
    "ComparisonRow",
    "CountParams",
    "CountMacs",
    "AxialLogitMacs",
    "DenseBaselineConfig",
    "Compare",
    "AblationGrid",
    "FormatCostReport",
    "FormatComparison",
    "CountCheckpointParams",
]


@dataclass(frozen=True)
class CostReport:
    name: str
    params: Dict[str, int] = field(default_factory=dict)
    macs: Dict[str, int] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    def section_total(self, kind: str, section: str) -> int:
        """统计名称为 section 或以 section. 开头的各项之和"""
        values = self.params if kind == "params" else self.macs
        return sum(v for k, v in values.items() if k == section or k.startswith(section + "."))

    def merge(self, other: "CostReport") -> "CostReport":
        return CostReport(
            name=self.name,
            params={**self.params, **other.params},
            macs={**self.macs, **other.macs},
            metadata={**self.metadata, **other.metadata},
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "params": dict(self.params),
            "macs": dict(self.macs),
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "metadata": self.metadata,
        }


@dataclass(frozen=True)
class ComparisonRow:
    baseline: str
    candidate: str
    kind: str
    key: str
    baseline_value: int
    candidate_value: int
    ratio: Optional[Fraction]

    @property
    def reduction_percent(self) -> Optional[float]:
        return None if self.ratio is None else float((1 - self.ratio) * 100)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "baseline": self.baseline,
            "candidate": self.candidate,
            "kind": self.kind,
            "key": self.key,
            "baseline_value": self.baseline_value,
            "candidate_value": self.candidate_value,
            "ratio": None if self.ratio is None else str(self.ratio),
            "reduction_percent": self.reduction_percent,
        }


def _Linear(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def CountParams(cfg: ModelConfig, vocab_size: int) -> CostReport:
    """按子模块统计参数量（含偏置）

    Args:
        cfg (ModelConfig): 模型配置
        vocab_size (int): 词表大小

    Returns:
        CostReport: 参数量报告，MAC 为空
    """
    ext, sft, dec = cfg.extractor, cfg.sft, cfg.decoder
    C, reduced, d = sft.C, sft.C_reduced, dec.d_embed
    params = {
        "extractor": ext.hidden * ext.in_channels * 16
        + ext.hidden
        + ext.C * ext.hidden * 4
        + ext.C
    }
    for i in range(sft.R):
        params[f"encoder.layer{i}"] = 2 * _Linear(C, reduced) + _Linear(C, C)
    params["adapter"] = _Linear(2 * C, d)
    params["decoder.embed"] = vocab_size * d
    for i in range(dec.n_layers):
        params[f"decoder.layer{i}"] = (
            2 * 4 * _Linear(d, d)
            + _Linear(d, dec.d_ffn)
            + _Linear(dec.d_ffn, d)
            + 3 * 2 * d
        )
    params["decoder.head"] = _Linear(d, vocab_size)
    return CostReport(
        name=_ReportName(cfg),
        params=params,
        metadata={"config": cfg.to_dict(), "vocab_size": vocab_size},
    )


def AxialLogitMacs(W: int, H: int, variant: AxialVariant, channels: int) -> int:
    """轴向注意力 logit 阶段的 MAC：Σ_p |N(p)|·channels"""
    _, valid = GetNeighborhoodTable(W, H, variant)
    return int(valid.sum()) * channels


def CountMacs(
    cfg: ModelConfig,
    vocab_size: int,
    caption_length: Optional[int] = None,
    dense: bool = False,
) -> CostReport:
    """按阶段统计一次前向（两个时相各一张图像加一条描述）的 MAC

    Args:
        cfg (ModelConfig): 模型配置
        vocab_size (int): 词表大小
        caption_length (Optional[int], optional): 描述长度，默认为 max_len. Defaults to None.
        dense (bool, optional): 编码器改用全部 W·H 个像素的稠密注意力. Defaults to False.

    Returns:
        CostReport: MAC 报告，参数量为空
    """
    ext, sft, dec = cfg.extractor, cfg.sft, cfg.decoder
    n = dec.max_len if caption_length is None else caption_length
    if n < 1:
        raise ContractError(f"描述长度应为正整数，实际为 {n}")
    C, reduced, d, P = sft.C, sft.C_reduced, dec.d_embed, sft.W * sft.H
    size1, size2 = ext.image_size // 4, ext.image_size // 8
    if dense:
        logit = P * P * reduced
        aggregate = P * P * C
    else:
        logit = AxialLogitMacs(sft.W, sft.H, sft.variant, reduced)
        aggregate = AxialLogitMacs(sft.W, sft.H, sft.variant, C)
    macs = {
        "extractor.conv1": 2 * size1 * size1 * ext.hidden * ext.in_channels * 16,
        "extractor.conv2": 2 * size2 * size2 * ext.C * ext.hidden * 4,
        "encoder.projection": 2 * sft.R * P * (2 * C * reduced + C * C),
        "encoder.logit": 2 * sft.R * logit,
        "encoder.aggregate": 2 * sft.R * aggregate,
        "adapter": P * 2 * C * d,
        "decoder.self_attn": dec.n_layers * (4 * n * d * d + 2 * n * n * d),
        "decoder.cross_attn": dec.n_layers * (2 * n * d * d + 2 * P * d * d + 2 * n * P * d),
        "decoder.ffn": dec.n_layers * 2 * n * d * dec.d_ffn,
        "decoder.head": n * d * vocab_size,
    }
    return CostReport(
        name=_ReportName(cfg, dense),
        macs=macs,
        metadata={
            "config": cfg.to_dict(),
            "vocab_size": vocab_size,
            "caption_length": n,
            "attention": "dense" if dense else "sparse",
        },
    )


def DenseBaselineConfig(cfg: ModelConfig) -> ModelConfig:
    """稠密注意力基线的配置：Q、K 不做通道缩减（C' = C）"""
    return replace(cfg, sft=replace(cfg.sft, C_reduced=cfg.sft.C))


def _ReportName(cfg: ModelConfig, dense: bool = False) -> str:
    if dense:
        return f"dense C'={cfg.sft.C_reduced} R={cfg.sft.R}"
    return f"{cfg.sft.variant} R={cfg.sft.R}"


def Compare(reports: Sequence[CostReport]) -> List[ComparisonRow]:
    """两两比较报告，给出各项与各段合计的比值（候选/基线）

    Args:
        reports (Sequence[CostReport]): 至少两份报告，排在前面的作为基线

    Returns:
        List[ComparisonRow]: 比较结果，基线为 0 时比值为 None
    """
    if len(reports) < 2:
        raise ContractError(f"至少需要两份报告才能比较，实际为 {len(reports)} 份")
    rows = []
    for baseline, candidate in combinations(reports, 2):
        for kind in ("params", "macs"):
            base_values: Dict[str, int] = getattr(baseline, kind)
            cand_values: Dict[str, int] = getattr(candidate, kind)
            leaves = [k for k in base_values if k in cand_values]
            sections = sorted({k.split(".")[0] for k in leaves} - set(leaves))
            for key in [*leaves, *sections, "total"]:
                if key == "total":
                    b, c = sum(base_values.values()), sum(cand_values.values())
                else:
                    b, c = baseline.section_total(kind, key), candidate.section_total(kind, key)
                rows.append(
                    ComparisonRow(
                        baseline=baseline.name,
                        candidate=candidate.name,
                        kind=kind,
                        key=key,
                        baseline_value=b,
                        candidate_value=c,
                        ratio=Fraction(c, b) if b else None,
                    )
                )
    return rows


def AblationGrid(cfg: ModelConfig, vocab_size: int) -> List[CostReport]:
    """消融网格：R ∈ {1, 2} × {整行整列, 长度为 W/2 的窗口}，最后附稠密注意力基线"""
    reports = []
    fixed_length = max(1, max(cfg.sft.W, cfg.sft.H) // 2)
    for R in (1, 2):
        for variant in (AxialVariant.full(), AxialVariant.fixed(fixed_length)):
            variant_cfg = replace(cfg, sft=replace(cfg.sft, R=R, variant=variant))
            reports.append(
                CountParams(variant_cfg, vocab_size).merge(CountMacs(variant_cfg, vocab_size))
            )
    dense_cfg = DenseBaselineConfig(cfg)
    dense = CountParams(dense_cfg, vocab_size).merge(CountMacs(dense_cfg, vocab_size, dense=True))
    reports.append(replace(dense, name=_ReportName(dense_cfg, dense=True)))
    return reports


def FormatCostReport(report: CostReport) -> str:
    """以列对齐文本输出报告"""
    keys = list(dict.fromkeys([*report.params, *report.macs]))
    rows: List[List[Any]] = [
        [key, report.params.get(key, "-"), report.macs.get(key, "-")] for key in keys
    ]
    rows.append(["total", report.total_params, report.total_macs])
    return f"{report.name}\n" + AlignedColumnsToString(["module", "params", "macs"], rows)


def FormatComparison(rows: Sequence[ComparisonRow]) -> str:
    table = []
    for row in rows:
        ratio = "-" if row.ratio is None else f"{float(row.ratio):.4f}"
        reduction = "-" if row.reduction_percent is None else f"{row.reduction_percent:.1f}%"
        table.append(
            [
                f"{row.candidate} vs {row.baseline}",
                row.kind,
                row.key,
                row.baseline_value,
                row.candidate_value,
                ratio,
                reduction,
            ]
        )
    return AlignedColumnsToString(
        ["comparison", "kind", "key", "baseline", "candidate", "ratio", "reduction"], table
    )


def CountCheckpointParams(directory: Union[str, Path]) -> int:
    """遍历检查点 tensors/ 目录，统计全部张量的元素数"""
    tensors = Path(directory) / "tensors"
    if not tensors.is_dir():
        raise ResourceError(f"检查点目录 {directory} 中没有 tensors 子目录")
    return sum(ReadTensorFile(path).size for path in sorted(tensors.glob("*.sft")))
