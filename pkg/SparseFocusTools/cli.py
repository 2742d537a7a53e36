"""命令行入口

子命令：gen-data、train、decode、eval、count、bench。
退出码：0 成功，1 参数或契约错误（训练发散与数值错误同样视为契约错误），2 文件读写错误。
"""

import logging
import sys
from argparse import ArgumentParser, Namespace
from dataclasses import replace
from pathlib import Path
from time import perf_counter
from typing import Any, Callable, Dict, List, NoReturn, Optional, Sequence

import numpy as np

from . import __version__
from .accounting import (
    AblationGrid,
    Compare,
    CountCheckpointParams,
    CountMacs,
    CountParams,
    FormatComparison,
    FormatCostReport,
)
from .assert_funcs import AssertNonEmpty
from .attention import DenseMaskedAttention
from .basic_io import IterJsonLines, WriteJsonFile, WriteJsonLines
from .config import (
    ApplyOverrides,
    BuildModelConfig,
    BuildTrainConfig,
    ConfigToDict,
    LoadConfigFile,
    ResolveSeed,
    RunConfig,
)
from .dataset import AllCaptions, GenerateDataset, LoadManifest, WriteDataset
from .decoder import BuildVocabulary
from .encoder import BitemporalFeatures, Encode, InitSftLayerParams, SftConfig
from .exceptions import (
    ConfigError,
    ContractError,
    DivergenceError,
    InputError,
    NumericalError,
    ResourceError,
)
from .metrics import EvalPair, EvaluateCorpus, WritePairCsv
from .model import InitModelParams, LoadCheckpoint, ModelConfig, SaveCheckpoint
from .objects import CaptionModel
from .tensor import PointwiseConv, Tensor
from .training import Train

__all__ = ["EXIT_OK", "EXIT_INPUT", "EXIT_RESOURCE", "Dispatch", "main"]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_RESOURCE = 2

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
TIMING_LABEL = "本机单次前向耗时，仅供相对比较，不可与公开的推理时间对比"


class _ArgumentParser(ArgumentParser):
    """参数错误时输出用法并以退出码 1 结束"""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: 错误：{message}\n")


def _BuildParser() -> ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="随机种子，优先于环境变量 SFT_SEED")
    common.add_argument("--config", default=None, help="JSON 配置文件")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="覆盖配置项，值按 JSON 解析，可重复",
    )
    common.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="日志级别",
    )

    parser = _ArgumentParser(prog="sft", description="稀疏聚焦变化描述工具集")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen-data", parents=[common], help="生成合成数据集")
    gen.add_argument("--n", type=int, default=16, help="样本数量")
    gen.add_argument("--captions", type=int, default=5, help="每个样本的描述数量")
    gen.add_argument("--out", required=True, help="输出目录")

    train = subparsers.add_parser("train", parents=[common], help="训练模型")
    train.add_argument("--data", required=True, help="数据集目录或清单文件")
    train.add_argument("--steps", type=int, default=None, help="训练步数，覆盖 train.steps")
    train.add_argument("--progress", action="store_true", help="显示进度条，需要安装 tqdm")
    train.add_argument("--out", required=True, help="检查点输出目录")

    decode = subparsers.add_parser("decode", parents=[common], help="贪心解码生成描述")
    decode.add_argument("--checkpoint", required=True, help="检查点目录")
    decode.add_argument("--data", required=True, help="数据集目录或清单文件")
    decode.add_argument("--out", required=True, help="输出目录")

    evaluate = subparsers.add_parser("eval", parents=[common], help="计算描述质量指标")
    evaluate.add_argument("--input", required=True, help="decode 输出的 JSONL 文件")
    evaluate.add_argument("--rouge-mode", default="literal", choices=["literal", "fmeasure"])
    evaluate.add_argument("--out", required=True, help="输出目录")

    count = subparsers.add_parser("count", parents=[common], help="统计参数量与 MAC")
    count.add_argument("--checkpoint", default=None, help="检查点目录，指定时使用其中的配置与词表")
    count.add_argument("--vocab-size", type=int, default=None, help="词表大小，默认为合成数据集的完整词表")
    count.add_argument("--caption-length", type=int, default=None, help="描述长度，默认为 max_len")
    count.add_argument("--dense", action="store_true", help="编码器改用稠密注意力")
    count.add_argument("--out", default=".", help="输出目录")

    bench = subparsers.add_parser("bench", parents=[common], help="消融网格与稠密基线对比")
    bench.add_argument("--vocab-size", type=int, default=None, help="词表大小，默认为合成数据集的完整词表")
    bench.add_argument("--time", action="store_true", help="附带本机编码器前向耗时")
    bench.add_argument("--repeat", type=int, default=3, help="计时重复次数，取最小值")
    bench.add_argument("--out", default=".", help="输出目录")
    return parser


def _LoadData(args: Namespace) -> Dict[str, Dict[str, Any]]:
    return ApplyOverrides(LoadConfigFile(args.config), args.overrides)


def _WriteRunRecord(
    directory: Path, args: Namespace, seed: int, resolved: Dict[str, Any], paths: Dict[str, str]
) -> None:
    record = RunConfig(
        command=args.command,
        seed=seed,
        config_path=args.config,
        overrides=list(args.overrides),
        paths=paths,
        resolved=resolved,
    )
    WriteJsonFile(directory / "run.json", {**record.to_dict(), "version": __version__})


def _DefaultVocabSize(flag: Optional[int]) -> int:
    if flag is not None:
        if flag < 1:
            raise ConfigError(f"--vocab-size 应为正整数，实际为 {flag}")
        return flag
    return len(BuildVocabulary(AllCaptions()))


def _CheckImageSize(samples: Sequence[Any], cfg: ModelConfig) -> None:
    size = cfg.extractor.image_size
    expected = (cfg.extractor.in_channels, size, size)
    if samples and samples[0].img1.shape != expected:
        raise ConfigError(
            f"数据集图像形状 {samples[0].img1.shape} 与配置要求的 {expected} 不一致，"
            "请通过 --set extractor.image_size=... 调整"
        )


def RunGenData(args: Namespace) -> int:
    data = _LoadData(args)
    seed = ResolveSeed(args.seed, data)
    cfg = BuildModelConfig(data)
    out = Path(args.out)
    samples = GenerateDataset(args.n, seed, args.captions, cfg.extractor.image_size)
    manifest = WriteDataset(samples, out)
    _WriteRunRecord(
        out,
        args,
        seed,
        {"n": args.n, "captions": args.captions, "image_size": cfg.extractor.image_size},
        {"out": str(out), "manifest": str(manifest)},
    )
    print(f"已生成 {len(samples)} 个样本：{manifest}")
    return EXIT_OK


def RunTrain(args: Namespace) -> int:
    data = _LoadData(args)
    if args.steps is not None:
        data["train"]["steps"] = args.steps
    seed = ResolveSeed(args.seed, data)
    model_cfg = BuildModelConfig(data)
    train_cfg = BuildTrainConfig(data, seed)

    samples = LoadManifest(args.data)
    AssertNonEmpty(samples, "训练样本")
    _CheckImageSize(samples, model_cfg)
    vocab = BuildVocabulary(caption for sample in samples for caption in sample.captions)
    params = InitModelParams(model_cfg, len(vocab), seed)
    logger.info("开始训练：%d 个样本，词表大小 %d，%d 步", len(samples), len(vocab), train_cfg.steps)
    result = Train(samples, params, model_cfg, vocab, train_cfg, progress=args.progress)

    out = Path(args.out)
    SaveCheckpoint(out, result.params, model_cfg, vocab)
    WriteJsonFile(
        out / "train_log.json",
        {"losses": result.losses, "final_lr": result.final_lr, "steps": len(result.losses)},
    )
    _WriteRunRecord(
        out,
        args,
        seed,
        ConfigToDict(model_cfg, train_cfg),
        {"data": str(args.data), "out": str(out)},
    )
    print(f"训练完成，最终损失 {result.losses[-1]:.6f}，检查点：{out}")
    return EXIT_OK


def RunDecode(args: Namespace) -> int:
    data = _LoadData(args)
    seed = ResolveSeed(args.seed, data)
    model = CaptionModel.from_checkpoint(args.checkpoint)
    samples = LoadManifest(args.data)
    _CheckImageSize(samples, model.config)

    rows = []
    for sample in samples:
        sequence = model.caption_sequence(sample.img1, sample.img2)
        caption = model.vocab.decode(sequence.ids)
        if not caption:
            logger.warning("样本 %s 生成了空描述", sample.image_id)
        rows.append(
            {
                "image_id": sample.image_id,
                "caption": caption,
                "truncated": sequence.truncated,
                "references": list(sample.captions),
                "truth": "change" if sample.is_change else "no-change",
            }
        )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    WriteJsonLines(out / "captions.jsonl", rows)
    _WriteRunRecord(
        out,
        args,
        seed,
        ConfigToDict(model.config),
        {"checkpoint": str(args.checkpoint), "data": str(args.data), "out": str(out)},
    )
    print(f"已生成 {len(rows)} 条描述：{out / 'captions.jsonl'}")
    return EXIT_OK


def _ParsePairRow(obj: Dict[str, Any], line_number: int, path: Path) -> EvalPair:
    # decode 的输出以 caption 记录生成描述
    generated = obj.get("generated", obj.get("caption"))
    if generated is None:
        raise ResourceError(f"{path} 第 {line_number} 行缺少字段 'generated' 或 'caption'")
    if "references" not in obj:
        raise ResourceError(f"{path} 第 {line_number} 行缺少字段 'references'")
    references = obj["references"]
    if not isinstance(generated, str) or not isinstance(references, list):
        raise ResourceError(f"{path} 第 {line_number} 行的 generated 应为字符串，references 应为列表")
    return EvalPair.from_texts(
        generated,
        [str(r) for r in references],
        image_id=str(obj.get("image_id", f"{line_number:05d}")),
        truth=obj.get("truth"),
    )


def RunEval(args: Namespace) -> int:
    data = _LoadData(args)
    seed = ResolveSeed(args.seed, data)
    path = Path(args.input)
    pairs = [_ParsePairRow(obj, line_number, path) for line_number, obj in IterJsonLines(path)]
    AssertNonEmpty(pairs, "评估样本")
    report, rows = EvaluateCorpus(pairs, rouge_mode=args.rouge_mode)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    WriteJsonFile(out / "report.json", report.to_dict())
    WritePairCsv(rows, out / "pairs.csv")
    _WriteRunRecord(
        out,
        args,
        seed,
        {"rouge_mode": args.rouge_mode, "pairs": len(pairs)},
        {"input": str(path), "out": str(out)},
    )
    print(report)
    return EXIT_OK


def RunCount(args: Namespace) -> int:
    data = _LoadData(args)
    seed = ResolveSeed(args.seed, data)
    checkpoint_params = None
    if args.checkpoint is not None:
        if args.config is not None or args.overrides:
            logger.warning("已指定检查点，忽略 --config 与 --set")
        _, cfg, vocab = LoadCheckpoint(args.checkpoint)
        vocab_size = len(vocab)
        checkpoint_params = CountCheckpointParams(args.checkpoint)
    else:
        cfg = BuildModelConfig(data)
        vocab_size = _DefaultVocabSize(args.vocab_size)

    report = CountParams(cfg, vocab_size).merge(
        CountMacs(cfg, vocab_size, caption_length=args.caption_length, dense=args.dense)
    )
    if checkpoint_params is not None and checkpoint_params != report.total_params:
        raise ContractError(
            f"检查点元素总数 {checkpoint_params} 与解析参数量 {report.total_params} 不一致"
        )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    WriteJsonFile(out / "cost_report.json", report.to_dict())
    (out / "cost_report.txt").write_text(FormatCostReport(report), encoding="utf-8")
    _WriteRunRecord(
        out,
        args,
        seed,
        {**ConfigToDict(cfg), "vocab_size": vocab_size},
        {"out": str(out), **({"checkpoint": str(args.checkpoint)} if args.checkpoint else {})},
    )
    print(FormatCostReport(report), end="")
    return EXIT_OK


def _TimeOnce(func: Callable[[], Any], repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        start = perf_counter()
        func()
        best = min(best, perf_counter() - start)
    return best


def _TimeEncoders(cfg: SftConfig, seed: int, repeat: int) -> Dict[str, Any]:
    rng = np.random.default_rng(seed)
    layers = [InitSftLayerParams(cfg, rng) for _ in range(cfg.R)]
    f1 = Tensor(rng.standard_normal((cfg.C, cfg.W, cfg.H)))
    f2 = Tensor(rng.standard_normal((cfg.C, cfg.W, cfg.H)))
    bt = BitemporalFeatures(f1, f2)

    dense_cfg = replace(cfg, C_reduced=cfg.C)
    dense_layers = [InitSftLayerParams(dense_cfg, rng) for _ in range(cfg.R)]
    mask = np.ones((cfg.W * cfg.H, cfg.W * cfg.H), dtype=bool)

    def DenseEncode() -> List[Tensor]:
        outputs = []
        for f in (f1, f2):
            for p in dense_layers:
                q = PointwiseConv(f, p.wq, p.bq)
                k = PointwiseConv(f, p.wk, p.bk)
                v = PointwiseConv(f, p.wv, p.bv)
                f = DenseMaskedAttention(q, k, v, f, mask, cfg.scale_qk, disable_check=True)
            outputs.append(f)
        return outputs

    return {
        "label": TIMING_LABEL,
        "repeat": repeat,
        "sparse_encoder_seconds": _TimeOnce(
            lambda: Encode(bt, layers, cfg, disable_check=True), repeat
        ),
        "dense_encoder_seconds": _TimeOnce(DenseEncode, repeat),
    }


def RunBench(args: Namespace) -> int:
    data = _LoadData(args)
    seed = ResolveSeed(args.seed, data)
    cfg = BuildModelConfig(data)
    vocab_size = _DefaultVocabSize(args.vocab_size)
    reports = AblationGrid(cfg, vocab_size)
    rows = Compare(reports)
    result: Dict[str, Any] = {
        "reports": [report.to_dict() for report in reports],
        "comparison": [row.to_dict() for row in rows],
    }
    if args.time:
        if args.repeat < 1:
            raise ConfigError(f"--repeat 应为正整数，实际为 {args.repeat}")
        result["timing"] = _TimeEncoders(cfg.sft, seed, args.repeat)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    WriteJsonFile(out / "bench.json", result)
    text = "\n".join(FormatCostReport(report) for report in reports)
    text += "\n" + FormatComparison(rows)
    (out / "bench.txt").write_text(text, encoding="utf-8")
    _WriteRunRecord(
        out,
        args,
        seed,
        {**ConfigToDict(cfg), "vocab_size": vocab_size, "time": args.time},
        {"out": str(out)},
    )
    print(text, end="")
    if args.time:
        timing = result["timing"]
        print(
            f"{TIMING_LABEL}：稀疏 {timing['sparse_encoder_seconds']:.4f}s，"
            f"稠密 {timing['dense_encoder_seconds']:.4f}s"
        )
    return EXIT_OK


_COMMANDS: Dict[str, Callable[[Namespace], int]] = {
    "gen-data": RunGenData,
    "train": RunTrain,
    "decode": RunDecode,
    "eval": RunEval,
    "count": RunCount,
    "bench": RunBench,
}


def Dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """解析命令行参数并执行对应子命令

    Args:
        argv (Optional[Sequence[str]], optional): 命令行参数，默认为 sys.argv[1:]. Defaults to None.

    Returns:
        int: 退出码
    """
    parser = _BuildParser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_INPUT

    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        return _COMMANDS[args.command](args)
    except InputError as e:
        logger.error("%s", e)
        print(f"错误：{e}", file=sys.stderr)
        return EXIT_INPUT
    except (ResourceError, OSError) as e:
        logger.error("%s", e)
        print(f"读写错误：{e}", file=sys.stderr)
        return EXIT_RESOURCE
    except (NumericalError, DivergenceError) as e:
        logger.error("%s", e)
        print(f"数值错误：{e}", file=sys.stderr)
        return EXIT_INPUT


def main() -> NoReturn:
    sys.exit(Dispatch())
