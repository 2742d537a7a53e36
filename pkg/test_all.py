from dataclasses import replace
from fractions import Fraction
from itertools import combinations, product
from math import exp, log, sqrt
from pathlib import Path
from typing import Any, Callable, Dict, List, Sequence, Tuple

import numpy as np
import pytest
from yaml import full_load as yaml_load

import SparseFocusTools as sft
from SparseFocusTools import objects
from SparseFocusTools.accounting import (
    AblationGrid,
    AxialLogitMacs,
    Compare,
    CountCheckpointParams,
    CountMacs,
    CountParams,
    DenseBaselineConfig,
    FormatCostReport,
)
from SparseFocusTools.attention import (
    AxialVariant,
    DenseMaskedAttention,
    ExportAttentionMap,
    GetAxialAttentionMap,
    GetAxialMask,
    GetAxialNeighborhood,
    GetNeighborhoodTable,
    SparseFocusAttention,
)
from SparseFocusTools.basic_io import (
    DecodeTensorBytes,
    EncodeTensorBytes,
    ReadJsonFile,
    ReadJsonLines,
    ReadTensorFile,
    WriteTensorFile,
)
from SparseFocusTools.cli import EXIT_INPUT, EXIT_OK, EXIT_RESOURCE, Dispatch
from SparseFocusTools.config import (
    ApplyOverrides,
    BuildModelConfig,
    LoadConfigFile,
    ResolveSeed,
)
from SparseFocusTools.constants import END_ID, PAD_ID, START_ID
from SparseFocusTools.convert import (
    FeatureMapToImageTokens,
    IndexToPixel,
    NormalizeCaption,
    PixelToIndex,
    StripSpecialIds,
    Tokenize,
)
from SparseFocusTools.dataset import (
    AllCaptions,
    GenerateDataset,
    LoadManifest,
    WriteDataset,
)
from SparseFocusTools.decoder import (
    BuildVocabulary,
    DecoderConfig,
    DecoderLayer,
    DecoderLogits,
    DecodeStep,
    GreedyDecode,
    InitDecoderParams,
    MaskedMHA,
    PositionalEncoding,
    ProjectVocab,
)
from SparseFocusTools.encoder import (
    BitemporalFeatures,
    Encode,
    InitSftLayerParams,
    LoadSftParams,
    SaveSftParams,
    SftConfig,
    SftLayer,
)
from SparseFocusTools.exceptions import (
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    GridIndexError,
    InputError,
    NumericalError,
    ResourceError,
    VocabularyError,
)
from SparseFocusTools.extractor import ExtractorConfig, InitExtractorParams, ToyExtractor
from SparseFocusTools.metrics import (
    BleuN,
    ChangeAccuracy,
    CiderD,
    CorpusBleu,
    EvalPair,
    EvaluateCorpus,
    Meteor,
    RougeL,
)
from SparseFocusTools.model import (
    FlattenParams,
    InitModelParams,
    LoadCheckpoint,
    ModelConfig,
    ModelLogits,
    SaveCheckpoint,
    UnflattenParams,
)
from SparseFocusTools.objects import CaptionModel
from SparseFocusTools.tensor import (
    Add,
    Conv2d,
    Einsum,
    Grad,
    LayerNorm,
    Log,
    MatMul,
    Mul,
    PointwiseConv,
    ScalarMul,
    SoftmaxLast,
    Sum,
    Tensor,
    ValueAndGrad,
    get_finite_check_status,
    set_finite_check_status,
)
from SparseFocusTools.training import (
    AdamStep,
    CrossEntropy,
    InitAdamState,
    Train,
    TrainConfig,
)

error_text_to_obj = {
    "InputError": InputError,
    "ConfigError": ConfigError,
    "ContractError": ContractError,
    "DimensionError": DimensionError,
    "GridIndexError": GridIndexError,
    "ResourceError": ResourceError,
}

FD_STEP = 1e-5
GRADIENT_SEEDS = range(5)

# 端到端命令行测试使用的极小模型
# fmt: off
TINY_CLI_ARGS = [
    "--set", "extractor.image_size=16", "--set", "extractor.C=8", "--set", "sft.C=8",
    "--set", "sft.W=2", "--set", "sft.H=2", "--set", "decoder.d_embed=8",
    "--set", "decoder.d_ffn=16", "--set", "decoder.max_len=12",
]
# fmt: on


def AssertNormalCase(value: Any, case: Any) -> None:
    assert type(value) == type(case)
    assert value == case


def AssertCloseCase(value: Any, case: Any, tol: float = 1e-9) -> None:
    assert np.allclose(value, case, rtol=0, atol=tol), f"{value} != {case}"


def NumericGrad(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """中心差分数值梯度"""
    grad = np.zeros_like(x)
    for index in np.ndindex(*x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += FD_STEP
        minus[index] -= FD_STEP
        grad[index] = (fn(Tensor(plus)).item() - fn(Tensor(minus)).item()) / (2 * FD_STEP)
    return grad


def AssertGradientCase(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> None:
    param = Tensor(x)
    _, (grad,) = ValueAndGrad(lambda: fn(param), [param])
    assert np.allclose(grad.data, NumericGrad(fn, x), rtol=1e-4, atol=1e-6)


def TinyModelConfig(**sft_overrides: Any) -> ModelConfig:
    return ModelConfig(
        extractor=ExtractorConfig(in_channels=3, hidden=4, C=8, image_size=16),
        sft=SftConfig(C=8, W=2, H=2, **sft_overrides),
        decoder=DecoderConfig(d_embed=8, h=2, n_layers=1, d_ffn=16, max_len=12),
    )


def SmallModelConfig() -> ModelConfig:
    return ModelConfig(
        extractor=ExtractorConfig(in_channels=3, hidden=8, C=16, image_size=32),
        sft=SftConfig(C=16, W=4, H=4),
        decoder=DecoderConfig(d_embed=16, h=2, n_layers=1, d_ffn=32, max_len=12),
    )


def RandomMaps(
    rng: np.random.Generator, reduced: int, channels: int, W: int, H: int
) -> List[Tensor]:
    return [
        Tensor(rng.standard_normal((reduced, W, H))),
        Tensor(rng.standard_normal((reduced, W, H))),
        Tensor(rng.standard_normal((channels, W, H))),
        Tensor(rng.standard_normal((channels, W, H))),
    ]


def _Grams(tokens: Sequence[str], n: int) -> List[Tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def BruteForceBleu(generated: Sequence[str], references: Sequence[Sequence[str]], N: int) -> float:
    """逐个 n-gram 计数的 BLEU-N"""
    c = len(generated)
    precisions = []
    for n in range(1, N + 1):
        grams = _Grams(generated, n)
        clipped = sum(
            min(grams.count(g), max(_Grams(r, n).count(g) for r in references))
            for g in set(grams)
        )
        if clipped == 0:
            return 0.0
        precisions.append(clipped / len(grams))
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    brevity = 1.0 if c > r else exp(1 - r / c)
    return brevity * exp(sum(log(p) for p in precisions) / N)


def _IsSubsequence(seq: Sequence[str], tokens: Sequence[str]) -> bool:
    it = iter(tokens)
    return all(token in it for token in seq)


def BruteForceRougeL(generated: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """枚举生成描述的全部子序列求 LCS"""
    best = 0.0
    for ref in references:
        lcs = next(
            (
                length
                for length in range(len(generated), 0, -1)
                for idx in combinations(range(len(generated)), length)
                if _IsSubsequence([generated[i] for i in idx], ref)
            ),
            0,
        )
        best = max(best, lcs / max(len(generated), len(ref)))
    return best


def _AllAlignments(generated: Sequence[str], ref: Sequence[str]) -> List[List[Tuple[int, int]]]:
    alignments: List[List[Tuple[int, int]]] = []

    def Extend(i: int, used: frozenset, current: List[Tuple[int, int]]) -> None:
        if i == len(generated):
            alignments.append(current)
            return
        Extend(i + 1, used, current)
        for j, token in enumerate(ref):
            if token == generated[i] and j not in used:
                Extend(i + 1, used | {j}, [*current, (i, j)])

    Extend(0, frozenset(), [])
    return alignments


def BruteForceMeteor(generated: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """枚举全部一对一匹配，取匹配数最大者中块数最少的"""
    best = 0.0
    for ref in references:
        alignments = _AllAlignments(generated, ref)
        matches = max(len(a) for a in alignments)
        if matches == 0:
            continue
        chunks = min(
            1 + sum(1 for (i0, j0), (i1, j1) in zip(a, a[1:]) if i1 != i0 + 1 or j1 != j0 + 1)
            for a in alignments
            if len(a) == matches
        )
        precision, recall = matches / len(generated), matches / len(ref)
        f_mean = precision * recall / (0.9 * precision + 0.1 * recall)
        best = max(best, f_mean * (1 - 0.5 * (chunks / matches) ** 3))
    return best


def BruteForceCiderD(pairs: Sequence[EvalPair]) -> List[float]:
    """逐项展开的 CIDEr-D：σ = 6，n = 1~4"""

    def AllGrams(tokens: Sequence[str]) -> List[Tuple[str, ...]]:
        return [g for n in range(1, 5) for g in _Grams(tokens, n)]

    def DocumentFrequency(gram: Tuple[str, ...]) -> int:
        return sum(1 for p in pairs if any(gram in AllGrams(r) for r in p.references))

    def Vector(tokens: Sequence[str]) -> Dict[Tuple[str, ...], float]:
        grams = AllGrams(tokens)
        return {
            g: grams.count(g) * (log(len(pairs)) - log(max(1, DocumentFrequency(g))))
            for g in set(grams)
        }

    scores = []
    for pair in pairs:
        hyp = Vector(pair.generated)
        total = 0.0
        for ref in pair.references:
            vec = Vector(ref)
            gaussian = exp(-((len(pair.generated) - len(ref)) ** 2) / 72)
            for n in range(1, 5):
                hyp_n = {g: w for g, w in hyp.items() if len(g) == n}
                ref_n = {g: w for g, w in vec.items() if len(g) == n}
                value = sum(min(w, ref_n.get(g, 0.0)) * ref_n.get(g, 0.0) for g, w in hyp_n.items())
                norm = sqrt(sum(w * w for w in hyp_n.values())) * sqrt(
                    sum(w * w for w in ref_n.values())
                )
                if norm != 0:
                    value /= norm
                total += value * gaussian / 4
        scores.append(total / len(pair.references) * 10)
    return scores


with open("test_cases.yaml", encoding="utf-8") as f:
    test_cases = yaml_load(f)


class TestPackage:
    def test_Version(self) -> None:
        AssertNormalCase(sft.__version__, "1.0.0")


class TestConvertModule:
    def test_PixelToIndex(self) -> None:
        for case in test_cases["convert_cases"]["pixel_cases"]:
            AssertNormalCase(PixelToIndex(tuple(case["p"]), case["W"], case["H"]), case["index"])

        for case in test_cases["convert_cases"]["fail_cases"]:
            with pytest.raises(error_text_to_obj[case["exception_name"]]):
                PixelToIndex(tuple(case["p"]), case["W"], case["H"])

    def test_IndexToPixel(self) -> None:
        for case in test_cases["convert_cases"]["pixel_cases"]:
            AssertNormalCase(IndexToPixel(case["index"], case["W"], case["H"]), tuple(case["p"]))

        with pytest.raises(GridIndexError):
            IndexToPixel(20, 4, 5)

    def test_Tokenize(self) -> None:
        for case in test_cases["convert_cases"]["tokenize_cases"]:
            AssertNormalCase(Tokenize(case["text"]), case["tokens"])

    def test_StripSpecialIds(self) -> None:
        AssertNormalCase(StripSpecialIds([START_ID, 5, 6, END_ID, 7]), [5, 6])
        AssertNormalCase(StripSpecialIds([START_ID, 5, PAD_ID, 6]), [5, 6])

    def test_FeatureMapToImageTokens(self) -> None:
        f = np.arange(2 * 3 * 4, dtype=np.float64).reshape(2, 3, 4)
        tokens = FeatureMapToImageTokens(Tensor(f)).data
        AssertNormalCase(tokens.shape, (12, 2))
        # 第 r·H + c 行对应像素 (r, c)
        assert np.array_equal(tokens[1 * 4 + 2], f[:, 1, 2])

        with pytest.raises(DimensionError):
            FeatureMapToImageTokens(Tensor(np.ones((3, 4))))


class TestTensorModule:
    def test_Tensor(self) -> None:
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        AssertNormalCase(t.shape, (2, 2))
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0
        with pytest.raises(DimensionError):
            Tensor(np.zeros((0, 3)))
        with pytest.raises(ContractError):
            t.item()

    def test_FiniteCheck(self) -> None:
        with pytest.raises(NumericalError):
            Log(Tensor([0.0, 1.0]))
        set_finite_check_status(False)
        try:
            assert not get_finite_check_status()
            Log(Tensor([0.0, 1.0]))
        finally:
            set_finite_check_status(True)
        assert get_finite_check_status()

    def test_MatMul(self) -> None:
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            MatMul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

        rng = np.random.default_rng(0)
        b = Tensor(rng.standard_normal((3, 2)))
        AssertGradientCase(lambda a: Sum(Mul(MatMul(a, b), b.T @ b)), rng.standard_normal((2, 3)))

    def test_Einsum(self) -> None:
        rng = np.random.default_rng(1)
        k = Tensor(rng.standard_normal((4, 3, 2)))
        w = Tensor(rng.standard_normal((4, 3)))
        AssertGradientCase(
            lambda q: Sum(Mul(Einsum("pc,pnc->pn", q, k), w)), rng.standard_normal((4, 2))
        )
        with pytest.raises(ContractError):
            Einsum("ii,ij->j", Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))

    def test_SoftmaxLast(self) -> None:
        y = SoftmaxLast(Tensor([[1000.0, 1000.0], [0.0, -1e30]])).data
        AssertCloseCase(y, [[0.5, 0.5], [1.0, 0.0]])

        rng = np.random.default_rng(2)
        w = Tensor(rng.standard_normal((2, 5)))
        AssertGradientCase(lambda x: Sum(Mul(SoftmaxLast(x), w)), rng.standard_normal((2, 5)))

    def test_LayerNorm(self) -> None:
        for case in test_cases["tensor_cases"]["layer_norm_cases"]:
            d = len(case["x"])
            y = LayerNorm(Tensor(case["x"]), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
            AssertCloseCase(y, case["expected"], tol=1e-4)

        def CheckSeed(seed: int) -> None:
            rng = np.random.default_rng(seed)
            gamma = Tensor(rng.standard_normal(4))
            beta = Tensor(rng.standard_normal(4))
            w = Tensor(rng.standard_normal((3, 4)))
            AssertGradientCase(
                lambda x: Sum(Mul(LayerNorm(x, gamma, beta), w)), rng.standard_normal((3, 4))
            )
            x = Tensor(rng.standard_normal((3, 4)))
            AssertGradientCase(
                lambda g: Sum(Mul(LayerNorm(x, g, beta), w)), rng.standard_normal(4)
            )
            AssertGradientCase(
                lambda b: Sum(Mul(LayerNorm(x, gamma, b), w)), rng.standard_normal(4)
            )

        for seed in GRADIENT_SEEDS:
            CheckSeed(seed)

    def test_PointwiseConv(self) -> None:
        def CheckSeed(seed: int) -> None:
            rng = np.random.default_rng(seed)
            weight = Tensor(rng.standard_normal((2, 3)))
            bias = Tensor(rng.standard_normal(2))
            w = Tensor(rng.standard_normal((2, 3, 4)))
            f = rng.standard_normal((3, 3, 4))
            y = PointwiseConv(Tensor(f), weight, bias).data
            AssertCloseCase(y[1, 2, 0], weight.data[1] @ f[:, 2, 0] + bias.data[1], tol=1e-12)
            AssertGradientCase(lambda t: Sum(Mul(PointwiseConv(t, weight, bias), w)), f)
            AssertGradientCase(
                lambda t: Sum(Mul(PointwiseConv(Tensor(f), t, bias), w)), weight.numpy()
            )
            AssertGradientCase(
                lambda t: Sum(Mul(PointwiseConv(Tensor(f), weight, t), w)), bias.numpy()
            )

        for seed in GRADIENT_SEEDS:
            CheckSeed(seed)

        with pytest.raises(DimensionError):
            PointwiseConv(Tensor(np.ones((4, 2, 2))), Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_Conv2d(self) -> None:
        rng = np.random.default_rng(4)
        weight = Tensor(rng.standard_normal((2, 3, 2, 2)))
        bias = Tensor(rng.standard_normal(2))
        w = Tensor(rng.standard_normal((2, 2, 2)))
        x = rng.standard_normal((3, 4, 4))
        y = Conv2d(Tensor(x), weight, bias, 2).data
        AssertNormalCase(y.shape, (2, 2, 2))
        expected = (x[:, 2:4, 0:2] * weight.data[1]).sum() + bias.data[1]
        AssertCloseCase(y[1, 1, 0], expected)
        AssertGradientCase(lambda t: Sum(Mul(Conv2d(t, weight, bias, 2), w)), x)

    def test_ValueAndGrad(self) -> None:
        a = Tensor([1.0, 2.0])
        value, (grad,) = ValueAndGrad(lambda: Sum(Mul(a, a)), [a])
        AssertNormalCase(value, 5.0)
        AssertCloseCase(grad.data, [2.0, 4.0])

        # 不参与计算的参数梯度为 0
        unused = Tensor(np.ones(3))
        _, grads = ValueAndGrad(lambda: Sum(a), [a, unused])
        AssertCloseCase(grads[1].data, np.zeros(3))

        with pytest.raises(ContractError):
            ValueAndGrad(lambda: Add(a, a), [a])

    def test_SharedSubexpression(self) -> None:
        a = Tensor([3.0])
        b = Mul(a, a)
        _, (grad,) = ValueAndGrad(lambda: Sum(Add(b, ScalarMul(b, 2.0))), [a])
        AssertCloseCase(grad.data, [18.0])

    def test_Grad(self) -> None:
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([0.5, -1.0])
        grad_a, grad_b = Grad(lambda: Sum(Mul(a, b)), [a, b])
        AssertCloseCase(grad_a.data, [[0.5, -1.0], [0.5, -1.0]])
        AssertCloseCase(grad_b.data, [4.0, 6.0])


class TestBasicIoModule:
    def test_EncodeTensorBytes(self) -> None:
        for case in test_cases["tensor_cases"]["sft1_cases"]:
            AssertNormalCase(EncodeTensorBytes(Tensor(case["value"])).hex(), case["hex"])

    def test_DecodeTensorBytes(self) -> None:
        array = np.arange(6, dtype=np.float64).reshape(2, 3) / 7
        assert np.array_equal(DecodeTensorBytes(EncodeTensorBytes(array)), array)

        buf = EncodeTensorBytes(array)
        with pytest.raises(ResourceError, match="偏移 0"):
            DecodeTensorBytes(b"XXXX" + buf[4:])
        with pytest.raises(ResourceError, match=f"偏移 {len(buf) - 3}"):
            DecodeTensorBytes(buf[:-3])
        with pytest.raises(ResourceError, match=f"偏移 {len(buf)}"):
            DecodeTensorBytes(buf + b"\x00")

    def test_ReadTensorFile(self, tmp_path: Path) -> None:
        path = tmp_path / "x.sft"
        WriteTensorFile(path, Tensor([[1.5, -2.0]]))
        AssertCloseCase(ReadTensorFile(path), [[1.5, -2.0]])
        with pytest.raises(ResourceError):
            ReadTensorFile(tmp_path / "missing.sft")

    def test_ReadJsonLines(self, tmp_path: Path) -> None:
        path = tmp_path / "empty.jsonl"
        path.write_text("", encoding="utf-8")
        AssertNormalCase(ReadJsonLines(path), [])

        path.write_text("{not json}\n", encoding="utf-8")
        with pytest.raises(ResourceError, match="第 1 行"):
            ReadJsonLines(path)


class TestAttentionModule:
    def test_AxialVariant(self) -> None:
        AssertNormalCase(AxialVariant.from_string("full"), AxialVariant.full())
        AssertNormalCase(AxialVariant.from_string("fixed:4"), AxialVariant.fixed(4))
        AssertNormalCase(str(AxialVariant.fixed(4)), "fixed:4")
        AssertNormalCase(AxialVariant.from_dict({"kind": "fixed", "l": 2}), AxialVariant.fixed(2))

    def test_GetAxialNeighborhood(self) -> None:
        for case in test_cases["attention_cases"]["neighborhood_cases"]:
            neighborhood = GetAxialNeighborhood(
                tuple(case["p"]),
                case["W"],
                case["H"],
                AxialVariant.from_string(case["variant"]),
            )
            AssertNormalCase(neighborhood.members, tuple(tuple(m) for m in case["members"]))
            AssertNormalCase(neighborhood.indices, case["indices"])

        for case in test_cases["attention_cases"]["fail_cases"]:
            with pytest.raises(error_text_to_obj[case["exception_name"]]):
                GetAxialNeighborhood(
                    tuple(case["p"]),
                    case["W"],
                    case["H"],
                    AxialVariant.from_string(case["variant"]),
                )

    def test_NeighborhoodProperties(self) -> None:
        for W, H in ((1, 1), (3, 5), (8, 8)):
            for variant in (AxialVariant.full(), AxialVariant.fixed(1), AxialVariant.fixed(3)):
                if variant.l > max(W, H):
                    continue
                for r in range(W):
                    for c in range(H):
                        neighborhood = GetAxialNeighborhood((r, c), W, H, variant)
                        assert (r, c) in neighborhood.members
                        assert len(set(neighborhood.members)) == len(neighborhood)
                        assert len(neighborhood) <= H + W - 1
                        if variant.kind == "full":
                            assert len(neighborhood) == H + W - 1

    def test_GetAxialMask(self) -> None:
        # 正方形网格上 l = max(W, H) 的固定长度变体退化为整行整列
        for size in (3, 4, 8):
            assert np.array_equal(
                GetAxialMask(size, size, AxialVariant.fixed(size)),
                GetAxialMask(size, size, AxialVariant.full()),
            )
        mask = GetAxialMask(8, 8, AxialVariant.full())
        AssertNormalCase(int(mask.sum()), 64 * 15)
        assert np.array_equal(mask, mask.T)

    def test_SparseFocusAttention(self) -> None:
        rng = np.random.default_rng(5)
        cases = [
            (4, 4, AxialVariant.full()),
            (3, 5, AxialVariant.full()),
            (6, 6, AxialVariant.fixed(3)),
            (4, 6, AxialVariant.fixed(5)),
            (1, 1, AxialVariant.full()),
        ]
        for W, H, variant in cases:
            q, k, v, f = RandomMaps(rng, 2, 3, W, H)
            for scale_qk in (False, True):
                sparse = SparseFocusAttention(q, k, v, f, variant, scale_qk)
                dense = DenseMaskedAttention(q, k, v, f, GetAxialMask(W, H, variant), scale_qk)
                AssertCloseCase(sparse.data, dense.data, tol=1e-10)

    @pytest.mark.parametrize("W, H", list(product(range(2, 9), repeat=2)))
    def test_SparseFocusAttentionMatrix(self, W: int, H: int) -> None:
        variants = (AxialVariant.full(), AxialVariant.fixed(max(W, H) // 2))
        for channels, reduced, variant, seed in product((1, 3), (1, 2), variants, range(20)):
            rng = np.random.default_rng(seed)
            q, k, v, f = RandomMaps(rng, reduced, channels, W, H)
            scale_qk = seed % 2 == 1
            sparse = SparseFocusAttention(q, k, v, f, variant, scale_qk).data
            dense = DenseMaskedAttention(q, k, v, f, GetAxialMask(W, H, variant), scale_qk).data
            assert np.max(np.abs(sparse - dense)) < 1e-9
            # 每个像素在邻域上的权重之和为 1，填充位置权重为 0
            weights = GetAxialAttentionMap(q, k, variant, scale_qk).weights
            assert np.max(np.abs(weights.sum(axis=1) - 1.0)) < 1e-12

    def test_SparseFocusAttentionResidual(self) -> None:
        rng = np.random.default_rng(6)
        _, _, v, f = RandomMaps(rng, 2, 3, 4, 4)
        zeros = Tensor(np.zeros((2, 4, 4)))
        out = SparseFocusAttention(zeros, zeros, v, f, AxialVariant.full()).data
        # 权重均匀时输出为 F 加邻域内 V 的平均
        index, _ = GetNeighborhoodTable(4, 4, AxialVariant.full())
        pixels = v.data.reshape(3, 16)
        expected = f.data.reshape(3, 16) + pixels[:, index].mean(axis=2)
        AssertCloseCase(out.reshape(3, 16), expected, tol=1e-12)

    def test_SparseFocusAttentionGradient(self) -> None:
        def CheckSeed(seed: int, variant: AxialVariant) -> None:
            rng = np.random.default_rng(seed)
            q, k, v, f = RandomMaps(rng, 2, 3, 3, 4)
            w = Tensor(rng.standard_normal((3, 3, 4)))
            AssertGradientCase(
                lambda t: Sum(Mul(SparseFocusAttention(t, k, v, f, variant), w)), q.numpy()
            )
            AssertGradientCase(
                lambda t: Sum(Mul(SparseFocusAttention(q, t, v, f, variant), w)), k.numpy()
            )
            AssertGradientCase(
                lambda t: Sum(Mul(SparseFocusAttention(q, k, t, f, variant), w)), v.numpy()
            )
            AssertGradientCase(
                lambda t: Sum(Mul(SparseFocusAttention(q, k, v, t, variant), w)), f.numpy()
            )

        for seed in GRADIENT_SEEDS:
            CheckSeed(seed, AxialVariant.fixed(2))
            CheckSeed(seed, AxialVariant.full())

    def test_SparseFocusAttentionFail(self) -> None:
        rng = np.random.default_rng(8)
        q, k, v, f = RandomMaps(rng, 2, 3, 4, 4)
        with pytest.raises(DimensionError):
            SparseFocusAttention(q, Tensor(np.ones((3, 4, 4))), v, f, AxialVariant.full())
        with pytest.raises(DimensionError):
            SparseFocusAttention(q, k, v, Tensor(np.ones((3, 4, 5))), AxialVariant.full())
        with pytest.raises(ConfigError):
            SparseFocusAttention(q, k, v, f, AxialVariant.fixed(5))

    def test_DenseMaskedAttention(self) -> None:
        rng = np.random.default_rng(9)
        q, k, v, f = RandomMaps(rng, 2, 3, 2, 2)
        mask = np.ones((4, 4), dtype=bool)
        mask[2] = False
        with pytest.raises(ContractError, match="第 2 行"):
            DenseMaskedAttention(q, k, v, f, mask)

    def test_GetAxialAttentionMap(self, tmp_path: Path) -> None:
        rng = np.random.default_rng(10)
        q, k, _, _ = RandomMaps(rng, 2, 3, 3, 3)
        attention_map = GetAxialAttentionMap(q, k, AxialVariant.full())
        AssertCloseCase(attention_map.weights.sum(axis=1), np.ones(9), tol=1e-12)
        dense = attention_map.to_dense()
        assert np.all(dense[~GetAxialMask(3, 3, AxialVariant.full())] == 0)

        sidecar = ExportAttentionMap(attention_map, tmp_path / "map.sft")
        descriptor = ReadJsonFile(sidecar)
        AssertNormalCase(descriptor["n_max"], 5)
        AssertNormalCase(descriptor["members"][4], [3, 4, 5, 1, 7])
        AssertCloseCase(ReadTensorFile(tmp_path / "map.sft"), attention_map.weights)


class TestEncoderModule:
    def test_SftConfig(self) -> None:
        AssertNormalCase(SftConfig(C=64).C_reduced, 8)
        AssertNormalCase(SftConfig(C=4).C_reduced, 1)
        cfg = SftConfig.from_dict({"C": 16, "variant": "fixed:4", "R": 2})
        AssertNormalCase(cfg.variant, AxialVariant.fixed(4))
        AssertNormalCase(SftConfig.from_dict(cfg.to_dict()), cfg)
        with pytest.raises(ConfigError):
            SftConfig(W=4, H=4, variant=AxialVariant.fixed(5))
        with pytest.raises(ConfigError):
            SftConfig.from_dict({"channels": 3})

    def test_Encode(self) -> None:
        rng = np.random.default_rng(11)
        cfg = SftConfig(C=8, W=3, H=3, R=2)
        layers = [InitSftLayerParams(cfg, rng) for _ in range(2)]
        f1 = Tensor(rng.standard_normal((8, 3, 3)))
        f2 = Tensor(rng.standard_normal((8, 3, 3)))
        out = Encode(BitemporalFeatures(f1, f2), layers, cfg).data
        AssertNormalCase(out.shape, (16, 3, 3))
        # 两个时相共享参数
        expected = SftLayer(SftLayer(f2, layers[0], cfg), layers[1], cfg).data
        AssertCloseCase(out[8:], expected, tol=1e-12)

        with pytest.raises(ConfigError):
            Encode(BitemporalFeatures(f1, f2), layers[:1], cfg)
        with pytest.raises(DimensionError):
            Encode(BitemporalFeatures(f1, Tensor(np.ones((8, 3, 4)))), layers, cfg)

    def test_EncodeSwap(self) -> None:
        for seed in range(5):
            rng = np.random.default_rng(seed)
            cfg = SftConfig(C=4, W=3, H=4, R=2, variant=AxialVariant.fixed(2))
            layers = [InitSftLayerParams(cfg, rng) for _ in range(2)]
            f1 = Tensor(rng.standard_normal((4, 3, 4)))
            f2 = Tensor(rng.standard_normal((4, 3, 4)))
            out = Encode(BitemporalFeatures(f1, f2), layers, cfg).data
            swapped = Encode(BitemporalFeatures(f2, f1), layers, cfg).data
            assert np.array_equal(swapped, np.concatenate([out[4:], out[:4]]))

    def test_SaveSftParams(self, tmp_path: Path) -> None:
        rng = np.random.default_rng(12)
        cfg = SftConfig(C=8, W=2, H=2, R=2, variant=AxialVariant.fixed(1))
        layers = [InitSftLayerParams(cfg, rng) for _ in range(2)]
        SaveSftParams(tmp_path, layers, cfg)
        loaded, loaded_cfg = LoadSftParams(tmp_path)
        AssertNormalCase(loaded_cfg, cfg)
        assert np.array_equal(loaded[1].wk.data, layers[1].wk.data)


class TestExtractorModule:
    def test_ToyExtractor(self) -> None:
        rng = np.random.default_rng(13)
        cfg = ExtractorConfig(in_channels=3, hidden=4, C=8, image_size=16)
        params = InitExtractorParams(cfg, rng)
        out = ToyExtractor(Tensor(rng.uniform(size=(3, 16, 16))), params, cfg)
        AssertNormalCase(out.shape, (8, 2, 2))
        with pytest.raises(DimensionError):
            ToyExtractor(Tensor(np.ones((3, 8, 8))), params, cfg)
        with pytest.raises(ConfigError):
            ExtractorConfig(image_size=20)

    def test_ToyExtractorGradient(self) -> None:
        cfg = ExtractorConfig(in_channels=3, hidden=2, C=2, image_size=8)

        def CheckSeed(seed: int) -> None:
            rng = np.random.default_rng(seed)
            params = InitExtractorParams(cfg, rng)
            w = Tensor(rng.standard_normal((2, 1, 1)))
            img = rng.uniform(size=(3, 8, 8))
            AssertGradientCase(lambda t: Sum(Mul(ToyExtractor(t, params, cfg), w)), img)
            AssertGradientCase(
                lambda t: Sum(Mul(ToyExtractor(Tensor(img), replace(params, w1=t), cfg), w)),
                params.w1.numpy(),
            )
            AssertGradientCase(
                lambda t: Sum(Mul(ToyExtractor(Tensor(img), replace(params, b2=t), cfg), w)),
                params.b2.numpy(),
            )

        for seed in GRADIENT_SEEDS:
            CheckSeed(seed)


class TestDecoderModule:
    def test_DecoderConfig(self) -> None:
        for case in test_cases["decoder_cases"]["fail_cases"]:
            with pytest.raises(error_text_to_obj[case["exception_name"]]):
                DecoderConfig(d_embed=case["d_embed"], h=case["h"])

    def test_PositionalEncoding(self) -> None:
        for case in test_cases["decoder_cases"]["positional_encoding_cases"]:
            table = PositionalEncoding(case["max_len"], case["d_embed"]).data
            AssertCloseCase(table[case["pos"], case["dim"]], case["value"], tol=1e-12)

        with pytest.raises(ConfigError):
            PositionalEncoding(4, 7)

    def test_Vocabulary(self) -> None:
        vocab = BuildVocabulary(["a red square", "there is no change"])
        AssertNormalCase(vocab.tokens[:4], ["<pad>", "<start>", "<end>", "<unk>"])
        sequence = vocab.encode("A red circle")
        AssertNormalCase(sequence.ids[0], START_ID)
        AssertNormalCase(sequence.ids[-1], END_ID)
        AssertNormalCase(vocab.decode(sequence.ids), "a red <unk>")
        AssertNormalCase(vocab.decode([START_ID, vocab.token_to_id("red"), END_ID, 5]), "red")
        with pytest.raises(VocabularyError):
            vocab.id_to_token(len(vocab))

    def test_MaskedMHA(self) -> None:
        rng = np.random.default_rng(14)
        cfg = DecoderConfig(d_embed=8, h=2, n_layers=1, d_ffn=16, max_len=6)
        params = InitDecoderParams(cfg, 10, 4, rng).layers[0].self_attn
        x = rng.standard_normal((5, 8))
        full = MaskedMHA(Tensor(x), Tensor(x), True, params, cfg).data
        # 因果掩码下前缀的输出与后续位置无关
        prefix = MaskedMHA(Tensor(x[:3]), Tensor(x[:3]), True, params, cfg).data
        AssertCloseCase(full[:3], prefix, tol=1e-12)

    def test_MaskedMHANormalization(self) -> None:
        cfg = DecoderConfig(d_embed=8, h=2, n_layers=1, d_ffn=16, max_len=6)
        for seed in range(5):
            rng = np.random.default_rng(seed)
            layer = InitDecoderParams(cfg, 10, 4, rng).layers[0]
            x = rng.standard_normal((5, 8))
            for attn, kv, causal in (
                (layer.self_attn, x, True),
                (layer.cross_attn, rng.standard_normal((7, 8)), False),
            ):
                # 值恒为 1 时输出等于各行注意力权重之和
                constant = replace(
                    attn,
                    wv=Tensor(np.zeros((8, 8))),
                    bv=Tensor(np.ones(8)),
                    wo=Tensor(np.eye(8)),
                    bo=Tensor(np.zeros(8)),
                )
                out = MaskedMHA(Tensor(x), Tensor(kv), causal, constant, cfg).data
                AssertCloseCase(out, np.ones((5, 8)), tol=1e-12)

    def test_MaskedMHAGradient(self) -> None:
        cfg = DecoderConfig(d_embed=4, h=2, n_layers=1, d_ffn=8, max_len=6)

        def CheckSeed(seed: int) -> None:
            rng = np.random.default_rng(seed)
            layer = InitDecoderParams(cfg, 6, 4, rng).layers[0]
            w = Tensor(rng.standard_normal((3, 4)))
            x = rng.standard_normal((3, 4))
            image = Tensor(rng.standard_normal((5, 4)))
            AssertGradientCase(lambda t: Sum(Mul(MaskedMHA(t, t, True, layer.self_attn, cfg), w)), x)
            AssertGradientCase(
                lambda t: Sum(Mul(MaskedMHA(t, image, False, layer.cross_attn, cfg), w)), x
            )
            AssertGradientCase(
                lambda t: Sum(Mul(MaskedMHA(Tensor(x), t, False, layer.cross_attn, cfg), w)),
                image.numpy(),
            )

        for seed in GRADIENT_SEEDS:
            CheckSeed(seed)

    def test_DecoderLayerGradient(self) -> None:
        cfg = DecoderConfig(d_embed=4, h=2, n_layers=1, d_ffn=8, max_len=6)

        def CheckSeed(seed: int) -> None:
            rng = np.random.default_rng(seed)
            layer = InitDecoderParams(cfg, 6, 4, rng).layers[0]
            w = Tensor(rng.standard_normal((3, 4)))
            t = rng.standard_normal((3, 4))
            image = rng.standard_normal((5, 4))
            AssertGradientCase(
                lambda x: Sum(Mul(DecoderLayer(x, Tensor(image), layer, cfg), w)), t
            )
            AssertGradientCase(
                lambda x: Sum(Mul(DecoderLayer(Tensor(t), x, layer, cfg), w)), image
            )

        for seed in GRADIENT_SEEDS:
            CheckSeed(seed)

    def test_DecodeStep(self) -> None:
        rng = np.random.default_rng(15)
        cfg = DecoderConfig(d_embed=8, h=2, n_layers=2, d_ffn=16, max_len=8)
        params = InitDecoderParams(cfg, 12, 6, rng)
        image_tokens = Tensor(rng.standard_normal((4, 8)))
        tokens = [START_ID, 5, 7, 9, 4]
        forced = DecoderLogits(tokens, image_tokens, params, cfg).data
        cache = [None] * cfg.n_layers
        for position, token_id in enumerate(tokens):
            logits, cache = DecodeStep(token_id, position, cache, image_tokens, params, cfg)
            AssertCloseCase(logits, forced[position], tol=1e-10)

    def test_ProjectVocab(self) -> None:
        rng = np.random.default_rng(16)
        cfg = DecoderConfig(d_embed=8, h=2, n_layers=1, d_ffn=16, max_len=8)
        params = InitDecoderParams(cfg, 12, 6, rng)
        probs = ProjectVocab(Tensor(rng.standard_normal((3, 8))), params).data
        AssertCloseCase(probs.sum(axis=1), np.ones(3), tol=1e-12)

        def CheckSeed(seed: int) -> None:
            seed_rng = np.random.default_rng(seed)
            seed_params = InitDecoderParams(cfg, 12, 6, seed_rng)
            w = Tensor(seed_rng.standard_normal((3, 12)))
            AssertGradientCase(
                lambda t: Sum(Mul(ProjectVocab(t, seed_params), w)),
                seed_rng.standard_normal((3, 8)),
            )

        for seed in GRADIENT_SEEDS:
            CheckSeed(seed)

    def test_GreedyDecode(self) -> None:
        rng = np.random.default_rng(17)
        cfg = DecoderConfig(d_embed=8, h=2, n_layers=1, d_ffn=16, max_len=6)
        params = InitDecoderParams(cfg, 12, 6, rng)
        image_tokens = Tensor(rng.standard_normal((4, 8)))

        def ForceEnd(step: int, logits: np.ndarray) -> np.ndarray:
            logits = logits.copy()
            logits[END_ID if step == 2 else 7] = 1e9
            return logits

        sequence = GreedyDecode(image_tokens, params, cfg, ForceEnd)
        AssertNormalCase(sequence.ids, (START_ID, 7, 7, END_ID))
        assert not sequence.truncated

        def NeverEnd(step: int, logits: np.ndarray) -> np.ndarray:
            logits = logits.copy()
            logits[END_ID] = -1e9
            return logits

        sequence = GreedyDecode(image_tokens, params, cfg, NeverEnd)
        AssertNormalCase(len(sequence), cfg.max_len)
        assert sequence.truncated

    def test_GreedyDecodeCausality(self) -> None:
        rng = np.random.default_rng(20)
        cfg = DecoderConfig(d_embed=8, h=2, n_layers=2, d_ffn=16, max_len=8)
        params = InitDecoderParams(cfg, 12, 6, rng)
        image_tokens = Tensor(rng.standard_normal((4, 8)))

        def PerturbFrom(k: int) -> Callable[[int, np.ndarray], np.ndarray]:
            noise = np.random.default_rng(k).standard_normal((cfg.max_len, 12)) * 1e3

            def Filter(step: int, logits: np.ndarray) -> np.ndarray:
                logits = logits.copy()
                if step >= k:
                    logits += noise[step]
                logits[END_ID] = -1e9
                return logits

            return Filter

        # k 取 max_len 时不做任何扰动
        base = GreedyDecode(image_tokens, params, cfg, PerturbFrom(cfg.max_len)).ids
        for k in range(cfg.max_len - 1):
            # 第 k 步及以后的扰动不影响前 k 个生成的词元
            perturbed = GreedyDecode(image_tokens, params, cfg, PerturbFrom(k)).ids
            AssertNormalCase(perturbed[: k + 1], base[: k + 1])


class TestModelModule:
    def test_ModelConfig(self) -> None:
        cfg = TinyModelConfig()
        AssertNormalCase(ModelConfig.from_dict(cfg.to_dict()), cfg)
        with pytest.raises(ConfigError):
            ModelConfig(extractor=ExtractorConfig(C=32), sft=SftConfig(C=64))
        with pytest.raises(ConfigError):
            ModelConfig(extractor=ExtractorConfig(image_size=32), sft=SftConfig(W=8, H=8))

    def test_FlattenParams(self) -> None:
        cfg = TinyModelConfig(R=2)
        params = InitModelParams(cfg, 9, seed=0)
        flat = FlattenParams(params)
        assert "encoder.1.wq" in flat
        assert "decoder.layers.0.self_attn.wo" in flat
        rebuilt = UnflattenParams(params, [Tensor(t.data * 2) for t in flat.values()])
        assert np.array_equal(rebuilt.encoder[1].wq.data, params.encoder[1].wq.data * 2)
        with pytest.raises(ConfigError):
            UnflattenParams(params, list(flat.values())[:-1])

    def test_InitModelParams(self) -> None:
        cfg = TinyModelConfig()
        a = FlattenParams(InitModelParams(cfg, 9, seed=3))
        b = FlattenParams(InitModelParams(cfg, 9, seed=3))
        assert all(np.array_equal(a[name].data, b[name].data) for name in a)

    def test_SaveCheckpoint(self, tmp_path: Path) -> None:
        cfg = TinyModelConfig(variant=AxialVariant.fixed(1))
        vocab = BuildVocabulary(["a red square"])
        params = InitModelParams(cfg, len(vocab), seed=1)
        SaveCheckpoint(tmp_path, params, cfg, vocab)
        loaded, loaded_cfg, loaded_vocab = LoadCheckpoint(tmp_path)
        AssertNormalCase(loaded_cfg, cfg)
        AssertNormalCase(loaded_vocab, vocab)
        assert np.array_equal(loaded.decoder.out_w.data, params.decoder.out_w.data)

        (tmp_path / "tensors" / "decoder.embed.sft").write_bytes(b"SFT1")
        with pytest.raises(ResourceError):
            LoadCheckpoint(tmp_path)
        with pytest.raises(ResourceError):
            LoadCheckpoint(tmp_path / "missing")

    def test_ModelLogits(self) -> None:
        cfg = TinyModelConfig()
        params = InitModelParams(cfg, 9, seed=2)
        rng = np.random.default_rng(18)
        img1 = Tensor(rng.uniform(size=(3, 16, 16)))
        img2 = Tensor(rng.uniform(size=(3, 16, 16)))
        logits = ModelLogits(params, cfg, img1, img2, [START_ID, 5, 6])
        AssertNormalCase(logits.shape, (3, 9))

    def test_GradientThroughModel(self) -> None:
        cfg = replace(TinyModelConfig(), decoder=DecoderConfig(d_embed=4, h=2, d_ffn=4, max_len=6))
        checked = (
            "extractor.b2",
            "encoder.0.wq",
            "encoder.0.bv",
            "decoder.img_b",
            "decoder.layers.0.norm2_gamma",
            "decoder.out_b",
        )

        def CheckSeed(seed: int) -> None:
            params = InitModelParams(cfg, 7, seed=seed)
            rng = np.random.default_rng(19 + seed)
            img1 = Tensor(rng.uniform(size=(3, 16, 16)))
            img2 = Tensor(rng.uniform(size=(3, 16, 16)))
            flat = FlattenParams(params)

            def LossFor(target: str) -> Callable[[Tensor], Tensor]:
                def Loss(value: Tensor) -> Tensor:
                    values = [value if name == target else flat[name] for name in flat]
                    current = UnflattenParams(params, values)
                    logits = ModelLogits(current, cfg, img1, img2, [START_ID, 4])
                    return CrossEntropy(logits, [4, END_ID])

                return Loss

            for target in checked:
                AssertGradientCase(LossFor(target), flat[target].numpy())

        for seed in GRADIENT_SEEDS:
            CheckSeed(seed)


class TestDatasetModule:
    def test_GenerateDataset(self) -> None:
        samples = GenerateDataset(6, seed=7, image_size=16)
        AssertNormalCase([s.is_change for s in samples], [True, False] * 3)
        AssertNormalCase(samples[1].captions[0], "there is no change")
        for sample in samples:
            AssertNormalCase(sample.img1.shape, (3, 16, 16))
            AssertNormalCase(len(sample.captions), 5)
            if sample.is_change:
                assert sample.change.quadrant in sample.captions[0]
                assert sample.change.colour in sample.captions[0]
            else:
                assert np.array_equal(sample.img1.data, sample.img2.data)

        again = GenerateDataset(6, seed=7, image_size=16)
        assert all(np.array_equal(a.img2.data, b.img2.data) for a, b in zip(samples, again))

    def test_AllCaptions(self) -> None:
        captions = set(AllCaptions())
        for sample in GenerateDataset(8, seed=1, image_size=16):
            assert set(sample.captions) <= captions

    def test_LoadManifest(self, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
        samples = GenerateDataset(4, seed=2, captions_per_sample=3, image_size=16)
        manifest = WriteDataset(samples, tmp_path / "data")
        # 图像路径相对于清单所在目录，与当前工作目录无关
        monkeypatch.chdir(tmp_path)
        loaded = LoadManifest(tmp_path / "data")
        AssertNormalCase(len(loaded), 4)
        for a, b in zip(samples, loaded):
            AssertNormalCase(a.captions, b.captions)
            AssertNormalCase(a.change, b.change)
            assert np.array_equal(a.img1.data, b.img1.data)
        AssertNormalCase(ReadJsonLines(manifest)[0]["t1"], "images/00000_t1.sft")

        (tmp_path / "data" / "images" / "00001_t2.sft").write_bytes(b"SFT1")
        with pytest.raises(ResourceError, match=r"第 2 行.*00001_t2\.sft"):
            LoadManifest(manifest)

        manifest.write_text('{"t1": "images/00000_t1.sft"}\n', encoding="utf-8")
        with pytest.raises(ResourceError, match="第 1 行"):
            LoadManifest(manifest)

        manifest.write_text("", encoding="utf-8")
        AssertNormalCase(LoadManifest(manifest), [])


class TestTrainingModule:
    def test_CrossEntropy(self) -> None:
        logits = Tensor(np.zeros((3, 4)))
        AssertCloseCase(CrossEntropy(logits, [1, 2, 3]).item(), np.log(4.0))
        # PAD 位置不计入
        logits = Tensor([[0.0, 10.0, 0.0, 0.0], [5.0, -5.0, 0.0, 0.0]])
        expected = -np.log(np.exp(10.0) / (np.exp(10.0) + 3.0))
        AssertCloseCase(CrossEntropy(logits, [1, PAD_ID]).item(), expected, tol=1e-12)
        with pytest.raises(ContractError):
            CrossEntropy(logits, [PAD_ID, PAD_ID])
        with pytest.raises(DimensionError):
            CrossEntropy(logits, [1, 2, 3])

    def test_AdamStep(self) -> None:
        cfg = TrainConfig(lr=1e-3)
        params = [Tensor([0.0, 1.0])]
        state = InitAdamState(params)
        new_params, state = AdamStep(params, [Tensor([1.0, -2.0])], state, 1, cfg)
        AssertCloseCase(
            new_params[0].data, [-1e-3 / (1 + 1e-8), 1.0 + 1e-3 * 2 / (2 + 1e-8)], tol=1e-12
        )
        AssertNormalCase(state.t, 1)
        AssertCloseCase(params[0].data, [0.0, 1.0])

        with pytest.raises(ContractError):
            AdamStep(params, [Tensor([1.0])], InitAdamState(params), 1, cfg)

    def test_TrainConfig(self) -> None:
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochs": 3})

    def test_Train(self) -> None:
        cfg = TinyModelConfig()
        samples = GenerateDataset(2, seed=0, image_size=16)
        vocab = BuildVocabulary(c for s in samples for c in s.captions)
        params = InitModelParams(cfg, len(vocab), seed=0)
        train_cfg = TrainConfig(lr=1e-2, batch=2, steps=3, log_every=1)
        first = Train(samples, params, cfg, vocab, train_cfg)
        second = Train(samples, params, cfg, vocab, train_cfg)
        AssertNormalCase(len(first.losses), 3)
        AssertNormalCase(first.losses, second.losses)
        assert all(np.isfinite(first.losses))
        assert not np.array_equal(
            first.params.decoder.out_w.data, params.decoder.out_w.data
        )

    def test_TrainLossDecreases(self) -> None:
        cfg = TinyModelConfig()
        decreasing = 0
        for seed in range(10):
            samples = GenerateDataset(2, seed=seed, image_size=16)
            vocab = BuildVocabulary(c for s in samples for c in s.captions)
            params = InitModelParams(cfg, len(vocab), seed=seed)
            # batch 不小于样本数时每步都是同一批样本
            train_cfg = TrainConfig(lr=1e-4, batch=2, steps=10, seed=seed)
            losses = Train(samples, params, cfg, vocab, train_cfg).losses
            decreasing += all(b < a for a, b in zip(losses, losses[1:]))
        assert decreasing >= 8

    def test_TrainDivergence(self, monkeypatch: pytest.MonkeyPatch) -> None:
        from SparseFocusTools import training

        cfg = TinyModelConfig()
        samples = GenerateDataset(2, seed=0, image_size=16)
        vocab = BuildVocabulary(c for s in samples for c in s.captions)
        params = InitModelParams(cfg, len(vocab), seed=0)

        def NanValueAndGrad(fn: Callable[[], Tensor], values: List[Tensor]) -> Any:
            return float("nan"), [Tensor(np.zeros(v.shape)) for v in values]

        monkeypatch.setattr(training, "ValueAndGrad", NanValueAndGrad)
        with pytest.raises(DivergenceError) as e:
            Train(samples, params, cfg, vocab, TrainConfig(steps=5))
        AssertNormalCase(e.value.step, 1)


class TestMetricsModule:
    def test_BleuN(self) -> None:
        for case in test_cases["metric_cases"]["bleu_cases"]:
            pair = EvalPair.from_texts(case["generated"], case["references"])
            AssertCloseCase(BleuN(pair, case["N"]), case["score"], tol=1e-12)

        for case in test_cases["metric_cases"]["fail_cases"]:
            with pytest.raises(error_text_to_obj[case["exception_name"]]):
                EvalPair.from_texts(case["generated"], case["references"])

    def test_CorpusBleu(self) -> None:
        pairs = [
            EvalPair.from_texts("a a", ["a a a a"]),
            EvalPair.from_texts("b b b b", ["b b b b"]),
        ]
        # 语料级：c = 6，r = 8
        AssertCloseCase(CorpusBleu(pairs, 1), np.exp(1 - 8 / 6), tol=1e-12)

    def test_RougeL(self) -> None:
        for case in test_cases["metric_cases"]["rouge_cases"]:
            pair = EvalPair.from_texts(case["generated"], case["references"])
            AssertCloseCase(RougeL(pair, case["mode"]), case["score"], tol=1e-12)

        with pytest.raises(ContractError):
            RougeL(EvalPair.from_texts("a", ["a"]), "recall")

    def test_Meteor(self) -> None:
        for case in test_cases["metric_cases"]["meteor_cases"]:
            pair = EvalPair.from_texts(case["generated"], case["references"])
            AssertCloseCase(Meteor(pair), case["score"], tol=1e-12)

    def test_CiderD(self) -> None:
        for case in test_cases["metric_cases"]["cider_cases"]:
            pairs = [EvalPair.from_texts(p["generated"], p["references"]) for p in case["pairs"]]
            scores, mean = CiderD(pairs)
            AssertCloseCase(scores, case["scores"], tol=1e-9)
            AssertCloseCase(mean, np.mean(case["scores"]), tol=1e-9)

    def test_GoldenPairs(self) -> None:
        pairs = [
            EvalPair.from_texts(p["generated"], p["references"])
            for p in test_cases["metric_cases"]["golden_pairs"]
        ]
        AssertNormalCase(len(pairs), 10)
        for pair in pairs:
            for N in range(1, 5):
                AssertCloseCase(BleuN(pair, N), BruteForceBleu(pair.generated, pair.references, N))
            AssertCloseCase(RougeL(pair), BruteForceRougeL(pair.generated, pair.references))
            AssertCloseCase(Meteor(pair), BruteForceMeteor(pair.generated, pair.references))
        scores, _ = CiderD(pairs)
        AssertCloseCase(scores, BruteForceCiderD(pairs))

    def test_ReferenceOrder(self) -> None:
        pairs = [
            EvalPair.from_texts(p["generated"], p["references"])
            for p in test_cases["metric_cases"]["golden_pairs"]
        ]
        reordered = [replace(pair, references=pair.references[::-1]) for pair in pairs]
        for a, b in zip(pairs, reordered):
            for N in range(1, 5):
                AssertNormalCase(BleuN(a, N), BleuN(b, N))
            for mode in ("literal", "fmeasure"):
                AssertNormalCase(RougeL(a, mode), RougeL(b, mode))
            AssertNormalCase(Meteor(a), Meteor(b))
        AssertCloseCase(CiderD(pairs)[0], CiderD(reordered)[0], tol=1e-12)

    def test_BleuMonotoneInN(self) -> None:
        for p in test_cases["metric_cases"]["golden_pairs"]:
            pair = EvalPair.from_texts(p["generated"], p["references"])
            scores = [BleuN(pair, N) for N in range(1, 5)]
            assert all(b <= a for a, b in zip(scores, scores[1:])), scores

    def test_CiderDPermutation(self) -> None:
        pairs = [
            EvalPair.from_texts(p["generated"], p["references"])
            for p in test_cases["metric_cases"]["golden_pairs"]
        ]
        scores, mean = CiderD(pairs)
        order = np.random.default_rng(21).permutation(len(pairs))
        permuted_scores, permuted_mean = CiderD([pairs[i] for i in order])
        AssertCloseCase(permuted_scores, [scores[i] for i in order], tol=1e-12)
        AssertCloseCase(permuted_mean, mean)

    def test_ChangeAccuracy(self) -> None:
        for case in test_cases["metric_cases"]["accuracy_cases"]:
            predictions = [tuple(p) for p in case["predictions"]]
            AssertCloseCase(ChangeAccuracy(predictions), case["accuracies"], tol=1e-12)

    def test_EmptyGenerated(self) -> None:
        pair = EvalPair.from_texts("", ["a b c d"])
        AssertNormalCase(BleuN(pair, 4), 0.0)
        AssertNormalCase(RougeL(pair), 0.0)
        AssertNormalCase(Meteor(pair), 0.0)

    def test_EvaluateCorpus(self) -> None:
        pairs = [
            EvalPair.from_texts("a red square was added", ["a red square was added"], "0", "change"),
            EvalPair.from_texts("there is no change", ["there is no change"], "1", "no-change"),
        ]
        report, rows = EvaluateCorpus(pairs)
        AssertCloseCase(report.bleu4, 1.0, tol=1e-12)
        AssertCloseCase(report.meteor, 1.0 - 0.5 * (1 / 5) ** 3 / 2 - 0.5 * (1 / 4) ** 3 / 2)
        AssertCloseCase(report.cider_d, 10.0, tol=1e-9)
        AssertNormalCase(report.total_accuracy, 1.0)
        AssertNormalCase([row["image_id"] for row in rows], ["0", "1"])

        report, _ = EvaluateCorpus([EvalPair.from_texts("a b", ["a b"])])
        assert report.change_accuracy is None


class TestAccountingModule:
    def test_AxialLogitMacs(self) -> None:
        for W, H in ((8, 8), (4, 6), (3, 3)):
            sparse = AxialLogitMacs(W, H, AxialVariant.full(), 1)
            AssertNormalCase(Fraction(sparse, (W * H) ** 2), Fraction(H + W - 1, W * H))

        AssertNormalCase(AxialLogitMacs(8, 8, AxialVariant.full(), 1), 960)

    def test_MacMonotonicity(self) -> None:
        for W, H in product(range(1, 9), repeat=2):
            macs = AxialLogitMacs(W, H, AxialVariant.full(), 2)
            assert AxialLogitMacs(W + 1, H, AxialVariant.full(), 2) > macs
            assert AxialLogitMacs(W, H + 1, AxialVariant.full(), 2) > macs

        by_length = [AxialLogitMacs(8, 8, AxialVariant.fixed(length), 2) for length in range(1, 9)]
        assert all(b > a for a, b in zip(by_length, by_length[1:]))
        AssertNormalCase(by_length[-1], AxialLogitMacs(8, 8, AxialVariant.full(), 2))

        by_depth = [
            CountMacs(TinyModelConfig(R=depth), 20).section_total("macs", "encoder")
            for depth in range(1, 5)
        ]
        assert all(b > a for a, b in zip(by_depth, by_depth[1:]))

    def test_CountMacs(self) -> None:
        cfg = ModelConfig()
        sparse = CountMacs(cfg, 30)
        dense = CountMacs(DenseBaselineConfig(cfg), 30, dense=True)
        ratio = Fraction(sparse.macs["encoder.logit"], dense.macs["encoder.logit"])
        # 8×8 网格：轴向邻域 15/64，通道缩减 1/8
        AssertNormalCase(ratio, Fraction(15, 512))
        AssertNormalCase(
            Fraction(sparse.macs["encoder.aggregate"], dense.macs["encoder.aggregate"]),
            Fraction(15, 64),
        )
        assert 1 - ratio > Fraction(9, 10)
        with pytest.raises(ContractError):
            CountMacs(cfg, 30, caption_length=0)

    def test_CountParams(self, tmp_path: Path) -> None:
        vocab = BuildVocabulary(AllCaptions())
        for i, cfg in enumerate((TinyModelConfig(), TinyModelConfig(R=2), SmallModelConfig())):
            CaptionModel.from_config(cfg, vocab, seed=0).save(tmp_path / str(i))
            report = CountParams(cfg, len(vocab))
            AssertNormalCase(report.total_params, CountCheckpointParams(tmp_path / str(i)))

        # 编码器参数量与变体无关
        a = CountParams(TinyModelConfig(), 20)
        b = CountParams(TinyModelConfig(variant=AxialVariant.fixed(1)), 20)
        AssertNormalCase(a.params, b.params)

        # 两层注意力堆叠的参数量恰为一层的两倍
        for cfg in (TinyModelConfig(), ModelConfig()):
            stacked = replace(cfg, sft=replace(cfg.sft, R=2))
            AssertNormalCase(
                CountParams(stacked, 20).section_total("params", "encoder"),
                2 * CountParams(cfg, 20).section_total("params", "encoder"),
            )

    def test_Compare(self) -> None:
        reports = AblationGrid(ModelConfig(), 30)
        AssertNormalCase(len(reports), 5)
        rows = Compare([reports[0], reports[-1]])
        total = next(r for r in rows if r.kind == "macs" and r.key == "encoder")
        assert total.ratio < 1
        assert "total" in FormatCostReport(reports[0])
        with pytest.raises(ContractError):
            Compare(reports[:1])


class TestConfigModule:
    def test_ApplyOverrides(self) -> None:
        for case in test_cases["config_cases"]["override_cases"]:
            data = ApplyOverrides(LoadConfigFile(None), [case["override"]])
            AssertNormalCase(data[case["section"]][case["key"]], case["value"])

        for case in test_cases["config_cases"]["fail_cases"]:
            with pytest.raises(error_text_to_obj[case["exception_name"]]):
                ApplyOverrides(LoadConfigFile(None), [case["override"]])

    def test_ResolveSeed(self) -> None:
        for case in test_cases["config_cases"]["seed_cases"]:
            data: Dict[str, Dict[str, Any]] = {"train": {}}
            if case["train_seed"] is not None:
                data["train"]["seed"] = case["train_seed"]
            AssertNormalCase(ResolveSeed(case["flag"], data, case["environ"]), case["seed"])

        with pytest.raises(ConfigError):
            ResolveSeed(None, None, {"SFT_SEED": "abc"})

    def test_BuildModelConfig(self, tmp_path: Path) -> None:
        path = tmp_path / "cfg.json"
        path.write_text('{"sft": {"R": 2, "variant": "fixed:4"}}', encoding="utf-8")
        cfg = BuildModelConfig(LoadConfigFile(path))
        AssertNormalCase(cfg.sft.R, 2)
        AssertNormalCase(cfg.sft.variant, AxialVariant.fixed(4))

        path.write_text('{"model": {}}', encoding="utf-8")
        with pytest.raises(ConfigError):
            LoadConfigFile(path)


class TestObjectsModule:
    def test_CaptionModel(self, tmp_path: Path) -> None:
        objects.clear_cache()
        cfg = TinyModelConfig()
        vocab = BuildVocabulary(AllCaptions())
        model = CaptionModel.from_config(cfg, vocab, seed=0)
        AssertNormalCase(model.parameters_count, CountParams(cfg, len(vocab)).total_params)
        assert objects.get_cache_items_count() >= 1
        assert "参数总量" in str(model)

        sample = GenerateDataset(1, seed=0, image_size=16)[0]
        caption = model.caption(sample.img1, sample.img2)
        assert isinstance(caption, str)

        model.save(tmp_path)
        loaded = CaptionModel.from_checkpoint(tmp_path)
        AssertNormalCase(loaded.caption(sample.img1, sample.img2), caption)
        assert loaded != model
        assert model == model

        attention_map = model.attention_map(sample.img1)
        AssertNormalCase(attention_map.weights.shape, (4, 3))
        with pytest.raises(IndexError):
            model.attention_map(sample.img1, layer=1)

    def test_CacheStatus(self) -> None:
        objects.set_cache_status(False)
        try:
            assert not objects.get_cache_status()
        finally:
            objects.set_cache_status(True)
        objects.clear_cache()
        AssertNormalCase(objects.get_cache_items_count(), 0)
        with pytest.raises(TypeError):
            objects.set_cache_status(1)  # type: ignore


def _SnapshotDirectory(directory: Path) -> Dict[str, bytes]:
    return {
        str(path.relative_to(directory)): path.read_bytes()
        for path in sorted(directory.rglob("*"))
        if path.is_file()
    }


class TestCliModule:
    def test_GenData(self, tmp_path: Path) -> None:
        out = tmp_path / "d"
        args = ["gen-data", "--n", "4", "--seed", "7", "--out", str(out)]
        AssertNormalCase(Dispatch(args), EXIT_OK)
        first = _SnapshotDirectory(out)
        AssertNormalCase(Dispatch(args), EXIT_OK)
        AssertNormalCase(_SnapshotDirectory(out), first)
        assert "run.json" in first
        AssertNormalCase(ReadJsonFile(out / "run.json")["seed"], 7)

    def test_TrainDecodeEval(self, tmp_path: Path) -> None:
        size = TINY_CLI_ARGS
        data, ckpt = tmp_path / "d", tmp_path / "ckpt"
        AssertNormalCase(Dispatch(["gen-data", "--n", "2", "--out", str(data), *size]), EXIT_OK)
        AssertNormalCase(
            Dispatch(["train", "--data", str(data), "--steps", "2", "--out", str(ckpt), *size]),
            EXIT_OK,
        )
        assert (ckpt / "tensors" / "decoder.embed.sft").is_file()

        decoded = tmp_path / "decoded"
        AssertNormalCase(
            Dispatch(["decode", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(decoded)]),
            EXIT_OK,
        )
        rows = ReadJsonLines(decoded / "captions.jsonl")
        AssertNormalCase([row["truth"] for row in rows], ["change", "no-change"])
        for row in rows:
            assert {"image_id", "caption", "truncated"} <= set(row)
            assert "generated" not in row
            assert isinstance(row["caption"], str)

        report = tmp_path / "report"
        AssertNormalCase(
            Dispatch(["eval", "--input", str(decoded / "captions.jsonl"), "--out", str(report)]),
            EXIT_OK,
        )
        assert "bleu4" in ReadJsonFile(report / "report.json")
        header = (report / "pairs.csv").read_text(encoding="utf-8").splitlines()[0]
        assert header.startswith("image_id,generated,bleu1")

        out = tmp_path / "count"
        AssertNormalCase(Dispatch(["count", "--checkpoint", str(ckpt), "--out", str(out)]), EXIT_OK)
        AssertNormalCase(
            ReadJsonFile(out / "cost_report.json")["total_params"], CountCheckpointParams(ckpt)
        )

    def test_EvalInputKeys(self, tmp_path: Path) -> None:
        path = tmp_path / "pairs.jsonl"
        path.write_text(
            '{"image_id": "0", "generated": "a red square", "references": ["a red square"]}\n'
            '{"image_id": "1", "caption": "there is no change", "references": ["there is no change"]}\n',
            encoding="utf-8",
        )
        AssertNormalCase(Dispatch(["eval", "--input", str(path), "--out", str(tmp_path / "r")]), EXIT_OK)
        lines = (tmp_path / "r" / "pairs.csv").read_text(encoding="utf-8").splitlines()
        AssertNormalCase(len(lines), 3)
        assert lines[2].startswith("1,there is no change,")

        path.write_text('{"image_id": "0", "references": ["a"]}\n', encoding="utf-8")
        AssertNormalCase(Dispatch(["eval", "--input", str(path), "--out", str(tmp_path)]), EXIT_RESOURCE)

    def test_RerunIsByteIdentical(self, tmp_path: Path) -> None:
        data = tmp_path / "d"
        AssertNormalCase(Dispatch(["gen-data", "--n", "2", "--out", str(data), *TINY_CLI_ARGS]), EXIT_OK)
        commands = [
            ["train", "--data", str(data), "--steps", "3", "--seed", "5", *TINY_CLI_ARGS],
            ["count", *TINY_CLI_ARGS],
        ]
        for command in commands:
            out = tmp_path / command[0]
            AssertNormalCase(Dispatch([*command, "--out", str(out)]), EXIT_OK)
            first = _SnapshotDirectory(out)
            AssertNormalCase(Dispatch([*command, "--out", str(out)]), EXIT_OK)
            AssertNormalCase(_SnapshotDirectory(out), first)

    def test_TrainDivergenceExit(self, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
        from SparseFocusTools import training

        data = tmp_path / "d"
        AssertNormalCase(Dispatch(["gen-data", "--n", "2", "--out", str(data), *TINY_CLI_ARGS]), EXIT_OK)

        def NanValueAndGrad(fn: Callable[[], Tensor], values: List[Tensor]) -> Any:
            return float("nan"), [Tensor(np.zeros(v.shape)) for v in values]

        monkeypatch.setattr(training, "ValueAndGrad", NanValueAndGrad)
        args = ["train", "--data", str(data), "--steps", "2", "--out", str(tmp_path / "c")]
        AssertNormalCase(Dispatch([*args, *TINY_CLI_ARGS]), EXIT_INPUT)

    def test_Count(self, tmp_path: Path) -> None:
        config = tmp_path / "toy.json"
        config.write_text('{"sft": {"variant": "fixed:4"}}', encoding="utf-8")
        AssertNormalCase(
            Dispatch(["count", "--config", str(config), "--out", str(tmp_path)]), EXIT_OK
        )
        report = ReadJsonFile(tmp_path / "cost_report.json")
        AssertNormalCase(report["metadata"]["config"]["sft"]["variant"], "fixed:4")
        AssertNormalCase(ReadJsonFile(tmp_path / "run.json")["command"], "count")

    def test_Bench(self, tmp_path: Path) -> None:
        AssertNormalCase(Dispatch(["bench", "--out", str(tmp_path)]), EXIT_OK)
        result = ReadJsonFile(tmp_path / "bench.json")
        AssertNormalCase(len(result["reports"]), 5)
        assert "timing" not in result

    def test_ExitCodes(self, tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
        AssertNormalCase(Dispatch(["count", "--no-such-flag"]), EXIT_INPUT)
        assert "usage" in capsys.readouterr().err
        AssertNormalCase(Dispatch(["compile"]), EXIT_INPUT)
        AssertNormalCase(
            Dispatch(["count", "--set", "sft.R=0", "--out", str(tmp_path)]), EXIT_INPUT
        )
        AssertNormalCase(
            Dispatch(
                ["decode", "--checkpoint", str(tmp_path / "none"), "--data", str(tmp_path), "--out", str(tmp_path)]
            ),
            EXIT_RESOURCE,
        )


@pytest.mark.slow
class TestAcceptance:
    def test_ToyCaptioning(self, tmp_path: Path) -> None:
        cfg = ModelConfig()
        samples = GenerateDataset(16, seed=1)
        vocab = BuildVocabulary(c for s in samples for c in s.captions)
        params = InitModelParams(cfg, len(vocab), seed=1)
        train_cfg = TrainConfig(lr=1e-4, steps=2000, seed=1, log_every=200)
        result = Train(samples, params, cfg, vocab, train_cfg)
        model = CaptionModel(result.params, cfg, vocab)
        generated = [model.caption(s.img1, s.img2) for s in samples]

        # 训练目标为每个样本的规范描述
        exact = sum(
            NormalizeCaption(caption) == NormalizeCaption(s.captions[0])
            for caption, s in zip(generated, samples)
        )
        assert exact >= 0.9 * len(samples)

        pairs = [
            EvalPair.from_texts(
                caption,
                list(s.captions),
                s.image_id,
                "change" if s.is_change else "no-change",
            )
            for caption, s in zip(generated, samples)
        ]
        report, _ = EvaluateCorpus(pairs)
        assert report.bleu4 >= 0.9
        assert report.total_accuracy == 1.0


if __name__ == "__main__":
    pytest.main(args=["-n 4"])  # 运行测试
