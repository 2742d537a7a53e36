"""描述质量指标：BLEU-N、ROUGE-L、METEOR、CIDEr-D 与变化分类准确率

所有指标的输入都经过与解码器相同的分词（小写、去标点、按空白切分）。
"""

import csv
import logging
from collections import Counter
from dataclasses import dataclass, fields
from functools import lru_cache
from math import exp, log, sqrt
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

from .assert_funcs import AssertInRange, AssertNonEmpty
from .constants import (
    CIDER_MAX_N,
    CIDER_SIGMA,
    METEOR_ALPHA,
    METEOR_GAMMA,
    METEOR_THETA,
    NO_CHANGE_CAPTIONS,
    ROUGE_BETA,
)
from .convert import NormalizeCaption, Tokenize
from .exceptions import ContractError
from .utils import NameValueMappingToString

__all__ = [
    "EvalPair",
    "MetricReport",
    "BleuN",
    "CorpusBleu",
    "RougeL",
    "Meteor",
    "CiderD",
    "IsNoChangeCaption",
    "ChangeAccuracy",
    "EvaluateCorpus",
    "WritePairCsv",
]

logger = logging.getLogger(__name__)

Tokens = Tuple[str, ...]
NGram = Tuple[str, ...]

_NO_CHANGE_SET = frozenset(NormalizeCaption(c) for c in NO_CHANGE_CAPTIONS)


@dataclass(frozen=True)
class EvalPair:
    """一条生成描述与其参考描述，空参考会被丢弃"""

    generated: Tokens
    references: Tuple[Tokens, ...]
    image_id: str = ""
    truth: Optional[str] = None

    def __post_init__(self) -> None:
        references = tuple(tuple(r) for r in self.references if len(r) > 0)
        if not references:
            raise ContractError(f"样本 {self.image_id!r} 至少需要一条非空参考描述")
        if self.truth not in (None, "change", "no-change"):
            raise ContractError(f"truth 应为 change 或 no-change，实际为 {self.truth!r}")
        object.__setattr__(self, "generated", tuple(self.generated))
        object.__setattr__(self, "references", references)

    @classmethod
    def from_texts(
        cls,
        generated: str,
        references: Sequence[str],
        image_id: str = "",
        truth: Optional[str] = None,
    ) -> "EvalPair":
        return cls(
            generated=tuple(Tokenize(generated)),
            references=tuple(tuple(Tokenize(r)) for r in references),
            image_id=image_id,
            truth=truth,
        )


@dataclass(frozen=True)
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    meteor: float
    cider_d: float
    change_accuracy: Optional[float] = None
    nochange_accuracy: Optional[float] = None
    total_accuracy: Optional[float] = None

    def to_dict(self) -> Dict[str, Optional[float]]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def __str__(self) -> str:
        return NameValueMappingToString(
            {name: (value, False) for name, value in self.to_dict().items()},
            title="评估结果",
        )


def _NGrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _ClosestRefLength(candidate_length: int, references: Sequence[Tokens]) -> int:
    # 距离相同时取较短的参考
    return min((abs(len(r) - candidate_length), len(r)) for r in references)[1]


def _ClippedCounts(pair: EvalPair, n: int) -> Tuple[int, int]:
    counts = _NGrams(pair.generated, n)
    max_ref_counts: Counter = Counter()
    for reference in pair.references:
        max_ref_counts |= _NGrams(reference, n)
    clipped = sum(min(count, max_ref_counts[ngram]) for ngram, count in counts.items())
    return clipped, max(len(pair.generated) - n + 1, 0)


def _BleuFromCounts(
    clipped: Sequence[int], totals: Sequence[int], c: int, r: int
) -> float:
    if c == 0 or any(m == 0 for m in clipped):
        return 0.0
    log_precision = sum(log(m / t) for m, t in zip(clipped, totals)) / len(clipped)
    brevity_penalty = 1.0 if c > r else exp(1 - r / c)
    return brevity_penalty * exp(log_precision)


def BleuN(pair: EvalPair, N: int) -> float:
    """单句 BLEU-N

    n 元组精度按参考中的最大出现次数截断，几何平均后乘以简短惩罚，
    参考长度取与生成长度最接近的参考；任一精度为 0 时得分为 0

    Args:
        pair (EvalPair): 评估样本
        N (int): 最大 n 元组长度，1~4

    Returns:
        float: 得分
    """
    AssertInRange(N, 1, 4, "N")
    if not pair.generated:
        logger.warning("样本 %r 的生成描述为空，BLEU 记为 0", pair.image_id)
        return 0.0
    clipped, totals = zip(*(_ClippedCounts(pair, n) for n in range(1, N + 1)))
    c = len(pair.generated)
    return _BleuFromCounts(clipped, totals, c, _ClosestRefLength(c, pair.references))


def CorpusBleu(pairs: Sequence[EvalPair], N: int) -> float:
    """语料级 BLEU-N，各样本的截断计数、候选长度与参考长度先求和再计算"""
    AssertNonEmpty(pairs, "评估样本")
    AssertInRange(N, 1, 4, "N")
    clipped, totals = [0] * N, [0] * N
    c = r = 0
    for pair in pairs:
        for n in range(1, N + 1):
            m, t = _ClippedCounts(pair, n)
            clipped[n - 1] += m
            totals[n - 1] += t
        c += len(pair.generated)
        r += _ClosestRefLength(len(pair.generated), pair.references)
    return _BleuFromCounts(clipped, totals, c, r)


def _LcsLength(a: Sequence[str], b: Sequence[str]) -> int:
    previous = [0] * (len(b) + 1)
    for token_a in a:
        current = [0]
        for j, token_b in enumerate(b):
            current.append(previous[j] + 1 if token_a == token_b else max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def RougeL(pair: EvalPair, mode: str = "literal") -> float:
    """ROUGE-L

    literal 模式为 LCS / max(生成长度, 参考长度) 在各参考上的最大值；
    fmeasure 模式取各参考上的最大精度与最大召回，计算 β=1.2 的 F 值

    Args:
        pair (EvalPair): 评估样本
        mode (str, optional): literal 或 fmeasure. Defaults to "literal".

    Returns:
        float: 得分
    """
    if mode not in ("literal", "fmeasure"):
        raise ContractError(f"未知的 ROUGE-L 模式 {mode!r}，应为 literal 或 fmeasure")
    if not pair.generated:
        logger.warning("样本 %r 的生成描述为空，ROUGE-L 记为 0", pair.image_id)
        return 0.0
    lcs = [_LcsLength(pair.generated, r) for r in pair.references]
    if mode == "literal":
        return max(
            length / max(len(pair.generated), len(r)) for length, r in zip(lcs, pair.references)
        )
    precision = max(length / len(pair.generated) for length in lcs)
    recall = max(length / len(r) for length, r in zip(lcs, pair.references))
    if precision == 0 or recall == 0:
        return 0.0
    beta2 = ROUGE_BETA**2
    return (1 + beta2) * precision * recall / (recall + beta2 * precision)


def _Align(generated: Tokens, reference: Tokens) -> List[Tuple[int, int]]:
    """在匹配数最大的对齐中搜索块数最少的一个，块数相同时取先遇到的对齐"""
    ref_count = Counter(reference)
    target = {token: min(count, ref_count[token]) for token, count in Counter(generated).items()}
    positions = {token: [j for j, ref in enumerate(reference) if ref == token] for token in target}
    rest = [Counter(generated[i:]) for i in range(len(generated))]

    @lru_cache(maxsize=None)
    def Search(
        i: int, used: FrozenSet[int], previous: Optional[int]
    ) -> Tuple[int, Tuple[Tuple[int, int], ...]]:
        if i == len(generated):
            return 0, ()
        token = generated[i]
        need = target[token] - sum(1 for j in used if reference[j] == token)
        best: Optional[Tuple[int, Tuple[Tuple[int, int], ...]]] = None
        # 跳过当前词后剩余的同类词仍足以凑满最大匹配数
        if need < rest[i][token]:
            best = Search(i + 1, used, None)
        if need > 0:
            for j in positions[token]:
                if j in used:
                    continue
                chunks, tail = Search(i + 1, used | {j}, j)
                if previous is None or j != previous + 1:
                    chunks += 1
                if best is None or chunks < best[0]:
                    best = (chunks, ((i, j), *tail))
        assert best is not None
        return best

    return list(Search(0, frozenset(), None)[1])


def _MeteorSingle(generated: Tokens, reference: Tokens) -> float:
    alignment = _Align(generated, reference)
    matches = len(alignment)
    if matches == 0:
        return 0.0
    precision = matches / len(generated)
    recall = matches / len(reference)
    f_mean = precision * recall / (METEOR_ALPHA * precision + (1 - METEOR_ALPHA) * recall)
    chunks = 1 + sum(
        1
        for (i0, j0), (i1, j1) in zip(alignment, alignment[1:])
        if i1 != i0 + 1 or j1 != j0 + 1
    )
    penalty = METEOR_GAMMA * (chunks / matches) ** METEOR_THETA
    return f_mean * (1 - penalty)


def Meteor(pair: EvalPair) -> float:
    """精确一元匹配的 METEOR

    F = P·R / (α·P + (1-α)·R)，惩罚 = γ·(块数/匹配数)^θ，得分 = F·(1-惩罚)，取各参考上的最大值

    Args:
        pair (EvalPair): 评估样本

    Returns:
        float: 得分
    """
    if not pair.generated:
        logger.warning("样本 %r 的生成描述为空，METEOR 记为 0", pair.image_id)
        return 0.0
    return max(_MeteorSingle(pair.generated, r) for r in pair.references)


def _AllNGrams(tokens: Tokens) -> Counter:
    counts: Counter = Counter()
    for n in range(1, CIDER_MAX_N + 1):
        counts.update(_NGrams(tokens, n))
    return counts


def _TfIdfVector(
    counts: Counter, document_frequency: Counter, ref_len: float
) -> Tuple[List[Dict[NGram, float]], List[float]]:
    vec: List[Dict[NGram, float]] = [{} for _ in range(CIDER_MAX_N)]
    norm = [0.0] * CIDER_MAX_N
    for ngram, term_freq in counts.items():
        n = len(ngram) - 1
        value = term_freq * (ref_len - log(max(1.0, document_frequency[ngram])))
        vec[n][ngram] = value
        norm[n] += value * value
    return vec, [sqrt(x) for x in norm]


def CiderD(pairs: Sequence[EvalPair]) -> Tuple[List[float], float]:
    """语料级 CIDEr-D

    IDF 由全部样本的参考集合计算，TF-IDF 向量按参考截断，乘以长度高斯惩罚（σ=6），
    对 n=1~4 与各参考取平均后乘以 10

    Args:
        pairs (Sequence[EvalPair]): 评估样本

    Returns:
        Tuple[List[float], float]: 每个样本的得分与平均分
    """
    AssertNonEmpty(pairs, "评估样本")
    reference_counts = [[_AllNGrams(r) for r in pair.references] for pair in pairs]
    document_frequency: Counter = Counter()
    for counts in reference_counts:
        document_frequency.update(set().union(*counts))
    ref_len = log(float(len(pairs)))

    scores = []
    for pair, counts in zip(pairs, reference_counts):
        vec_hyp, norm_hyp = _TfIdfVector(_AllNGrams(pair.generated), document_frequency, ref_len)
        total = 0.0
        for reference, ref_counts in zip(pair.references, counts):
            vec_ref, norm_ref = _TfIdfVector(ref_counts, document_frequency, ref_len)
            delta = float(len(pair.generated) - len(reference))
            gaussian = exp(-(delta**2) / (2 * CIDER_SIGMA**2))
            for n in range(CIDER_MAX_N):
                value = sum(
                    min(weight, vec_ref[n].get(ngram, 0.0)) * vec_ref[n].get(ngram, 0.0)
                    for ngram, weight in vec_hyp[n].items()
                )
                if norm_hyp[n] != 0 and norm_ref[n] != 0:
                    value /= norm_hyp[n] * norm_ref[n]
                total += value * gaussian / CIDER_MAX_N
        scores.append(total / len(pair.references) * 10.0)
    return scores, sum(scores) / len(scores)


def IsNoChangeCaption(caption: str) -> bool:
    """归一化后属于无变化描述池即视为无变化"""
    return NormalizeCaption(caption) in _NO_CHANGE_SET


def ChangeAccuracy(predictions: Sequence[Tuple[str, str]]) -> Tuple[float, float, float]:
    """变化/无变化分类准确率

    Args:
        predictions (Sequence[Tuple[str, str]]): (生成描述, 真实类别) 列表，类别为 change 或 no-change

    Returns:
        Tuple[float, float, float]: 变化类准确率、无变化类准确率与总准确率，
            某一类没有样本时该类准确率记为 1.0
    """
    AssertNonEmpty(predictions, "预测结果")
    correct = {"change": 0, "no-change": 0}
    seen = {"change": 0, "no-change": 0}
    for caption, truth in predictions:
        if truth not in seen:
            raise ContractError(f"真实类别应为 change 或 no-change，实际为 {truth!r}")
        predicted = "no-change" if IsNoChangeCaption(caption) else "change"
        seen[truth] += 1
        correct[truth] += predicted == truth

    def ClassAccuracy(label: str) -> float:
        if seen[label] == 0:
            logger.warning("没有 %s 类样本，该类准确率记为 1.0", label)
            return 1.0
        return correct[label] / seen[label]

    total = (correct["change"] + correct["no-change"]) / len(predictions)
    return ClassAccuracy("change"), ClassAccuracy("no-change"), total


def EvaluateCorpus(
    pairs: Sequence[EvalPair], rouge_mode: str = "literal"
) -> Tuple[MetricReport, List[Dict[str, Any]]]:
    """计算全部指标

    BLEU 为语料级，ROUGE-L、METEOR 为逐样本平均，准确率只统计带有 truth 的样本

    Args:
        pairs (Sequence[EvalPair]): 评估样本
        rouge_mode (str, optional): ROUGE-L 模式. Defaults to "literal".

    Returns:
        Tuple[MetricReport, List[Dict[str, Any]]]: 汇总结果与逐样本结果行
    """
    AssertNonEmpty(pairs, "评估样本")
    cider_scores, cider_mean = CiderD(pairs)
    rows = []
    for pair, cider in zip(pairs, cider_scores):
        row: Dict[str, Any] = {"image_id": pair.image_id, "generated": " ".join(pair.generated)}
        for n in range(1, 5):
            row[f"bleu{n}"] = BleuN(pair, n)
        row["rouge_l"] = RougeL(pair, rouge_mode)
        row["meteor"] = Meteor(pair)
        row["cider_d"] = cider
        rows.append(row)

    labelled = [(" ".join(p.generated), p.truth) for p in pairs if p.truth is not None]
    accuracies: Tuple[Optional[float], ...] = (None, None, None)
    if labelled:
        accuracies = ChangeAccuracy(labelled)  # type: ignore
    report = MetricReport(
        bleu1=CorpusBleu(pairs, 1),
        bleu2=CorpusBleu(pairs, 2),
        bleu3=CorpusBleu(pairs, 3),
        bleu4=CorpusBleu(pairs, 4),
        rouge_l=sum(row["rouge_l"] for row in rows) / len(rows),
        meteor=sum(row["meteor"] for row in rows) / len(rows),
        cider_d=cider_mean,
        change_accuracy=accuracies[0],
        nochange_accuracy=accuracies[1],
        total_accuracy=accuracies[2],
    )
    return report, rows


def WritePairCsv(rows: Sequence[Dict[str, Any]], path: Union[str, Path]) -> None:
    columns = ["image_id", "generated", "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "meteor", "cider_d"]
    with Path(path).open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row[key] for key in columns})
