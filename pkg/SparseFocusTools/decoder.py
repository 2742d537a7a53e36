"""描述解码器

词嵌入与正余弦位置编码相加，经 n_layers 层（因果自注意力、图像交叉注意力、前馈网络，
均为后归一化残差结构）后投影到词表。权重按 x @ W 的方式相乘，W 形状为 (输入维度, 输出维度)。
"""

from dataclasses import dataclass, fields
from functools import lru_cache
from math import sqrt
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .assert_funcs import AssertPositiveInt, AssertShape, AssertTokenIds
from .constants import END_ID, MASK_FILL_VALUE, RESERVED_TOKENS, START_ID, UNK_ID
from .convert import FeatureMapToImageTokens, StripSpecialIds, Tokenize
from .exceptions import ConfigError, ContractError, DimensionError, VocabularyError
from .tensor import (
    Add,
    Concat,
    Einsum,
    LayerNorm,
    MaskedFill,
    MatMul,
    Relu,
    Reshape,
    ScalarMul,
    SoftmaxLast,
    TakeRows,
    Tensor,
)

__all__ = [
    "Vocabulary",
    "CaptionSequence",
    "DecoderConfig",
    "AttentionParams",
    "DecoderLayerParams",
    "DecoderParams",
    "BuildVocabulary",
    "PositionalEncoding",
    "Embed",
    "MaskedMHA",
    "DecoderLayer",
    "ProjectImageTokens",
    "DecoderLogits",
    "ProjectVocab",
    "DecodeStep",
    "GreedyDecode",
    "InitDecoderParams",
]

LogitFilter = Callable[[int, np.ndarray], np.ndarray]


class Vocabulary:
    """词元与 ID 的双向映射，前四个 ID 固定为 <pad>、<start>、<end>、<unk>"""

    def __init__(self, tokens: Sequence[str]) -> None:
        """构建词表

        Args:
            tokens (Sequence[str]): 全部词元，必须以四个保留词元开头

        Raises:
            VocabularyError: 保留词元缺失或词元重复时抛出此错误
        """
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise VocabularyError(f"词表必须以保留词元 {RESERVED_TOKENS} 开头")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("词表中存在重复词元")
        self._tokens = tokens
        self._ids = {token: i for i, token in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)})"

    @property
    def tokens(self) -> List[str]:
        return list(self._tokens)

    def token_to_id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def id_to_token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise VocabularyError(f"词元 ID {token_id} 超出词表范围 [0, {len(self)})")
        return self._tokens[token_id]

    def encode(self, text: str) -> "CaptionSequence":
        """将描述文本编码为以 START 开头、以 END 结尾的序列"""
        ids = [self.token_to_id(token) for token in Tokenize(text)]
        return CaptionSequence((START_ID, *ids, END_ID))

    def decode(self, ids: Sequence[int]) -> str:
        """将 ID 序列解码为文本，忽略 START、END 之后的内容与 PAD"""
        return " ".join(self.id_to_token(i) for i in StripSpecialIds(ids))


def BuildVocabulary(captions: Iterable[str]) -> Vocabulary:
    """由描述文本构建词表，普通词元按字典序排列

    Args:
        captions (Iterable[str]): 描述文本

    Returns:
        Vocabulary: 词表
    """
    words = {token for caption in captions for token in Tokenize(caption)}
    return Vocabulary([*RESERVED_TOKENS, *sorted(words - set(RESERVED_TOKENS))])


@dataclass(frozen=True)
class CaptionSequence:
    ids: Tuple[int, ...]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class DecoderConfig:
    d_embed: int = 64
    h: int = 4
    n_layers: int = 1
    d_ffn: int = 128
    max_len: int = 20

    def __post_init__(self) -> None:
        for f in fields(self):
            AssertPositiveInt(getattr(self, f.name), f.name)
        if self.d_embed % self.h:
            raise ConfigError(f"d_embed={self.d_embed} 不能被头数 h={self.h} 整除")
        if self.d_embed % 2:
            raise ConfigError(f"位置编码要求 d_embed 为偶数，实际为 {self.d_embed}")
        if self.max_len < 2:
            raise ConfigError(f"max_len 至少为 2，实际为 {self.max_len}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DecoderConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"decoder 配置中存在未知配置项 {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass(frozen=True)
class DecoderLayerParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    norm3_gamma: Tensor
    norm3_beta: Tensor


@dataclass(frozen=True)
class DecoderParams:
    embed: Tensor
    layers: Tuple[DecoderLayerParams, ...]
    img_w: Tensor
    img_b: Tensor
    out_w: Tensor
    out_b: Tensor

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]


@lru_cache(maxsize=16)
def PositionalEncoding(max_len: int, d_embed: int) -> Tensor:
    """正余弦位置编码

    PE[pos, 2i] = sin(pos / 10000^(2i/d))，PE[pos, 2i+1] = cos(pos / 10000^(2i/d))

    Args:
        max_len (int): 最大长度
        d_embed (int): 嵌入维度，必须为偶数

    Raises:
        ConfigError: d_embed 为奇数时抛出此错误

    Returns:
        Tensor: max_len×d_embed 位置编码
    """
    AssertPositiveInt(max_len, "max_len")
    AssertPositiveInt(d_embed, "d_embed")
    if d_embed % 2:
        raise ConfigError(f"位置编码要求 d_embed 为偶数，实际为 {d_embed}")
    positions = np.arange(max_len, dtype=np.float64)[:, None]
    angles = positions / np.power(10000.0, np.arange(0, d_embed, 2) / d_embed)
    table = np.empty((max_len, d_embed))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return Tensor(table)


def Embed(
    tokens: Union[CaptionSequence, Sequence[int]],
    params: DecoderParams,
    cfg: DecoderConfig,
    offset: int = 0,
    disable_check: bool = False,
) -> Tensor:
    """词嵌入加位置编码

    Args:
        tokens (Sequence[int]): 词元 ID 序列
        params (DecoderParams): 解码器参数
        cfg (DecoderConfig): 解码器配置
        offset (int, optional): 第一个词元的位置. Defaults to 0.
        disable_check (bool, optional): 禁用参数有效性检查. Defaults to False.

    Raises:
        VocabularyError: 词元 ID 越界时抛出此错误
        ContractError: 序列超过 max_len 时抛出此错误

    Returns:
        Tensor: n×d_embed 嵌入
    """
    ids = list(tokens.ids if isinstance(tokens, CaptionSequence) else tokens)
    if not disable_check:
        AssertTokenIds(ids, params.vocab_size)
        if not ids:
            raise ContractError("词元序列不能为空")
        if offset + len(ids) > cfg.max_len:
            raise ContractError(f"序列长度 {offset + len(ids)} 超过 max_len={cfg.max_len}")
    table = PositionalEncoding(cfg.max_len, cfg.d_embed)
    return Add(TakeRows(params.embed, np.array(ids)), Tensor(table.data[offset : offset + len(ids)]))


def _Linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return Add(MatMul(x, w), b)


def MaskedMHA(
    x: Tensor,
    kv: Tensor,
    causal: bool,
    params: AttentionParams,
    cfg: DecoderConfig,
    disable_check: bool = False,
) -> Tensor:
    """多头缩放点积注意力

    x 为 kv 的最后 n 行时，causal 禁止位置 i 关注其后的位置

    Args:
        x (Tensor): n×d_embed 查询
        kv (Tensor): m×d_embed 键值来源
        causal (bool): 是否使用因果掩码
        params (AttentionParams): 注意力参数
        cfg (DecoderConfig): 解码器配置
        disable_check (bool, optional): 禁用参数有效性检查. Defaults to False.

    Returns:
        Tensor: n×d_embed 输出
    """
    d, h = cfg.d_embed, cfg.h
    if not disable_check:
        AssertShape(x.shape, (None, d), "查询")
        AssertShape(kv.shape, (None, d), "键值")
        if causal and kv.shape[0] < x.shape[0]:
            raise DimensionError(f"因果注意力要求键值行数不少于查询行数，实际为 {kv.shape} 与 {x.shape}")
    n, m = x.shape[0], kv.shape[0]
    head_width = d // h
    q = Reshape(_Linear(x, params.wq, params.bq), (n, h, head_width))
    k = Reshape(_Linear(kv, params.wk, params.bk), (m, h, head_width))
    v = Reshape(_Linear(kv, params.wv, params.bv), (m, h, head_width))
    logits = ScalarMul(Einsum("nhd,mhd->hnm", q, k), 1.0 / sqrt(head_width))
    if causal:
        future = np.arange(m)[None, :] > np.arange(n)[:, None] + (m - n)
        logits = MaskedFill(logits, future[None], MASK_FILL_VALUE)
    heads = Einsum("hnm,mhd->nhd", SoftmaxLast(logits), v)
    return _Linear(Reshape(heads, (n, d)), params.wo, params.bo)


def _DecoderLayerRows(
    x: Tensor,
    history: Tensor,
    image_tokens: Tensor,
    params: DecoderLayerParams,
    cfg: DecoderConfig,
) -> Tensor:
    a = LayerNorm(
        Add(x, MaskedMHA(x, history, True, params.self_attn, cfg, disable_check=True)),
        params.norm1_gamma,
        params.norm1_beta,
    )
    b = LayerNorm(
        Add(a, MaskedMHA(a, image_tokens, False, params.cross_attn, cfg, disable_check=True)),
        params.norm2_gamma,
        params.norm2_beta,
    )
    ffn = _Linear(Relu(_Linear(b, params.w1, params.b1)), params.w2, params.b2)
    return LayerNorm(Add(b, ffn), params.norm3_gamma, params.norm3_beta)


def DecoderLayer(
    t: Tensor,
    image_tokens: Tensor,
    params: DecoderLayerParams,
    cfg: DecoderConfig,
    disable_check: bool = False,
) -> Tensor:
    """解码器层：因果自注意力、图像交叉注意力、前馈网络，每个子层为 LayerNorm(x + 子层(x))

    Args:
        t (Tensor): n×d_embed 文本表示
        image_tokens (Tensor): 已投影到 d_embed 的图像词元
        params (DecoderLayerParams): 层参数
        cfg (DecoderConfig): 解码器配置
        disable_check (bool, optional): 禁用参数有效性检查. Defaults to False.

    Returns:
        Tensor: n×d_embed 输出
    """
    if not disable_check:
        AssertShape(t.shape, (None, cfg.d_embed), "文本表示")
        AssertShape(image_tokens.shape, (None, cfg.d_embed), "图像词元")
    return _DecoderLayerRows(t, t, image_tokens, params, cfg)


def ProjectImageTokens(features: Tensor, params: DecoderParams) -> Tensor:
    """将 2C×W×H 编码结果展平为 W·H 个图像词元并线性投影到 d_embed"""
    tokens = FeatureMapToImageTokens(features)
    if tokens.shape[1] != params.img_w.shape[0]:
        raise DimensionError(f"图像词元宽度 {tokens.shape[1]} 与投影权重 {params.img_w.shape} 不匹配")
    return _Linear(tokens, params.img_w, params.img_b)


def DecoderLogits(
    tokens: Sequence[int],
    image_tokens: Tensor,
    params: DecoderParams,
    cfg: DecoderConfig,
    disable_check: bool = False,
) -> Tensor:
    """教师强制前向，返回每个位置的下一词元 logit

    Args:
        tokens (Sequence[int]): 输入词元 ID
        image_tokens (Tensor): 已投影的图像词元
        params (DecoderParams): 解码器参数
        cfg (DecoderConfig): 解码器配置
        disable_check (bool, optional): 禁用参数有效性检查. Defaults to False.

    Returns:
        Tensor: n×V logit
    """
    if not disable_check:
        _CheckDecoderParams(params, cfg)
        AssertShape(image_tokens.shape, (None, cfg.d_embed), "图像词元")
    t = Embed(tokens, params, cfg, disable_check=disable_check)
    for layer in params.layers:
        t = _DecoderLayerRows(t, t, image_tokens, layer, cfg)
    return _Linear(t, params.out_w, params.out_b)


def ProjectVocab(t: Tensor, params: DecoderParams) -> Tensor:
    """线性投影到词表后按行 softmax，得到 n×V 词概率"""
    if t.ndim != 2 or t.shape[1] != params.out_w.shape[0]:
        raise DimensionError(f"ProjectVocab：输入形状 {t.shape} 与投影权重 {params.out_w.shape} 不匹配")
    return SoftmaxLast(_Linear(t, params.out_w, params.out_b))


def DecodeStep(
    token_id: int,
    position: int,
    cache: Sequence[Optional[Tensor]],
    image_tokens: Tensor,
    params: DecoderParams,
    cfg: DecoderConfig,
) -> Tuple[np.ndarray, List[Tensor]]:
    """增量解码一步

    缓存保存每一层此前全部位置的输入，当前位置只需计算一行

    Args:
        token_id (int): 当前位置的词元 ID
        position (int): 当前位置
        cache (Sequence[Optional[Tensor]]): 每层的历史输入，首步为 None
        image_tokens (Tensor): 已投影的图像词元
        params (DecoderParams): 解码器参数
        cfg (DecoderConfig): 解码器配置

    Returns:
        Tuple[np.ndarray, List[Tensor]]: 长度为 V 的 logit 与更新后的缓存
    """
    x = Embed([token_id], params, cfg, offset=position)
    new_cache = []
    for layer, history in zip(params.layers, cache):
        history = x if history is None else Concat([history, x], axis=0)
        new_cache.append(history)
        x = _DecoderLayerRows(x, history, image_tokens, layer, cfg)
    return _Linear(x, params.out_w, params.out_b).numpy()[0], new_cache


def GreedyDecode(
    image_tokens: Tensor,
    params: DecoderParams,
    cfg: DecoderConfig,
    logit_filter: Optional[LogitFilter] = None,
    disable_check: bool = False,
) -> CaptionSequence:
    """贪心自回归解码

    从 START 开始每步追加 logit 最大的词元（并列时取最小 ID），生成 END 或达到 max_len 时停止

    Args:
        image_tokens (Tensor): 已投影的图像词元
        params (DecoderParams): 解码器参数
        cfg (DecoderConfig): 解码器配置
        logit_filter (Optional[LogitFilter], optional): 以 (步数, logit) 为参数、
            返回新 logit 的函数. Defaults to None.
        disable_check (bool, optional): 禁用参数有效性检查. Defaults to False.

    Returns:
        CaptionSequence: 以 START 开头的序列，未生成 END 时 truncated 为 True
    """
    if not disable_check:
        _CheckDecoderParams(params, cfg)
        AssertShape(image_tokens.shape, (None, cfg.d_embed), "图像词元")
    ids = [START_ID]
    cache: List[Optional[Tensor]] = [None] * len(params.layers)
    while len(ids) < cfg.max_len:
        logits, cache = DecodeStep(ids[-1], len(ids) - 1, cache, image_tokens, params, cfg)
        if logit_filter is not None:
            logits = logit_filter(len(ids) - 1, logits)
        ids.append(int(np.argmax(logits)))
        if ids[-1] == END_ID:
            break
    return CaptionSequence(tuple(ids), truncated=ids[-1] != END_ID)


def _CheckDecoderParams(params: DecoderParams, cfg: DecoderConfig) -> None:
    d, V = cfg.d_embed, params.vocab_size
    AssertShape(params.embed.shape, (None, d), "embed")
    AssertShape(params.img_w.shape, (None, d), "img_w")
    AssertShape(params.img_b.shape, (d,), "img_b")
    AssertShape(params.out_w.shape, (d, V), "out_w")
    AssertShape(params.out_b.shape, (V,), "out_b")
    if len(params.layers) != cfg.n_layers:
        raise ConfigError(f"解码器需要 n_layers={cfg.n_layers} 层参数，实际为 {len(params.layers)} 层")
    for layer in params.layers:
        for attn in (layer.self_attn, layer.cross_attn):
            for name in ("wq", "wk", "wv", "wo"):
                AssertShape(getattr(attn, name).shape, (d, d), name)
        AssertShape(layer.w1.shape, (d, cfg.d_ffn), "w1")
        AssertShape(layer.w2.shape, (cfg.d_ffn, d), "w2")


def _Uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def _InitAttention(d: int, rng: np.random.Generator) -> AttentionParams:
    return AttentionParams(
        **{
            name: _Uniform(rng, (d, d) if name.startswith("w") else (d,), d)
            for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
        }
    )


def InitDecoderParams(
    cfg: DecoderConfig, vocab_size: int, image_channels: int, rng: np.random.Generator
) -> DecoderParams:
    """初始化解码器参数

    线性层按 uniform(±1/√fan_in) 初始化，层归一化 gamma 为 1、beta 为 0

    Args:
        cfg (DecoderConfig): 解码器配置
        vocab_size (int): 词表大小
        image_channels (int): 图像词元宽度（2C）
        rng (np.random.Generator): 随机数生成器

    Returns:
        DecoderParams: 解码器参数
    """
    d, ffn = cfg.d_embed, cfg.d_ffn
    layers = []
    for _ in range(cfg.n_layers):
        norms: Dict[str, Tensor] = {}
        for i in (1, 2, 3):
            norms[f"norm{i}_gamma"] = Tensor(np.ones(d))
            norms[f"norm{i}_beta"] = Tensor(np.zeros(d))
        layers.append(
            DecoderLayerParams(
                self_attn=_InitAttention(d, rng),
                cross_attn=_InitAttention(d, rng),
                w1=_Uniform(rng, (d, ffn), d),
                b1=_Uniform(rng, (ffn,), d),
                w2=_Uniform(rng, (ffn, d), ffn),
                b2=_Uniform(rng, (d,), ffn),
                **norms,
            )
        )
    return DecoderParams(
        embed=Tensor(rng.normal(0.0, 1.0, size=(vocab_size, d))),
        layers=tuple(layers),
        img_w=_Uniform(rng, (image_channels, d), image_channels),
        img_b=_Uniform(rng, (d,), image_channels),
        out_w=_Uniform(rng, (d, vocab_size), d),
        out_b=_Uniform(rng, (vocab_size,), d),
    )
