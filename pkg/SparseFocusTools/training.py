import logging
from contextlib import suppress
from dataclasses import dataclass, field, fields
from functools import partial
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .assert_funcs import AssertInRange, AssertNonEmpty, AssertPositiveInt
from .constants import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, PAD_ID
from .decoder import CaptionSequence, Vocabulary
from .exceptions import ConfigError, ContractError, DimensionError, DivergenceError, NumericalError
from .model import FlattenParams, ModelConfig, ModelLogits, ModelParams, UnflattenParams
from .tensor import (
    LogSoftmaxLast,
    Mul,
    ScalarMul,
    Sum,
    TakeAlongLast,
    Tensor,
    ValueAndGrad,
)

with suppress(ImportError):
    from tqdm import tqdm

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainResult",
    "CrossEntropy",
    "InitAdamState",
    "AdamStep",
    "Train",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """训练配置

    lr_decay 为损失停滞时的学习率衰减系数，停滞以每轮平均损失在 patience 轮内没有下降判断；
    weight_decay 为 L2 正则系数
    """

    lr: float = 1e-4
    lr_decay: float = 0.5
    patience: int = 5
    weight_decay: float = 0.0
    batch: int = 4
    steps: int = 2000
    seed: int = 0
    log_every: int = 100

    def __post_init__(self) -> None:
        AssertInRange(self.lr, 0.0, float("inf"), "lr", low_inclusive=False)
        AssertInRange(self.lr_decay, 0.0, 1.0, "lr_decay", low_inclusive=False)
        AssertInRange(self.weight_decay, 0.0, float("inf"), "weight_decay")
        for name in ("patience", "batch", "steps", "log_every"):
            AssertPositiveInt(getattr(self, name), name)
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed 应为非负整数，实际为 {self.seed!r}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"train 配置中存在未知配置项 {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0


@dataclass
class TrainResult:
    params: ModelParams
    losses: List[float] = field(default_factory=list)
    final_lr: float = 0.0


def CrossEntropy(
    logits: Tensor,
    targets: Union[CaptionSequence, Sequence[int]],
    pad_id: int = PAD_ID,
    disable_check: bool = False,
) -> Tensor:
    """目标词元的平均负对数似然，PAD 位置不计入

    Args:
        logits (Tensor): n×V logit
        targets (Sequence[int]): 长度为 n 的目标 ID
        pad_id (int, optional): 填充 ID. Defaults to 0.
        disable_check (bool, optional): 禁用参数有效性检查. Defaults to False.

    Raises:
        ContractError: 目标全部为 PAD 时抛出此错误

    Returns:
        Tensor: 单元素损失
    """
    ids = np.array(targets.ids if isinstance(targets, CaptionSequence) else targets, dtype=np.int64)
    if not disable_check:
        if logits.ndim != 2 or logits.shape[0] != ids.shape[0]:
            raise DimensionError(f"CrossEntropy：logit 形状 {logits.shape} 与目标长度 {ids.shape[0]} 不匹配")
        if ids.size and (ids.min() < 0 or ids.max() >= logits.shape[1]):
            raise ContractError(f"目标 ID 超出 [0, {logits.shape[1]}) 范围")
    keep = (ids != pad_id).astype(np.float64)
    count = keep.sum()
    if count == 0:
        raise ContractError("目标序列中没有非 PAD 词元")
    picked = TakeAlongLast(LogSoftmaxLast(logits), ids)
    return ScalarMul(Sum(Mul(picked, Tensor(keep))), -1.0 / count)


def InitAdamState(params: Sequence[Tensor]) -> AdamState:
    return AdamState(
        m=[np.zeros(p.shape) for p in params], v=[np.zeros(p.shape) for p in params], t=0
    )


def AdamStep(
    params: Sequence[Tensor],
    grads: Sequence[Tensor],
    state: AdamState,
    t: int,
    cfg: TrainConfig,
    lr: Optional[float] = None,
) -> Tuple[List[Tensor], AdamState]:
    """带偏差修正的 Adam 更新

    Args:
        params (Sequence[Tensor]): 参数
        grads (Sequence[Tensor]): 梯度
        state (AdamState): 一阶、二阶矩估计
        t (int): 步数，从 1 开始
        cfg (TrainConfig): 训练配置
        lr (Optional[float], optional): 覆盖 cfg.lr 的学习率. Defaults to None.

    Raises:
        ContractError: 参数与梯度形状不一致时抛出此错误

    Returns:
        Tuple[List[Tensor], AdamState]: 新的参数与状态，输入不会被修改
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError(f"参数、梯度与状态数量不一致：{len(params)}、{len(grads)}、{len(state.m)}")
    if t < 1:
        raise ContractError(f"Adam 步数从 1 开始，实际为 {t}")
    lr = cfg.lr if lr is None else lr
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ContractError(f"参数形状 {p.shape} 与梯度形状 {g.shape} 不一致")
        grad = g.data + cfg.weight_decay * p.data if cfg.weight_decay else g.data
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * grad * grad
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        new_params.append(Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def _BatchLoss(
    template: ModelParams,
    values: List[Tensor],
    cfg: ModelConfig,
    samples: Sequence[Any],
    sequences: List[Tuple[int, ...]],
    picked: List[int],
) -> Tensor:
    current = UnflattenParams(template, values)
    losses = []
    for i in picked:
        ids = sequences[i]
        logits = ModelLogits(current, cfg, samples[i].img1, samples[i].img2, ids[:-1])
        losses.append(CrossEntropy(logits, ids[1:], disable_check=True))
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return ScalarMul(total, 1.0 / len(picked))


def Train(
    samples: Sequence[Any],
    params: ModelParams,
    cfg: ModelConfig,
    vocab: Vocabulary,
    train_cfg: TrainConfig,
    progress: bool = False,
) -> TrainResult:
    """教师强制训练

    每轮按种子打乱样本后依次取 batch 个，损失为批内各样本规范描述的交叉熵均值

    Args:
        samples (Sequence[SyntheticSample]): 训练样本
        params (ModelParams): 初始参数
        cfg (ModelConfig): 模型配置
        vocab (Vocabulary): 词表
        train_cfg (TrainConfig): 训练配置
        progress (bool, optional): 是否显示 tqdm 进度条. Defaults to False.

    Raises:
        ContractError: 样本为空时抛出此错误
        DivergenceError: 损失出现非有限值时抛出此错误，包含出错步数

    Returns:
        TrainResult: 训练后的参数、逐步损失与最终学习率
    """
    AssertNonEmpty(samples, "训练样本")
    sequences = [vocab.encode(sample.captions[0]).ids for sample in samples]
    for sample, ids in zip(samples, sequences):
        if len(ids) - 1 > cfg.decoder.max_len:
            raise ContractError(f"样本 {sample.image_id} 的描述长度超过 max_len={cfg.decoder.max_len}")

    rng = np.random.default_rng(train_cfg.seed)
    values = list(FlattenParams(params).values())
    state = InitAdamState(values)
    lr = train_cfg.lr
    batch = min(train_cfg.batch, len(samples))
    steps_per_epoch = -(-len(samples) // batch)
    order: List[int] = []
    losses: List[float] = []
    epoch_losses: List[float] = []
    best_epoch_loss = float("inf")
    stale_epochs = 0

    steps = range(1, train_cfg.steps + 1)
    if progress:
        try:
            steps = tqdm(steps, desc="训练", unit="步")  # type: ignore
        except NameError:
            raise ImportError("未安装 tqdm 模块，无法显示进度条") from None

    for step in steps:
        if len(order) < batch:
            order.extend(int(i) for i in rng.permutation(len(samples)))
        picked, order = order[:batch], order[batch:]

        batch_loss = partial(_BatchLoss, params, values, cfg, samples, sequences, picked)
        try:
            loss, grads = ValueAndGrad(batch_loss, values)
        except NumericalError as e:
            raise DivergenceError(f"第 {step} 步出现非有限值：{e}", step) from e
        if not np.isfinite(loss):
            raise DivergenceError(f"第 {step} 步损失为 {loss}", step)
        values, state = AdamStep(values, grads, state, step, train_cfg, lr=lr)
        losses.append(loss)
        epoch_losses.append(loss)

        if step % train_cfg.log_every == 0:
            logger.info("第 %d 步 损失 %.6f 学习率 %.3g", step, loss, lr)
        if len(epoch_losses) == steps_per_epoch:
            epoch_loss = float(np.mean(epoch_losses))
            epoch_losses = []
            if epoch_loss < best_epoch_loss:
                best_epoch_loss, stale_epochs = epoch_loss, 0
            else:
                stale_epochs += 1
            if stale_epochs >= train_cfg.patience:
                lr *= train_cfg.lr_decay
                stale_epochs = 0
                logger.info("第 %d 步 损失停滞，学习率衰减为 %.3g", step, lr)

    return TrainResult(params=UnflattenParams(params, values), losses=losses, final_lr=lr)
