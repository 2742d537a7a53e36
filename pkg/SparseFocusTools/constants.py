__all__ = [
    "PAD_ID",
    "START_ID",
    "END_ID",
    "UNK_ID",
    "RESERVED_TOKENS",
    "SFT1_MAGIC",
    "MASK_FILL_VALUE",
    "LAYER_NORM_EPS",
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPS",
    "METEOR_ALPHA",
    "METEOR_GAMMA",
    "METEOR_THETA",
    "CIDER_SIGMA",
    "CIDER_MAX_N",
    "ROUGE_BETA",
    "NO_CHANGE_CAPTIONS",
]

# 保留词元，ID 固定
PAD_ID = 0
START_ID = 1
END_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<start>", "<end>", "<unk>")

SFT1_MAGIC = b"SFT1"

# 以大负数代替 -inf，softmax 后对应位置严格为 0
MASK_FILL_VALUE = -1e30

LAYER_NORM_EPS = 1e-5

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_THETA = 3.0

CIDER_SIGMA = 6.0
CIDER_MAX_N = 4

# ROUGE-L F 值形式的召回权重
ROUGE_BETA = 1.2

# 无变化描述池，第一条为规范描述
NO_CHANGE_CAPTIONS = (
    "there is no change",
    "the two scenes are the same",
    "nothing has changed in the scene",
    "no difference can be seen",
    "the scene remains unchanged",
)
