__all__ = [
    "InputError",
    "DimensionError",
    "ConfigError",
    "VocabularyError",
    "ContractError",
    "ResourceError",
    "NumericalError",
    "DivergenceError",
    "GridIndexError",
]


class InputError(Exception):
    """函数参数错误时抛出此异常"""

    pass


class DimensionError(InputError):
    """张量形状不匹配时抛出此异常"""

    pass


class ConfigError(InputError):
    """配置项无效时抛出此异常"""

    pass


class VocabularyError(InputError):
    """词元 ID 超出词表范围时抛出此异常"""

    pass


class ContractError(InputError):
    """调用不满足函数前置条件时抛出此异常"""

    pass


class ResourceError(Exception):
    """文件不存在、格式错误或内容被截断时抛出此异常"""

    pass


class NumericalError(Exception):
    """运算结果中出现非有限值时抛出此异常"""

    pass


class DivergenceError(Exception):
    """训练损失变为非有限值时抛出此异常"""

    def __init__(self, message: str, step: int) -> None:
        super().__init__(message)
        self.step = step


class GridIndexError(InputError, IndexError):
    """像素坐标超出特征图范围时抛出此异常"""

    pass
