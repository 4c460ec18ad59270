"""
Errors - 异常层级与退出码
"""


class KCSError(Exception):
    """所有库内异常的基类"""

    exit_code = 1


class DataError(KCSError):
    """数据错误：记录格式、引用无法解析、id 不匹配等"""

    exit_code = 1


class ConfigError(KCSError):
    """配置错误：未知格式、未知配置项、参数越界、路径不存在"""

    exit_code = 2


class EmptyContextError(DataError):
    """上下文中没有任何句子"""


class ExhaustedCandidatesError(DataError):
    """所有候选句子都已被选中"""


class EncoderInitError(ConfigError):
    """编码器后端加载失败或维度不匹配"""


class TrainingDivergedError(KCSError):
    """训练损失出现 NaN/Inf"""

    def __init__(self, message: str, diagnostic: dict = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class GenerationError(KCSError):
    """问题生成失败，附带输入回显"""

    def __init__(self, message: str, input_text: str = ""):
        super().__init__(f"{message} | input: {input_text[:200]}")
        self.input_text = input_text
