"""统一异常定义

形状/契约类错误同时继承 ValueError，调用方可以按普通参数错误捕获。
"""


class GatedKVError(Exception):
    """所有 gatedkv 异常的基类"""


class ShapeError(GatedKVError, ValueError):
    """张量维度不匹配"""


class ContractError(GatedKVError, ValueError):
    """前置/后置条件被违反"""


class ConfigError(GatedKVError):
    """配置无效（CLI 退出码 2）"""


class PolicyError(GatedKVError):
    """未知或参数非法的驱逐策略（CLI 退出码 2）"""


class CorpusError(GatedKVError):
    """语料读取失败或为空"""


class CheckpointError(GatedKVError):
    """检查点文件格式错误"""


class TrainingError(GatedKVError):
    """训练过程中的运行时失败（如 NaN 损失）"""
