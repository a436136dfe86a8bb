"""gatedkv: 基于 Attention-Gate 的上下文内 KV-Cache 驱逐（桌面规模实现）"""

__version__ = "0.1.0"
