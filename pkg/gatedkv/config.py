from dotenv import dotenv_values
import logging
import os

# 优先读取项目根目录 .env，容器环境下回退到进程环境变量
config = dotenv_values(".env")


def get_config_value(key: str, default: str = None) -> str:
    """Gets value from .env file or falls back to environment variables."""
    return config.get(key) or os.getenv(key, default)


# 评估并发上限（bench 中各策略并行评估）
GATEDKV_THREADS = max(1, int(get_config_value("GATEDKV_THREADS", "1")))
GATEDKV_LOG_LEVEL = get_config_value("GATEDKV_LOG_LEVEL", "INFO").upper()
GATEDKV_OUTPUT_DIR = get_config_value("GATEDKV_OUTPUT_DIR", "runs")
GATEDKV_SEED = int(get_config_value("GATEDKV_SEED", "0"))

# 掩码用的 INF：-inf 哨兵在求指数前替换为该有限值
MASK_INF = float(get_config_value("GATEDKV_MASK_INF", "1e9"))

# 每个标量 8 字节（float64），用于 KV 内存估算
BYTES_PER_SCALAR = 8

_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"


def setup_logging(level: str = None) -> None:
    """安装单个 stream handler；重复调用只调整级别"""
    root = logging.getLogger("gatedkv")
    root.setLevel((level or GATEDKV_LOG_LEVEL).upper())
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        root.addHandler(handler)


def print_settings() -> None:
    print("--- gatedkv Settings ---")
    print(f"GATEDKV_THREADS: {GATEDKV_THREADS}")
    print(f"GATEDKV_LOG_LEVEL: {GATEDKV_LOG_LEVEL}")
    print(f"GATEDKV_OUTPUT_DIR: {GATEDKV_OUTPUT_DIR}")
    print(f"GATEDKV_SEED: {GATEDKV_SEED}")
    print(f"MASK_INF: {MASK_INF}")
    print("------------------------")
