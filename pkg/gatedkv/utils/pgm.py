"""二进制 PGM (P5) 灰度图写出"""
import os

import numpy as np


def write_pgm(path: str, image: np.ndarray, scale: int = 1) -> None:
    """image 取值 [0,1]，1 为白；scale 为每个格子的像素边长"""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if image.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {image.shape}")
    pixels = np.round(image * 255).astype(np.uint8)
    if scale > 1:
        pixels = np.kron(pixels, np.ones((scale, scale), dtype=np.uint8))
    height, width = pixels.shape
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """读取本模块写出的 P5 文件，返回 uint8 数组"""
    with open(path, "rb") as f:
        data = f.read()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=width * height).reshape(height, width)
