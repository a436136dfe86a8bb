"""AdamW：解耦权重衰减的自适应矩估计优化器"""
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .tensor import Tensor


class AdamW:
    """只更新 requires_grad 的参数；权重衰减只作用于二维矩阵（不含归一化增益）"""

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params: List[Tuple[str, Tensor]] = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self.params}
        self._v: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self) -> None:
        self.t += 1
        b1_corr = 1.0 - self.beta1 ** self.t
        b2_corr = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * (g * g)
            if self.weight_decay > 0.0 and p.data.ndim == 2:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / b1_corr) / (np.sqrt(v / b2_corr) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()
