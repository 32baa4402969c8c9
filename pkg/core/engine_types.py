"""
Типы полей скоростей и политик управления.
"""

from typing import Protocol

import numpy as np


class VelocityField(Protocol):
    """Поле скоростей для интегрирования Эйлером."""

    action_dim: int

    def forward(self, a_t: np.ndarray, t: float, obs: np.ndarray) -> np.ndarray:
        ...


class Policy(Protocol):
    """
    Политика управления рукой.
    env - среда (привилегированный доступ нужен только экспертам),
    obs - наблюдение среды, rng - генератор шума эпизода.
    """

    def reset(self) -> None:
        ...

    def act(self, env, obs, rng: np.random.Generator) -> np.ndarray:
        ...
