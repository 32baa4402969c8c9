"""
Кинематика плоского манипулятора.
Звенья лежат в плоскости x-z, угол звена отсчитывается от вертикали вниз,
абсолютный угол звена равен накопленной сумме углов суставов.
При q = 0 рука висит вертикально.
"""

import numpy as np


def absolute_angles(q: np.ndarray) -> np.ndarray:
    """Абсолютные углы звеньев (..., J)."""

    return np.cumsum(np.asarray(q, dtype=np.float64), axis=-1)


def forward_kinematics(q: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """
    Положения концов звеньев.
    q: (..., J) углы суставов, lengths: (J,) длины звеньев.
    Вернёт (..., J, 3) точки (x, 0, z).
    """

    theta = absolute_angles(q)
    lengths = np.asarray(lengths, dtype=np.float64)
    x = np.cumsum(lengths * np.sin(theta), axis=-1)
    z = np.cumsum(-lengths * np.cos(theta), axis=-1)
    return np.stack([x, np.zeros_like(x), z], axis=-1)


def jacobians(q: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """
    Якобианы концов звеньев в плоскости x-z.
    Вернёт (B, 2, J): строка 0 - dx/dq, строка 1 - dz/dq.
    """

    theta = absolute_angles(q)
    lengths = np.asarray(lengths, dtype=np.float64)
    n = theta.shape[-1]
    # d p_b / d q_k = сумма вкладов звеньев k..b
    mask = np.tril(np.ones((n, n)))
    jac = np.empty((n, 2, n))
    for row, part in enumerate((lengths * np.cos(theta), lengths * np.sin(theta))):
        total = np.cumsum(part)
        before = np.concatenate([[0.0], total[:-1]])
        jac[:, row, :] = (total[:, None] - before[None, :]) * mask
    return jac


def velocity_product(q: np.ndarray, qdot: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """
    Центростремительная часть ускорения концов звеньев, J'(q, q') q'.
    Вернёт (B, 2).
    """

    theta = absolute_angles(q)
    omega = absolute_angles(qdot)
    lengths = np.asarray(lengths, dtype=np.float64)
    ax = np.cumsum(-lengths * np.sin(theta) * omega**2)
    az = np.cumsum(lengths * np.cos(theta) * omega**2)
    return np.stack([ax, az], axis=-1)


def end_effector_angle(q: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Направление вектора основание -> конец руки, от вертикали вниз."""

    tip = forward_kinematics(q, lengths)[..., -1, :]
    return np.arctan2(tip[..., 0], -tip[..., 2])


def wrap_angle(angle: np.ndarray) -> np.ndarray:
    """Приводим угол к [-pi, pi)."""

    return (np.asarray(angle) + np.pi) % (2.0 * np.pi) - np.pi
