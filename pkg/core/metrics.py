"""
Метрики сложности движения и качества трекинга.
Ядра метрик - чистые функции над массивами, выравнивание референса
под робота делается до вызова.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence
from typing_extensions import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.transform import Rotation

from core.errors import ArgumentError, DimensionError, SizeError, UndefinedMetricError
from core.motion import MotionClip, finite_difference


log = logging.getLogger(__name__)

DEFAULT_H_AIR: float = 0.05
SCORE_NAMES: tuple[str, ...] = ("s_ang", "s_v", "s_a", "s_com", "s_air", "s_sw")
RAW_NAMES: tuple[str, ...] = (
    "v_max", "a_max", "j_max", "ang_max", "v_com_z_max", "airborne", "f_switch",
)


@dataclass(frozen=True)
class ComplexityScores:
    """Сырые максимумы движения и 6-мерный вектор сложности."""

    v_max: float
    a_max: float
    j_max: float
    ang_max: float
    v_com_z_max: float
    airborne: float
    f_switch: float
    s: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def raw(self) -> dict[str, float]:
        """Сырые значения в фиксированном порядке."""

        return {name: float(getattr(self, name)) for name in RAW_NAMES}


@dataclass(frozen=True)
class TrackingMetrics:
    """MPJPE (мм), dvel (мм/кадр), dacc (мм/кадр^2) и доля успешных эпизодов."""

    mpjpe_mm: float
    dvel: float
    dacc: float
    success: float

    @classmethod
    def mean(cls, items: Sequence[Self]) -> Self:
        """Среднее по эпизодам (или клипам), каждый элемент с равным весом."""

        if not items:
            raise ArgumentError("Нечего усреднять")
        return cls(
            mpjpe_mm=float(np.mean([m.mpjpe_mm for m in items])),
            dvel=float(np.mean([m.dvel for m in items])),
            dacc=float(np.mean([m.dacc for m in items])),
            success=float(np.mean([m.success for m in items])),
        )

    def as_dict(self) -> dict[str, float]:
        return {
            "mpjpe_mm": self.mpjpe_mm,
            "dvel": self.dvel,
            "dacc": self.dacc,
            "success": self.success,
        }


class TerminationThresholds(BaseModel):
    """
    Пороги досрочного завершения эпизода.
    z_err_max - вертикальная ошибка тела, м; grav_err_max - ошибка ориентации, рад.
    """

    model_config = ConfigDict(frozen=True)

    z_err_max: float = Field(default=0.25, gt=0)
    grav_err_max: float = Field(default=0.8, gt=0)
    relax_factor: float = Field(default=1.5, gt=0)

    def orientation_limit(self, relaxed: bool = False) -> float:
        return self.grav_err_max * (self.relax_factor if relaxed else 1.0)


def max_kinematics(q_series: np.ndarray, dt: float) -> tuple[float, float, float]:
    """Максимумы модулей скорости, ускорения и рывка по всем кадрам и суставам."""

    q_series = np.asarray(q_series, dtype=np.float64)
    if q_series.shape[0] < 4:
        raise SizeError("Для трёх уровней разностей нужно хотя бы 4 кадра")
    vel = finite_difference(q_series, dt)
    acc = finite_difference(vel, dt)
    jerk = finite_difference(acc, dt)
    return float(np.max(np.abs(vel))), float(np.max(np.abs(acc))), float(np.max(np.abs(jerk)))


def base_angular_velocity(base_quat: np.ndarray, dt: float) -> np.ndarray:
    """
    Угловая скорость основания в его собственной системе, (T, 3).
    Поворот между соседними кадрами через логарифм кватерниона,
    последняя строка повторяется.
    """

    base_quat = np.asarray(base_quat, dtype=np.float64)
    if base_quat.shape[0] < 2:
        raise SizeError("Нужно хотя бы два кадра")
    # scipy хранит кватернион как (x, y, z, w)
    rot = Rotation.from_quat(np.roll(base_quat, -1, axis=1))
    delta = (rot[:-1].inv() * rot[1:]).as_rotvec() / dt
    return np.concatenate([delta, delta[-1:]], axis=0)


def com_vertical_speed(clip: MotionClip, masses: Sequence[float] | None = None) -> float:
    """Пик модуля вертикальной скорости центра масс тел клипа."""

    weights = np.ones(clip.n_bodies) if masses is None else np.asarray(masses, dtype=np.float64)
    if weights.shape != (clip.n_bodies,):
        raise DimensionError(f"Нужно {clip.n_bodies} масс, получено {weights.shape}")
    total = weights.sum()
    if total <= 0:
        raise ArgumentError("Суммарная масса должна быть > 0")
    z_com = clip.body_pos[:, :, 2] @ weights / total
    return float(np.max(np.abs(finite_difference(z_com, clip.dt))))


def airborne_ratio(clip: MotionClip, h_air: float = DEFAULT_H_AIR) -> float:
    """Доля кадров, где все стопы выше h_air."""

    if not clip.feet_indices:
        raise ArgumentError("Не заданы стопы клипа")
    feet_z = clip.body_pos[:, list(clip.feet_indices), 2]
    return float(np.mean(feet_z.min(axis=1) > h_air))


def contact_switch_freq(contacts: np.ndarray, dt: float) -> float:
    """Число кадров со сменой контактного состояния в секунду."""

    contacts = np.asarray(contacts, dtype=bool)
    if contacts.ndim == 1:
        contacts = contacts[:, None]
    if contacts.shape[0] < 2:
        raise SizeError("Нужно хотя бы два кадра")
    flips = np.any(contacts[1:] != contacts[:-1], axis=1).sum()
    return float(flips / ((contacts.shape[0] - 1) * dt))


def difficulty_scores(
    ang_max: float,
    v_max: float,
    a_max: float,
    v_com_z_max: float,
    airborne: float,
    f_switch: float,
) -> np.ndarray:
    """Шкалирование и ограничение в [0, 1]: [s_ang, s_v, s_a, s_com, s_air, s_sw]."""

    scaled = np.array(
        [ang_max / 20.0, v_max / 20.0, a_max / 200.0, v_com_z_max / 2.0, airborne, f_switch / 10.0],
        dtype=np.float64,
    )
    return np.clip(scaled, 0.0, 1.0)


def complexity_scores(
    clip: MotionClip,
    h_air: float = DEFAULT_H_AIR,
    masses: Sequence[float] | None = None,
) -> ComplexityScores:
    """Все метрики сложности клипа и вектор сложности."""

    v_max, a_max, j_max = max_kinematics(clip.q, clip.dt)
    omega = base_angular_velocity(clip.base_quat, clip.dt)
    ang_max = float(np.max(np.linalg.norm(omega, axis=1)))
    v_com = com_vertical_speed(clip, masses)
    air = airborne_ratio(clip, h_air) if clip.feet_indices else 0.0
    f_switch = contact_switch_freq(clip.contacts, clip.dt) if clip.contacts.shape[1] else 0.0
    return ComplexityScores(
        v_max=v_max,
        a_max=a_max,
        j_max=j_max,
        ang_max=ang_max,
        v_com_z_max=v_com,
        airborne=air,
        f_switch=f_switch,
        s=difficulty_scores(ang_max, v_max, a_max, v_com, air, f_switch),
    )


def _check_pair(ref: np.ndarray, rob: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    rob = np.asarray(rob, dtype=np.float64)
    if ref.shape != rob.shape:
        raise DimensionError(f"Формы не совпадают: {ref.shape} и {rob.shape}")
    if ref.ndim != 3 or ref.shape[-1] != 3:
        raise DimensionError(f"Ожидалось (T, N, 3), получено {ref.shape}")
    return ref, rob


def _per_step_error(ref: np.ndarray, rob: np.ndarray) -> np.ndarray:
    """Средняя по телам евклидова ошибка на каждом шаге, (T,)."""

    return np.linalg.norm(ref - rob, axis=-1).mean(axis=1)


def mpjpe(ref_body: np.ndarray, rob_body: np.ndarray) -> float:
    """Средняя ошибка положения тел, мм."""

    ref, rob = _check_pair(ref_body, rob_body)
    return 1000.0 * float(_per_step_error(ref, rob).mean())


def delta_vel(ref_v: np.ndarray, rob_v: np.ndarray, dt: float) -> float:
    """Ошибка линейной скорости тел, мм/кадр."""

    ref, rob = _check_pair(ref_v, rob_v)
    return 1000.0 * dt * float(_per_step_error(ref, rob).mean())


def delta_acc(
    ref_v: np.ndarray,
    rob_v: np.ndarray,
    dt: float,
    reset_steps: Iterable[int] = (),
) -> float:
    """
    Ошибка ускорения, мм/кадр^2.
    a_t = (v_t - v_{t-1}) / dt; исключаются t = 0 и шаги сразу после сброса.
    """

    ref, rob = _check_pair(ref_v, rob_v)
    if ref.shape[0] < 2:
        raise SizeError("Нужно хотя бы два шага")
    acc_ref = np.diff(ref, axis=0) / dt
    acc_rob = np.diff(rob, axis=0) / dt
    # строка i соответствует шагу t = i + 1
    errors = _per_step_error(acc_ref, acc_rob)
    keep = np.ones(errors.shape[0], dtype=bool)
    for step in reset_steps:
        idx = int(step)  # шаг step + 1 -> строка step
        if 0 <= idx < keep.shape[0]:
            keep[idx] = False
    if not keep.any():
        raise UndefinedMetricError("Все шаги исключены из ошибки ускорения")
    return 1000.0 * dt**2 * float(errors[keep].mean())


def check_termination(
    z_errors: Sequence[float],
    orientation_error: float,
    thr: TerminationThresholds,
    relaxed: bool = False,
) -> bool:
    """
    Досрочное завершение: вертикальная ошибка любого отслеживаемого тела
    больше z_err_max или ошибка ориентации больше (ослабленного) порога.
    """

    z_errors = np.abs(np.asarray(z_errors, dtype=np.float64))
    if z_errors.size and np.any(z_errors > thr.z_err_max):
        return True
    return bool(abs(orientation_error) > thr.orientation_limit(relaxed))


def _terminated_early(episode: Any) -> bool:
    if isinstance(episode, Mapping):
        return bool(episode["terminated_early"])
    return bool(episode.terminated_early)


def success_rate(episodes: Sequence[Any]) -> float:
    """Доля эпизодов, завершившихся по времени."""

    if not episodes:
        raise ArgumentError("Список эпизодов пуст")
    return float(np.mean([not _terminated_early(e) for e in episodes]))
