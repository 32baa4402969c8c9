"""
Физика привода: ПД регулятор, огибающая момент-скорость, трение,
механическая мощность и штраф за отрицательную мощность.
Все функции векторизованы: вместо ActuatorParams можно передать ActuatorBank
с параметрами по суставам.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from typing_extensions import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.errors import ArgumentError, ConfigurationError
from core.storage import read_json, write_json


log = logging.getLogger(__name__)

ACTION_SCALE_FACTOR: float = 0.25


class ActuatorParams(BaseModel):
    """
    Параметры одного привода.
    tau_y1 - потолок момента в двигательном режиме, tau_y2 - в тормозном,
    v_x1 - начало спада огибающей, v_x2 - скорость нулевого момента,
    mu_s, v_act - сглаженное кулоново трение, mu_d - вязкое трение,
    armature_I - приведённая инерция ротора.
    """

    model_config = ConfigDict(frozen=True)

    tau_y1: float = Field(gt=0)
    tau_y2: float = Field(gt=0)
    v_x1: float = Field(gt=0)
    v_x2: float = Field(gt=0)
    mu_s: float = Field(ge=0)
    v_act: float = Field(gt=0)
    mu_d: float = Field(ge=0)
    armature_I: float = Field(gt=0)

    @model_validator(mode="after")
    def check_envelope(self) -> Self:
        """Огибающая должна спадать: 0 < v_x1 < v_x2."""

        if not self.v_x1 < self.v_x2:
            raise ValueError("Нужно v_x1 < v_x2")
        return self

    def tightened(self, scale: float) -> Self:
        """Копия с потолками момента, умноженными на scale."""

        if not scale > 0:
            raise ArgumentError(f"scale должен быть > 0, получено {scale}")
        return self.model_copy(
            update={"tau_y1": self.tau_y1 * scale, "tau_y2": self.tau_y2 * scale}
        )

    def scaled_friction(self, scale: float) -> Self:
        """Копия с трением, умноженным на scale (рандомизация)."""

        return self.model_copy(update={"mu_s": self.mu_s * scale, "mu_d": self.mu_d * scale})


@dataclass(frozen=True)
class ActuatorBank:
    """Параметры приводов всех суставов, сложенные в массивы."""

    tau_y1: np.ndarray
    tau_y2: np.ndarray
    v_x1: np.ndarray
    v_x2: np.ndarray
    mu_s: np.ndarray
    v_act: np.ndarray
    mu_d: np.ndarray
    armature_I: np.ndarray

    @classmethod
    def from_params(cls, params: Sequence[ActuatorParams]) -> Self:
        """Собираем банк из списка приводов."""

        if not params:
            raise ArgumentError("Нужен хотя бы один привод")
        return cls(
            **{
                name: np.array([getattr(p, name) for p in params], dtype=np.float64)
                for name in ActuatorParams.model_fields
            }
        )

    def __len__(self) -> int:
        return self.tau_y1.shape[0]


Actuator = ActuatorParams | ActuatorBank


class PDGains(BaseModel):
    """Коэффициенты ПД регулятора сустава и масштаб действия."""

    model_config = ConfigDict(frozen=True)

    kp: float = Field(gt=0)
    kd: float = Field(gt=0)
    action_scale: float = Field(gt=0)
    q0: float = 0.0


@dataclass(frozen=True)
class PDBank:
    """ПД коэффициенты всех суставов массивами."""

    kp: np.ndarray
    kd: np.ndarray
    action_scale: np.ndarray
    q0: np.ndarray

    @classmethod
    def from_gains(cls, gains: Sequence[PDGains]) -> Self:
        return cls(
            **{
                name: np.array([getattr(g, name) for g in gains], dtype=np.float64)
                for name in PDGains.model_fields
            }
        )

    def with_offset(self, offset: np.ndarray) -> Self:
        """Копия со сдвинутой позицией по умолчанию."""

        return PDBank(self.kp, self.kd, self.action_scale, self.q0 + offset)


Gains = PDGains | PDBank


class PowerPenaltyCfg(BaseModel):
    """
    Штраф за отрицательную мощность.
    joint_pattern - суставы под штрафом по имени, по умолчанию колени.
    joint_selector - явные индексы, перекрывают шаблон. Пока selector пуст
    (resolve не вызывался), neg_power_penalty штрафует все переданные мощности.
    """

    model_config = ConfigDict(frozen=True)

    deadband: float = Field(default=150.0, ge=0)
    norm: float = Field(default=500.0, gt=0)
    weight: float = -10.0
    joint_pattern: str = r".*_knee_joint"
    joint_selector: tuple[int, ...] | None = None

    def resolve(self, joint_names: Sequence[str]) -> Self:
        """Копия с индексами суставов, выбранными по шаблону."""

        if self.joint_selector is None:
            selected = select_joints(joint_names, self.joint_pattern)
            return self.model_copy(update={"joint_selector": selected})
        if any(not 0 <= i < len(joint_names) for i in self.joint_selector):
            raise ConfigurationError(f"joint_selector {self.joint_selector} вне [0, {len(joint_names)})")
        return self


def pd_gains(
    params: ActuatorParams,
    f_hz: float = 10.0,
    zeta: float = 2.0,
    tau_max: float | None = None,
    q0: float = 0.0,
) -> PDGains:
    """
    kp = I w^2, kd = 2 I zeta w, w = 2 pi f.
    Масштаб действия 0.25 tau_max / kp, tau_max по умолчанию tau_y1 привода.
    """

    if not f_hz > 0:
        raise ArgumentError(f"f_hz должен быть > 0, получено {f_hz}")
    if tau_max is None:
        tau_max = params.tau_y1
    if not tau_max > 0:
        raise ArgumentError(f"tau_max должен быть > 0, получено {tau_max}")
    omega = 2.0 * np.pi * f_hz
    kp = params.armature_I * omega**2
    kd = 2.0 * params.armature_I * zeta * omega
    return PDGains(kp=kp, kd=kd, action_scale=ACTION_SCALE_FACTOR * tau_max / kp, q0=q0)


def pd_target(action, gains: Gains):
    """Уставка q_tar = q0 + alpha a."""

    return gains.q0 + gains.action_scale * np.asarray(action, dtype=np.float64)


def pd_torque(action, q, qdot, gains: Gains):
    """tau = kp (q_tar - q) - kd q'."""

    return gains.kp * (pd_target(action, gains) - q) - gains.kd * np.asarray(qdot)


def torque_ceiling(v, tau_in, p: Actuator):
    """Двигательный потолок tau_y1 при v tau > 0, иначе тормозной tau_y2."""

    return np.where(np.asarray(v) * np.asarray(tau_in) > 0, p.tau_y1, p.tau_y2)


def envelope_limit(v, tau_in, p: Actuator):
    """
    Допустимый модуль момента L(v): постоянный до v_x1,
    линейный спад до нуля на v_x2, ноль дальше.
    """

    speed = np.abs(v)
    ceiling = torque_ceiling(v, tau_in, p)
    fall = ceiling * (1.0 - (speed - p.v_x1) / (p.v_x2 - p.v_x1))
    limit = np.where(speed < p.v_x1, ceiling, fall)
    return np.where(speed > p.v_x2, 0.0, limit)


def clip_torque(tau_cmd, v, p: Actuator):
    """Симметричное ограничение команды в [-L(v), L(v)]."""

    limit = envelope_limit(v, tau_cmd, p)
    return np.clip(tau_cmd, -limit, limit)


def friction_torque(v, p: Actuator):
    """Потери: mu_s tanh(v / v_act) + mu_d v."""

    v = np.asarray(v, dtype=np.float64)
    return p.mu_s * np.tanh(v / p.v_act) + p.mu_d * v


def actuate(tau_cmd, v, p: Actuator):
    """Момент на суставе: ограничение огибающей, затем вычитание трения."""

    return clip_torque(tau_cmd, v, p) - friction_torque(v, p)


def joint_power(tau, omega):
    """Мгновенная механическая мощность P = tau w."""

    return np.asarray(tau) * np.asarray(omega)


def neg_power_penalty(powers, cfg: PowerPenaltyCfg) -> tuple[float, float]:
    """
    cost = sum((max(-P - P_db, 0) / K)^2) по выбранным суставам, reward = w cost.
    """

    powers = np.atleast_1d(np.asarray(powers, dtype=np.float64))
    if cfg.joint_selector is not None:
        powers = powers[list(cfg.joint_selector)]
    excess = np.maximum(-powers - cfg.deadband, 0.0) / cfg.norm
    cost = float(np.sum(excess**2))
    return cost, cfg.weight * cost


def select_joints(joint_names: Iterable[str], pattern: str = r".*_knee_joint") -> tuple[int, ...]:
    """Индексы суставов, имя которых полностью совпадает с шаблоном."""

    regex = re.compile(pattern)
    return tuple(i for i, name in enumerate(joint_names) if regex.fullmatch(name))


def assign_actuators(
    joint_names: Iterable[str],
    mapping: Sequence[tuple[str, str]],
    default: str | None = None,
) -> list[str]:
    """
    Назначаем модель привода каждому суставу по первому совпавшему шаблону.
    Если ничего не совпало и default не задан - ошибка конфигурации.
    """

    names: list[str] = []
    for joint in joint_names:
        for pattern, actuator in mapping:
            if re.fullmatch(pattern, joint):
                names.append(actuator)
                break
        else:
            if default is None:
                raise ConfigurationError(f"Для сустава {joint} не найден привод")
            log.debug("Сустав %s получил привод по умолчанию %s", joint, default)
            names.append(default)
    return names


def load_actuator_catalog(path: str | Path) -> dict[str, ActuatorParams]:
    """Каталог приводов из JSON: имя -> восемь параметров."""

    raw = read_json(path)
    if not isinstance(raw, Mapping):
        raise ConfigurationError("Каталог приводов должен быть объектом")
    catalog: dict[str, ActuatorParams] = {}
    for name, fields in raw.items():
        try:
            catalog[name] = ActuatorParams.model_validate(fields)
        except ValidationError as e:
            raise ConfigurationError(f"Привод {name}: {e.errors()[0]['msg']}") from e
    return catalog


def save_actuator_catalog(catalog: Mapping[str, ActuatorParams], path: str | Path) -> Path:
    """Пишем каталог приводов в JSON."""

    return write_json(path, {name: p.model_dump() for name, p in catalog.items()})
