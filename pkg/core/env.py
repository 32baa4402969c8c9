"""
Игрушечная рука с моментным управлением.
Цепочка шага: действие -> уставка ПД -> момент -> огибающая привода ->
трение -> динамика, 50 Гц. Тут же наблюдения, рандомизация и эксперты.
"""

import logging
from collections import deque
from dataclasses import dataclass, replace
from typing import Any, Literal, Mapping
from typing_extensions import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.actuation import (
    ActuatorBank,
    ActuatorParams,
    PDBank,
    PowerPenaltyCfg,
    assign_actuators,
    clip_torque,
    friction_torque,
    joint_power,
    neg_power_penalty,
    pd_gains,
    pd_target,
    pd_torque,
)
from core.errors import ArgumentError, ConfigurationError, NumericalBlowupError
from core.kinematics import (
    end_effector_angle,
    forward_kinematics,
    jacobians,
    velocity_product,
    wrap_angle,
)
from core.metrics import TerminationThresholds, check_termination
from core.motion import MotionClip
from core.settings import ACTUATORS, JOINT_ACTUATORS


log = logging.getLogger(__name__)

Mode = Literal["base", "aggressive"]


class LinkCfg(BaseModel):
    """Звено: точечная масса на конце, кг, и длина, м."""

    model_config = ConfigDict(frozen=True)

    mass: float = Field(default=0.5, gt=0)
    length: float = Field(default=0.25, gt=0)


class RandomizationCfg(BaseModel):
    """
    Диапазоны рандомизации: шум начальной позы (рад), возмущающий момент (Н м),
    масштаб масс и трения (доли), сдвиг позиции по умолчанию (рад).
    """

    model_config = ConfigDict(frozen=True)

    pose_noise: float = Field(default=0.05, ge=0)
    disturbance: float = Field(default=0.5, ge=0)
    mass_scale: float = Field(default=0.1, ge=0, lt=1)
    friction_scale: float = Field(default=0.2, ge=0, lt=1)
    default_offset: float = Field(default=0.01, ge=0)
    aggressive_factor: float = Field(default=1.5, ge=1)

    def scaled(self, factor: float) -> Self:
        """Диапазоны, умноженные на factor."""

        return self.model_copy(
            update={
                "pose_noise": self.pose_noise * factor,
                "disturbance": self.disturbance * factor,
                "mass_scale": min(self.mass_scale * factor, 0.99),
                "friction_scale": min(self.friction_scale * factor, 0.99),
                "default_offset": self.default_offset * factor,
            }
        )

    @classmethod
    def none(cls) -> Self:
        """Без рандомизации."""

        return cls(pose_noise=0, disturbance=0, mass_scale=0, friction_scale=0, default_offset=0)


TOY_JOINTS: tuple[str, ...] = ("toy_hip_pitch_joint", "toy_knee_joint", "toy_ankle_pitch_joint")


def default_joint_names(n_joints: int) -> list[str]:
    """Рука как нога: бедро, колено, голеностоп, дальше просто номера."""

    return [TOY_JOINTS[j] if j < len(TOY_JOINTS) else f"toy_link{j}_joint" for j in range(n_joints)]


class EnvConfig(BaseModel):
    """
    Конфигурация руки и эпизода.
    actuators: имя привода на все суставы, список по суставам или "auto" -
    назначение по именам суставов через JOINT_ACTUATORS.
    actuator_model = False - идеальный привод: постоянный предел tau_y1 без трения.
    use_power_penalty = False - штраф считается, но в награду не входит.
    """

    model_config = ConfigDict(frozen=True)

    links: list[LinkCfg] = Field(default_factory=lambda: [LinkCfg(), LinkCfg()])
    joint_names: list[str] | None = None
    gravity: float = Field(default=9.81, ge=0)
    dt: float = Field(default=0.02, gt=0)
    substeps: int = Field(default=4, ge=1)
    actuators: list[str] | str = "5020-16"
    actuator_model: bool = True
    use_power_penalty: bool = True
    pd_frequency: float = Field(default=10.0, gt=0)
    pd_damping: float = Field(default=2.0, gt=0)
    envelope_scale: float = Field(default=1.0, gt=0)
    default_q: list[float] | None = None
    randomization: RandomizationCfg = Field(default_factory=RandomizationCfg)
    thresholds: TerminationThresholds = Field(default_factory=TerminationThresholds)
    power_penalty: PowerPenaltyCfg = Field(default_factory=PowerPenaltyCfg)
    episode_len: int = Field(default=500, ge=1)
    history_len: int = Field(default=5, ge=1)

    @model_validator(mode="after")
    def check_joints(self) -> Self:
        """Списки по суставам должны совпадать с числом звеньев."""

        n = len(self.links)
        if n < 1:
            raise ValueError("Нужно хотя бы одно звено")
        if isinstance(self.actuators, list) and len(self.actuators) != n:
            raise ValueError(f"actuators: нужно {n} имён")
        if self.default_q is not None and len(self.default_q) != n:
            raise ValueError(f"default_q: нужно {n} значений")
        if self.joint_names is not None and len(self.joint_names) != n:
            raise ValueError(f"joint_names: нужно {n} имён")
        return self

    @property
    def n_joints(self) -> int:
        return len(self.links)

    def names(self) -> list[str]:
        """Имена суставов, по умолчанию - суставы игрушечной ноги."""

        if self.joint_names is None:
            return default_joint_names(self.n_joints)
        return list(self.joint_names)

    def actuator_names(self) -> list[str]:
        if self.actuators == "auto":
            return assign_actuators(self.names(), JOINT_ACTUATORS, default="5020")
        if isinstance(self.actuators, str):
            return [self.actuators] * self.n_joints
        return list(self.actuators)


def load_env_config(raw: Mapping[str, Any]) -> EnvConfig:
    """Конфигурация среды из словаря, ошибки pydantic -> ConfigurationError."""

    try:
        return EnvConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise ConfigurationError(f"env.{where}: {first['msg']}") from e


@dataclass(frozen=True)
class Observation:
    """
    Наблюдение: proprio = [q - q0, q', предыдущее действие],
    command = [q_ref, q'_ref, sin d, cos d - 1], где d - ошибка направления
    на конец руки (замена ориентации торса), history - последние H proprio.
    """

    proprio: np.ndarray
    command: np.ndarray
    history: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.proprio, self.command, self.history.ravel()])

    @property
    def n_joints(self) -> int:
        return self.proprio.shape[0] // 3

    @property
    def prev_action(self) -> np.ndarray:
        return self.proprio[2 * self.n_joints :]

    def with_prev_action(self, action: np.ndarray) -> Self:
        """Копия с подменённым предыдущим действием в proprio."""

        proprio = self.proprio.copy()
        proprio[2 * self.n_joints :] = action
        return replace(self, proprio=proprio)


def observation_dim(n_joints: int, history_len: int) -> int:
    """dim(p) + dim(c) + H dim(p)."""

    proprio = 3 * n_joints
    return proprio + (2 * n_joints + 2) + history_len * proprio


class ArmEnv:
    """
    Плоская рука из последовательных звеньев в поле тяжести.
    Один экземпляр - одно состояние, разделять между потоками нельзя.
    """

    def __init__(self, cfg: EnvConfig, catalog: Mapping[str, ActuatorParams] | None = None) -> None:
        catalog = ACTUATORS if catalog is None else catalog
        self.cfg = cfg
        self.n_joints = cfg.n_joints
        self.lengths = np.array([link.length for link in cfg.links])
        self.nominal_masses = np.array([link.mass for link in cfg.links])
        params: list[ActuatorParams] = []
        for name in cfg.actuator_names():
            if name not in catalog:
                raise ConfigurationError(
                    f"Неизвестный привод {name}, доступны: {', '.join(sorted(catalog))}"
                )
            params.append(catalog[name].tightened(cfg.envelope_scale))
        self.actuator_params = params
        q0 = np.zeros(self.n_joints) if cfg.default_q is None else np.asarray(cfg.default_q)
        self.nominal_gains = PDBank.from_gains(
            [
                pd_gains(
                    p,
                    f_hz=cfg.pd_frequency,
                    zeta=cfg.pd_damping,
                    tau_max=catalog[name].tau_y1,
                    q0=float(q0[j]),
                )
                for j, (p, name) in enumerate(zip(params, cfg.actuator_names()))
            ]
        )
        self.gains = self.nominal_gains
        self.actuators = ActuatorBank.from_params(params)
        self.joint_names = cfg.names()
        self.power_penalty = cfg.power_penalty.resolve(self.joint_names)
        self.masses = self.nominal_masses.copy()
        self.motion: MotionClip | None = None
        self.done = True
        self.q = np.zeros(self.n_joints)
        self.qdot = np.zeros(self.n_joints)

    def __repr__(self) -> str:
        return f"name: {self.__class__.__name__}, joints: {self.n_joints}, dt: {self.cfg.dt}"

    @property
    def obs_dim(self) -> int:
        return observation_dim(self.n_joints, self.cfg.history_len)

    @property
    def action_dim(self) -> int:
        return self.n_joints

    @property
    def thresholds(self) -> TerminationThresholds:
        return self.cfg.thresholds

    # --- референс

    def reference_at(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Позиции и скорости референса, индекс зажат в последний кадр."""

        idx = min(max(index, 0), self._ref_q.shape[0] - 1)
        return self._ref_q[idx], self._ref_qdot[idx]

    # --- сброс

    def reset(
        self,
        motion: MotionClip,
        rng: np.random.Generator,
        mode: Mode = "base",
        horizon: int | None = None,
    ) -> Observation:
        """
        Новый эпизод: кадр 0 движения плюс шум позы, случайные массы,
        трение и сдвиг позиции по умолчанию. В режиме aggressive диапазоны
        шире в aggressive_factor раз, пороги ориентации ослаблены.
        """

        if motion.n_joints != self.n_joints:
            raise ArgumentError(f"Движение на {motion.n_joints} суставов, у руки {self.n_joints}")
        if not np.isclose(motion.dt, self.cfg.dt, rtol=0.0, atol=1e-9):
            raise ArgumentError(f"Шаг движения {motion.dt} не совпадает с шагом среды {self.cfg.dt}")
        if mode not in ("base", "aggressive"):
            raise ArgumentError(f"Неизвестный режим {mode}")
        rnd = self.cfg.randomization
        rnd = rnd.scaled(rnd.aggressive_factor) if mode == "aggressive" else rnd
        n = self.n_joints

        noise = rng.uniform(-rnd.pose_noise, rnd.pose_noise, n)
        mass_scale = rng.uniform(1.0 - rnd.mass_scale, 1.0 + rnd.mass_scale, n)
        friction_scale = rng.uniform(1.0 - rnd.friction_scale, 1.0 + rnd.friction_scale, n)
        offset = rng.uniform(-rnd.default_offset, rnd.default_offset, n)

        self.randomization = rnd
        self.masses = self.nominal_masses * mass_scale
        self.actuators = ActuatorBank.from_params(
            [p.scaled_friction(s) for p, s in zip(self.actuator_params, friction_scale)]
        )
        self.gains = self.nominal_gains.with_offset(offset)
        self.motion = motion
        self._ref_q = motion.q
        self._ref_qdot = motion.velocities()
        self._ref_bodies = forward_kinematics(motion.q, self.lengths)
        self._rng = rng
        self.mode = mode
        self.relaxed = mode == "aggressive"
        self.horizon = self.cfg.episode_len if horizon is None else int(horizon)

        self.q = self._ref_q[0] + noise
        self.qdot = self._ref_qdot[0].copy()
        self.t = 0
        self.prev_action = np.zeros(n)
        self.done = False
        self.terminated = False
        self._history = deque(
            [self._proprio()] * self.cfg.history_len, maxlen=self.cfg.history_len
        )
        log.debug("Сброс среды", extra={"mode": mode, "horizon": self.horizon})
        return self.build_observation()

    # --- динамика

    def mass_matrix(self, q: np.ndarray) -> np.ndarray:
        """M(q) с приведённой инерцией роторов на диагонали."""

        jac = jacobians(q, self.lengths)
        m = np.einsum("b,bik,bil->kl", self.masses, jac, jac)
        return m + np.diag(self.actuators.armature_I)

    def _generalized_forces(self, q: np.ndarray, qdot: np.ndarray) -> np.ndarray:
        """Обобщённые силы тяжести и центробежные, без управления."""

        jac = jacobians(q, self.lengths)
        accel = velocity_product(q, qdot, self.lengths)
        gravity = np.array([0.0, -self.cfg.gravity])
        return np.einsum("b,bik,bi->k", self.masses, jac, gravity - accel)

    def gravity_torque(self, q: np.ndarray) -> np.ndarray:
        """Момент, удерживающий руку в позе q."""

        return -self._generalized_forces(q, np.zeros(self.n_joints))

    def inverse_dynamics(self, q: np.ndarray, qdot: np.ndarray, qddot: np.ndarray) -> np.ndarray:
        """Момент для заданного ускорения, без трения."""

        return self.mass_matrix(q) @ qddot - self._generalized_forces(q, qdot)

    def mechanical_energy(self) -> float:
        """Кинетическая + потенциальная энергия, Дж."""

        kinetic = 0.5 * self.qdot @ self.mass_matrix(self.q) @ self.qdot
        z = forward_kinematics(self.q, self.lengths)[:, 2]
        return float(kinetic + self.cfg.gravity * self.masses @ z)

    def friction(self, qdot: np.ndarray) -> np.ndarray:
        """Момент трения суставов, у идеального привода ноль."""

        if not self.cfg.actuator_model:
            return np.zeros(self.n_joints)
        return friction_torque(qdot, self.actuators)

    def clip(self, tau_cmd: np.ndarray, qdot: np.ndarray) -> np.ndarray:
        """Ограничение команды огибающей или, у идеального привода, постоянным tau_y1."""

        if not self.cfg.actuator_model:
            return np.clip(tau_cmd, -self.actuators.tau_y1, self.actuators.tau_y1)
        return clip_torque(tau_cmd, qdot, self.actuators)

    def _friction_coefficient(self, qdot: np.ndarray) -> np.ndarray:
        """Секущий коэффициент f(v) / v, в нуле - предел."""

        if not self.cfg.actuator_model:
            return np.zeros(self.n_joints)
        at_zero = self.actuators.mu_s / self.actuators.v_act + self.actuators.mu_d
        safe = np.where(qdot == 0.0, 1.0, qdot)
        return np.where(qdot == 0.0, at_zero, friction_torque(safe, self.actuators) / safe)

    def _substep(self, tau_clipped: np.ndarray, disturbance: np.ndarray, h: float) -> None:
        """
        Полунеявный шаг: сначала скорость, потом позиция.
        Трение входит в обновление скорости линейно-неявно.
        """

        mass = self.mass_matrix(self.q)
        forces = self._generalized_forces(self.q, self.qdot)
        lhs = mass + h * np.diag(self._friction_coefficient(self.qdot))
        rhs = mass @ self.qdot + h * (tau_clipped + disturbance + forces)
        self.qdot = np.linalg.solve(lhs, rhs)
        self.q = self.q + h * self.qdot

    def _advance(self, command, disturbance: np.ndarray) -> dict[str, np.ndarray]:
        """Один шаг управления из substeps шагов интегратора."""

        h = self.cfg.dt / self.cfg.substeps
        log_: dict[str, np.ndarray] = {}
        for _ in range(self.cfg.substeps):
            speed = self.qdot.copy()
            tau_cmd = command(self.q, speed)
            tau_clipped = self.clip(tau_cmd, speed)
            friction = self.friction(speed)
            try:
                self._substep(tau_clipped, disturbance, h)
            except np.linalg.LinAlgError as e:
                self.done = True
                self.terminated = True
                raise NumericalBlowupError("Вырожденная матрица масс") from e
            log_ = {
                "qdot": speed,
                "tau_cmd": tau_cmd,
                "tau_clipped": tau_clipped,
                "friction": friction,
                "tau_applied": tau_clipped - friction,
            }
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))):
            self.done = True
            self.terminated = True
            log.warning("Состояние перестало быть конечным на шаге %d", getattr(self, "t", -1))
            raise NumericalBlowupError("Численная неустойчивость, эпизод завершён")
        return log_

    def integrate(self, tau_cmd: np.ndarray) -> dict[str, np.ndarray]:
        """Шаг управления с заданным моментом, минуя ПД и возмущения."""

        tau_cmd = np.asarray(tau_cmd, dtype=np.float64)
        return self._advance(lambda q, qdot: tau_cmd, np.zeros(self.n_joints))

    # --- шаг

    def tracking_errors(self) -> tuple[np.ndarray, float]:
        """Вертикальные ошибки концов звеньев и ошибка направления на конец руки."""

        ref_q, _ = self.reference_at(self.t)
        bodies = forward_kinematics(self.q, self.lengths)
        ref_bodies = self._ref_bodies[min(self.t, self._ref_bodies.shape[0] - 1)]
        z_errors = bodies[:, 2] - ref_bodies[:, 2]
        angle = wrap_angle(end_effector_angle(ref_q, self.lengths) - end_effector_angle(self.q, self.lengths))
        return z_errors, float(abs(angle))

    def step(self, action: np.ndarray) -> tuple[Observation, float, bool, dict[str, Any]]:
        """Шаг управления 50 Гц."""

        if self.done:
            raise ArgumentError("Эпизод завершён или среда не сброшена")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.n_joints,) or not np.all(np.isfinite(action)):
            raise ArgumentError("Действие должно быть конечным вектором по суставам")

        rnd = self.randomization
        disturbance = self._rng.uniform(-rnd.disturbance, rnd.disturbance, self.n_joints)
        gains = self.gains
        info = self._advance(lambda q, qdot: pd_torque(action, q, qdot, gains), disturbance)
        self.t += 1

        ref_q, _ = self.reference_at(self.t)
        z_errors, orientation_error = self.tracking_errors()
        terminated = check_termination(z_errors, orientation_error, self.thresholds, self.relaxed)
        time_out = self.t >= self.horizon
        self.terminated = terminated
        self.done = terminated or time_out

        power = joint_power(info["tau_applied"], info["qdot"])
        power_cost, power_reward = neg_power_penalty(power, self.power_penalty)
        tracking_error = float(np.mean(np.abs(self.q - ref_q)))
        reward = -tracking_error + (power_reward if self.cfg.use_power_penalty else 0.0)

        self.prev_action = action
        self._history.append(self._proprio())
        info.update(
            {
                "step": self.t,
                "q_target": pd_target(action, gains),
                "power": power,
                "power_cost": power_cost,
                "tracking_error": tracking_error,
                "z_errors": z_errors,
                "orientation_error": orientation_error,
                "terminated": terminated,
                "time_out": time_out and not terminated,
            }
        )
        return self.build_observation(), reward, self.done, info

    # --- наблюдения

    def _proprio(self) -> np.ndarray:
        return np.concatenate([self.q - self.nominal_gains.q0, self.qdot, self.prev_action])

    def build_observation(self) -> Observation:
        """Наблюдение с командой на следующий кадр референса."""

        ref_q, ref_qdot = self.reference_at(self.t + 1)
        delta = wrap_angle(
            end_effector_angle(ref_q, self.lengths) - end_effector_angle(self.q, self.lengths)
        )
        command = np.concatenate([ref_q, ref_qdot, [np.sin(delta), np.cos(delta) - 1.0]])
        return Observation(
            proprio=self._proprio(),
            command=command,
            history=np.array(self._history),
        )

    def body_positions(self) -> np.ndarray:
        """Концы звеньев робота (B, 3)."""

        return forward_kinematics(self.q, self.lengths)


class ExpertPolicy:
    """
    Привилегированный ПД трекер одного движения.
    Целится в кадр референса на lookahead вперёд, добавляет прямую связь
    по скорости и (с feedforward_gain) обратную динамику с трением.
    """

    def __init__(
        self,
        motion: MotionClip,
        lookahead: int = 1,
        velocity_gain: float = 1.0,
        feedforward_gain: float = 1.0,
        action_clip: float = 10.0,
    ) -> None:
        if lookahead < 0:
            raise ArgumentError("lookahead должен быть >= 0")
        self.motion = motion
        self.lookahead = lookahead
        self.velocity_gain = velocity_gain
        self.feedforward_gain = feedforward_gain
        self.action_clip = action_clip
        self._qdot = motion.velocities()
        self._qddot = np.diff(self._qdot, axis=0, append=self._qdot[-1:]) / motion.dt

    def __repr__(self) -> str:
        return f"name: {self.__class__.__name__}, lookahead: {self.lookahead}, motion: {self.motion!r}"

    def reset(self) -> None:
        """Эксперт без состояния."""

    def act(self, env: ArmEnv, obs: Observation | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
        idx = min(env.t + self.lookahead, self.motion.n_frames - 1)
        q_ref = self.motion.q[idx]
        qdot_ref = self._qdot[idx]
        gains = env.nominal_gains
        tau_ff = np.zeros(env.n_joints)
        if self.feedforward_gain:
            tau_ff = self.feedforward_gain * (
                env.inverse_dynamics(q_ref, qdot_ref, self._qddot[idx])
                + env.friction(qdot_ref)
            )
        q_tar = q_ref + self.velocity_gain * gains.kd / gains.kp * qdot_ref + tau_ff / gains.kp
        action = (q_tar - gains.q0) / gains.action_scale
        return np.clip(action, -self.action_clip, self.action_clip)


def expert_action(expert: ExpertPolicy, env: ArmEnv) -> np.ndarray:
    """Действие эксперта для текущего состояния среды."""

    return expert.act(env)
