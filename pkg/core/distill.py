"""
Дистилляция экспертов в единую политику flow matching по схеме DAgger,
остаточная политика и её доводка эволюционной стратегией, оценка политик.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal, Mapping, Sequence
from typing_extensions import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core.actuation import ActuatorParams
from core.engine_types import Policy
from core.env import ArmEnv, EnvConfig, ExpertPolicy, Observation
from core.errors import (
    ArgumentError,
    CheckpointError,
    ConfigurationError,
    DimensionError,
    NumericalBlowupError,
)
from core.flow import (
    FMBatch,
    Mlp,
    SamplerCfg,
    VelocityFieldNet,
    adam_step,
    euler_sample,
    fm_loss_and_grad,
    read_checkpoint,
    write_checkpoint,
)
from core.metrics import TrackingMetrics, delta_acc, delta_vel, mpjpe, success_rate
from core.motion import MotionClip, finite_difference, reference_body_positions, segment_clips
from core.settings import DEFAULT_SEED


log = logging.getLogger(__name__)

Mode = Literal["base", "aggressive"]


class ReplayBuffer:
    """
    Записи (наблюдение, id движения, действие эксперта).
    Ёмкость не ограничена, очищается в начале каждой итерации DAgger.
    """

    def __init__(self) -> None:
        self.observations: list[np.ndarray] = []
        self.motion_ids: list[str] = []
        self.expert_actions: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.observations)

    def __repr__(self) -> str:
        return f"name: {self.__class__.__name__}, records: {len(self)}"

    def clear(self) -> None:
        self.observations.clear()
        self.motion_ids.clear()
        self.expert_actions.clear()

    def add(self, observation: np.ndarray, motion_id: str, expert_action: np.ndarray) -> None:
        self.observations.append(np.asarray(observation, dtype=np.float64))
        self.motion_ids.append(motion_id)
        self.expert_actions.append(np.asarray(expert_action, dtype=np.float64))

    def as_batch(self) -> FMBatch:
        """Весь буфер одним батчем."""

        if not self:
            raise ArgumentError("Буфер пуст")
        return FMBatch(np.array(self.observations), np.array(self.expert_actions))

    def sample(self, rng: np.random.Generator, size: int) -> FMBatch:
        """Случайный минибатч с возвращением."""

        if not self:
            raise ArgumentError("Буфер пуст")
        idx = rng.integers(0, len(self), size=size)
        return FMBatch(
            np.array([self.observations[i] for i in idx]),
            np.array([self.expert_actions[i] for i in idx]),
        )


class DistillCfg(BaseModel):
    """Параметры DAgger дистилляции."""

    model_config = ConfigDict(frozen=True)

    iterations: int = Field(default=20, ge=0)
    episodes: int = Field(default=2, ge=1)
    rollout_steps: int = Field(default=250, ge=1)
    grad_steps: int = Field(default=200, ge=1)
    batch_size: int = Field(default=256, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    sampler: SamplerCfg = Field(default_factory=SamplerCfg)
    seed: int = DEFAULT_SEED
    mode: Mode = "base"
    accumulate: bool = False
    hidden: tuple[int, ...] = (256, 256)
    checkpoint_every: int = Field(default=0, ge=0)


class EsCfg(BaseModel):
    """
    (1 + lambda) эволюционная стратегия для остаточной политики.
    eval_seeds - фиксированные зёрна эпизодов оценки, termination_cost -
    штраф за каждый непройденный шаг досрочно завершённого эпизода.
    """

    model_config = ConfigDict(frozen=True)

    population: int = Field(default=8, ge=0)
    sigma: float = Field(default=0.02, gt=0)
    generations: int = Field(default=30, ge=0)
    eval_seeds: tuple[int, ...] = (0, 1, 2, 3)
    horizon: int | None = Field(default=250, ge=1)
    mode: Mode = "aggressive"
    termination_cost: float = Field(default=1.0, ge=0)
    bound: float = Field(default=0.2, ge=0)
    hidden: tuple[int, ...] = (64,)
    seed: int = DEFAULT_SEED


def load_cfg(model: type[BaseModel], raw: Mapping, prefix: str) -> BaseModel:
    """Конфигурация из словаря, ошибки pydantic -> ConfigurationError."""

    try:
        return model.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise ConfigurationError(f"{prefix}.{where}: {first['msg']}") from e


def residual_compose(a_flow: np.ndarray, a_res: np.ndarray, bound: float) -> np.ndarray:
    """a = a_flow + clamp(a_res, +-bound)."""

    a_flow = np.asarray(a_flow, dtype=np.float64)
    a_res = np.asarray(a_res, dtype=np.float64)
    if a_flow.shape != a_res.shape:
        raise DimensionError(f"Размерности действий не совпадают: {a_flow.shape} и {a_res.shape}")
    if bound < 0:
        raise ArgumentError(f"bound должен быть >= 0, получено {bound}")
    return a_flow + np.clip(a_res, -bound, bound)


class ResidualPolicy:
    """
    Маленькая сеть (proprio, command, a_flow) -> a_res.
    Предыдущее полное действие входит через proprio.
    Последний слой инициализируется нулями, так что новая политика
    ничего не меняет в базовой.
    """

    def __init__(self, mlp: Mlp, action_dim: int, bound: float) -> None:
        if mlp.n_outputs != action_dim:
            raise DimensionError("Выход остаточной сети должен совпадать с action_dim")
        if bound < 0:
            raise ArgumentError(f"bound должен быть >= 0, получено {bound}")
        self.mlp = mlp
        self.action_dim = action_dim
        self.bound = float(bound)

    @classmethod
    def init(
        cls,
        n_joints: int,
        rng: np.random.Generator,
        hidden: Sequence[int] = (64,),
        bound: float = 0.2,
    ) -> Self:
        # proprio 3J + command 2J + 2 + a_flow J
        sizes = [6 * n_joints + 2, *hidden, n_joints]
        return cls(Mlp.init(sizes, rng, zero_last=True), n_joints, bound)

    def __repr__(self) -> str:
        return f"name: {self.__class__.__name__}, layers: {self.mlp.layer_shapes}, bound: {self.bound}"

    def copy(self) -> Self:
        return ResidualPolicy(self.mlp.copy(), self.action_dim, self.bound)

    def raw(self, obs: Observation, a_flow: np.ndarray) -> np.ndarray:
        """Выход сети до ограничения."""

        x = np.concatenate([obs.proprio, obs.command, a_flow])
        return self.mlp.forward(x[None, :])[0]

    def compose(self, obs: Observation, a_flow: np.ndarray) -> np.ndarray:
        return residual_compose(a_flow, self.raw(obs, a_flow), self.bound)


class FlowPolicy:
    """
    Политика из поля скоростей: действие - интегрирование Эйлером из шума.
    Базовая сеть видит в proprio своё предыдущее действие,
    остаточная - предыдущее полное действие.
    """

    def __init__(
        self,
        net: VelocityFieldNet,
        sampler: SamplerCfg | None = None,
        residual: ResidualPolicy | None = None,
    ) -> None:
        self.net = net
        self.sampler = SamplerCfg() if sampler is None else sampler
        self.residual = residual
        self.reset()

    def __repr__(self) -> str:
        return f"name: {self.__class__.__name__}, steps: {self.sampler.steps}, residual: {self.residual is not None}"

    def reset(self) -> None:
        self._prev_flow = np.zeros(self.net.action_dim)

    def act(self, env: ArmEnv, obs: Observation, rng: np.random.Generator) -> np.ndarray:
        base_obs = obs.with_prev_action(self._prev_flow)
        a_flow = euler_sample(self.net, base_obs.vector, self.sampler, rng)
        self._prev_flow = a_flow
        if self.residual is None:
            return a_flow
        return self.residual.compose(obs, a_flow)


@dataclass
class EpisodeLog:
    """Журнал эпизода: состояния с момента сброса, награды и моменты по шагам."""

    motion_id: str
    q: list[np.ndarray] = field(default_factory=list)
    ref_q: list[np.ndarray] = field(default_factory=list)
    bodies: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    tau_cmd: list[np.ndarray] = field(default_factory=list)
    tau_applied: list[np.ndarray] = field(default_factory=list)
    power: list[np.ndarray] = field(default_factory=list)
    z_errors: list[np.ndarray] = field(default_factory=list)
    orientation_errors: list[float] = field(default_factory=list)
    terminated_early: bool = False
    horizon: int = 0

    @property
    def steps(self) -> int:
        return len(self.rewards)

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))

    def score(self, termination_cost: float = 0.0) -> float:
        """Сумма наград минус штраф за непройденные шаги."""

        missing = self.horizon - self.steps if self.terminated_early else 0
        return self.total_reward - termination_cost * missing

    @property
    def tracking_error(self) -> float:
        """Средняя по шагам ошибка суставов, рад."""

        if self.steps == 0:
            return 0.0
        return float(np.mean(np.abs(np.array(self.q[1:]) - np.array(self.ref_q[1:]))))

    def metrics(self, link_lengths: np.ndarray, dt: float) -> TrackingMetrics:
        """Метрики эпизода по траекториям концов звеньев."""

        rob = np.array(self.bodies)
        ref = reference_body_positions(np.array(self.ref_q), link_lengths)
        if rob.shape[0] < 2:
            # срыв на первом шаге: скорости считаем нулевыми
            rob, ref = np.repeat(rob, 2, axis=0), np.repeat(ref, 2, axis=0)
        rob_v = finite_difference(rob, dt)
        ref_v = finite_difference(ref, dt)
        return TrackingMetrics(
            mpjpe_mm=mpjpe(ref, rob),
            dvel=delta_vel(ref_v, rob_v, dt),
            dacc=delta_acc(ref_v, rob_v, dt),
            success=0.0 if self.terminated_early else 1.0,
        )


def run_episode(
    env: ArmEnv,
    motion: MotionClip,
    policy: Policy,
    seed: int,
    mode: Mode = "base",
    horizon: int | None = None,
    motion_id: str = "",
) -> EpisodeLog:
    """Один эпизод с журналом. Численный срыв завершает эпизод досрочно."""

    rng = np.random.default_rng(seed)
    obs = env.reset(motion, rng, mode, horizon)
    policy.reset()
    episode = EpisodeLog(motion_id=motion_id, horizon=env.horizon)
    episode.q.append(env.q.copy())
    episode.ref_q.append(env.reference_at(0)[0].copy())
    episode.bodies.append(env.body_positions())
    done = False
    while not done:
        action = policy.act(env, obs, rng)
        try:
            obs, reward, done, info = env.step(action)
        except NumericalBlowupError as e:
            log.exception("Эпизод прерван.", exc_info=False, extra={"Exception": e})
            episode.terminated_early = True
            break
        episode.q.append(env.q.copy())
        episode.ref_q.append(env.reference_at(env.t)[0].copy())
        episode.bodies.append(env.body_positions())
        episode.actions.append(action)
        episode.rewards.append(reward)
        episode.tau_cmd.append(info["tau_cmd"])
        episode.tau_applied.append(info["tau_applied"])
        episode.power.append(info["power"])
        episode.z_errors.append(info["z_errors"])
        episode.orientation_errors.append(info["orientation_error"])
        episode.terminated_early = info["terminated"]
    log.debug(
        "Эпизод завершён",
        extra={"motion": motion_id, "steps": episode.steps, "terminated": episode.terminated_early},
    )
    return episode


def build_experts(motions: Mapping[str, MotionClip], **kwargs) -> dict[str, ExpertPolicy]:
    """По эксперту на движение."""

    return {name: ExpertPolicy(motion, **kwargs) for name, motion in motions.items()}


def _check_experts(motions: Mapping[str, MotionClip], experts: Mapping[str, ExpertPolicy]) -> None:
    missing = [name for name in motions if name not in experts]
    if missing:
        raise ConfigurationError(f"Нет экспертов для движений: {', '.join(missing)}")


def collect_rollouts(
    env: ArmEnv,
    motion_id: str,
    motion: MotionClip,
    expert: ExpertPolicy,
    policy: FlowPolicy,
    buffer: ReplayBuffer,
    steps: int,
    rng: np.random.Generator,
    mode: Mode = "base",
) -> int:
    """
    Катим текущего ученика steps шагов, каждое посещённое состояние
    размечаем действием эксперта. После завершения эпизода среда
    сбрасывается, так что в буфер попадает ровно steps записей.
    """

    obs = env.reset(motion, rng, mode)
    policy.reset()
    resets = 0
    for _ in range(steps):
        buffer.add(obs.vector, motion_id, expert.act(env, obs, rng))
        action = policy.act(env, obs, rng)
        try:
            obs, _, done, _ = env.step(action)
        except NumericalBlowupError:
            done = True
        if done:
            obs = env.reset(motion, rng, mode)
            policy.reset()
            resets += 1
    return resets


def dagger_train(
    env: ArmEnv,
    experts: Mapping[str, ExpertPolicy],
    motions: Mapping[str, MotionClip],
    net: VelocityFieldNet,
    cfg: DistillCfg,
    on_iteration: Callable[[int, VelocityFieldNet, float], None] | None = None,
) -> tuple[VelocityFieldNet, list[float]]:
    """
    DAgger: на каждой итерации чистим буфер (если не accumulate), катим
    текущую политику, размечаем экспертом и делаем grad_steps шагов Adam
    по потерям flow matching. Вернёт обученную копию сети и средние
    потери по итерациям.
    """

    _check_experts(motions, experts)
    if not motions:
        raise ConfigurationError("Нет движений для обучения")
    if net.obs_dim != env.obs_dim or net.action_dim != env.action_dim:
        raise ConfigurationError(
            f"Сеть ({net.obs_dim}, {net.action_dim}) не подходит среде ({env.obs_dim}, {env.action_dim})"
        )
    rng = np.random.default_rng(cfg.seed)
    net = net.copy()
    ids = list(motions)
    buffer = ReplayBuffer()
    state = None
    history: list[float] = []
    for iteration in range(cfg.iterations):
        if not cfg.accumulate:
            buffer.clear()
        policy = FlowPolicy(net, cfg.sampler)
        for _ in range(cfg.episodes):
            motion_id = ids[int(rng.integers(len(ids)))]
            collect_rollouts(
                env, motion_id, motions[motion_id], experts[motion_id],
                policy, buffer, cfg.rollout_steps, rng, cfg.mode,
            )
        losses = []
        for _ in range(cfg.grad_steps):
            loss, grads = fm_loss_and_grad(net, buffer.sample(rng, cfg.batch_size), rng)
            params, state = adam_step(net.params, grads, state, lr=cfg.lr)
            net.set_params(params)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("Итерация %d: потери %.6g, записей %d", iteration + 1, history[-1], len(buffer))
        if on_iteration is not None:
            on_iteration(iteration + 1, net, history[-1])
    return net, history


def init_student(env: ArmEnv, cfg: DistillCfg) -> VelocityFieldNet:
    """Новая сеть под размерности среды."""

    rng = np.random.default_rng(cfg.seed)
    return VelocityFieldNet.init(env.action_dim, env.obs_dim, rng, hidden=cfg.hidden)


@dataclass(frozen=True)
class EvalReport:
    """Метрики по движениям, общее среднее и средняя награда за шаг."""

    per_motion: dict[str, TrackingMetrics]
    aggregate: TrackingMetrics
    mean_reward: dict[str, float]

    def as_dict(self) -> dict:
        return {
            "motions": {
                name: {**m.as_dict(), "mean_reward": self.mean_reward[name]}
                for name, m in self.per_motion.items()
            },
            "aggregate": self.aggregate.as_dict(),
        }


def episode_horizon(env: ArmEnv, clip: MotionClip) -> int:
    """
    Шагов управления на клип: по шагу на кадр, не больше episode_len.
    Клип 10 с при 50 fps - 500 шагов, последний шаг целится в последний кадр.
    """

    return min(env.cfg.episode_len, clip.n_frames)


def _policy_for(policy: Policy | Mapping[str, Policy], motion_id: str) -> Policy:
    if isinstance(policy, Mapping):
        if motion_id not in policy:
            raise ConfigurationError(f"Нет политики для движения {motion_id}")
        return policy[motion_id]
    return policy


def evaluate_policy(
    policy: Policy | VelocityFieldNet | Mapping[str, Policy],
    env: ArmEnv,
    motions: Mapping[str, MotionClip],
    n_rollouts: int = 10,
    residual: ResidualPolicy | None = None,
    sampler: SamplerCfg | None = None,
    seed: int = DEFAULT_SEED,
    mode: Mode = "base",
) -> EvalReport:
    """
    Каждое движение режется на клипы по 10 с, на каждом клипе n_rollouts
    эпизодов с зёрнами seed..seed+n-1. Метрики усредняются сначала по шагам
    эпизода, затем по эпизодам клипа, по клипам движения и по движениям.
    """

    if n_rollouts < 1:
        raise ArgumentError("n_rollouts должен быть >= 1")
    if isinstance(policy, VelocityFieldNet):
        policy = FlowPolicy(policy, sampler, residual)
    per_motion: dict[str, TrackingMetrics] = {}
    mean_reward: dict[str, float] = {}
    for motion_id, motion in motions.items():
        actor = _policy_for(policy, motion_id)
        per_clip, rewards = [], []
        for clip in segment_clips(motion):
            horizon = episode_horizon(env, clip)
            episodes = [
                run_episode(env, clip, actor, seed + r, mode, horizon, motion_id)
                for r in range(n_rollouts)
            ]
            metrics = TrackingMetrics.mean([e.metrics(env.lengths, env.cfg.dt) for e in episodes])
            per_clip.append(replace(metrics, success=success_rate(episodes)))
            rewards.extend(e.total_reward / max(e.steps, 1) for e in episodes)
        per_motion[motion_id] = TrackingMetrics.mean(per_clip)
        mean_reward[motion_id] = float(np.mean(rewards))
        log.info("Оценка %s: %s", motion_id, per_motion[motion_id].as_dict())
    return EvalReport(
        per_motion=per_motion,
        aggregate=TrackingMetrics.mean(list(per_motion.values())),
        mean_reward=mean_reward,
    )


def refine_fitness(
    base_net: VelocityFieldNet,
    residual: ResidualPolicy | None,
    env: ArmEnv,
    motions: Mapping[str, MotionClip],
    cfg: EsCfg,
    sampler: SamplerCfg | None = None,
) -> float:
    """Средний счёт эпизодов на фиксированных зёрнах."""

    policy = FlowPolicy(base_net, sampler, residual)
    scores = [
        run_episode(env, motion, policy, seed, cfg.mode, cfg.horizon, name).score(cfg.termination_cost)
        for name, motion in motions.items()
        for seed in cfg.eval_seeds
    ]
    return float(np.mean(scores))


def es_refine(
    base_net: VelocityFieldNet,
    residual: ResidualPolicy,
    env: ArmEnv,
    motions: Mapping[str, MotionClip],
    cfg: EsCfg,
    sampler: SamplerCfg | None = None,
) -> tuple[ResidualPolicy, list[float]]:
    """
    Элитарная (1 + lambda) стратегия: кандидаты - гауссовы возмущения
    лучшей остаточной политики, лучший не теряется. Базовая сеть заморожена.
    Вернёт лучшую политику и историю лучшего счёта (начальный + по поколениям).
    """

    if not motions:
        raise ConfigurationError("Нет движений для доводки")
    rng = np.random.default_rng(cfg.seed)
    best = residual.copy()
    best_score = refine_fitness(base_net, best, env, motions, cfg, sampler)
    history = [best_score]
    for generation in range(cfg.generations):
        center = best.mlp.get_flat()
        for _ in range(cfg.population):
            candidate = best.copy()
            candidate.mlp.set_flat(center + cfg.sigma * rng.standard_normal(center.shape))
            score = refine_fitness(base_net, candidate, env, motions, cfg, sampler)
            if score > best_score:
                best, best_score = candidate, score
        history.append(best_score)
        log.info("Поколение %d: лучший счёт %.6g", generation + 1, best_score)
    return best, history


# вариант -> (модель привода, штраф мощности, агрессивная рандомизация)
ABLATION_VARIANTS: dict[str, tuple[bool, bool, bool]] = {
    "full": (True, True, True),
    "no_actuator_model": (False, True, True),
    "no_power_penalty": (True, False, True),
    "no_aggressive": (True, True, False),
    "none": (False, False, False),
}


@dataclass(frozen=True)
class AblationResult:
    """Итог одного варианта: счёт и метрики на полной среде."""

    variant: str
    fitness: float
    report: EvalReport

    def as_dict(self) -> dict:
        return {"variant": self.variant, "fitness": self.fitness, **self.report.as_dict()}


def ablation_study(
    base_net: VelocityFieldNet,
    env_cfg: EnvConfig,
    motions: Mapping[str, MotionClip],
    cfg: EsCfg,
    n_rollouts: int = 10,
    seed: int = DEFAULT_SEED,
    catalog: Mapping[str, ActuatorParams] | None = None,
    sampler: SamplerCfg | None = None,
    variants: Sequence[str] | None = None,
) -> dict[str, AblationResult]:
    """
    Доводим остаточную политику с выключенными по отдельности и вместе
    моделью привода, штрафом мощности и агрессивной рандомизацией.
    Каждый вариант оценивается на полной среде в режиме aggressive,
    base_policy - базовая политика без остатка.
    """

    names = list(ABLATION_VARIANTS) if variants is None else list(variants)
    unknown = [name for name in names if name not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigurationError(f"Неизвестные варианты: {', '.join(unknown)}")
    target_env = ArmEnv(
        env_cfg.model_copy(update={"actuator_model": True, "use_power_penalty": True}), catalog
    )
    target_cfg = cfg.model_copy(update={"mode": "aggressive"})

    def judge(variant: str, residual: ResidualPolicy | None) -> AblationResult:
        report = evaluate_policy(
            base_net, target_env, motions, n_rollouts, residual, sampler, seed, "aggressive"
        )
        fitness = refine_fitness(base_net, residual, target_env, motions, target_cfg, sampler)
        log.info("Вариант %s: счёт %.6g, успех %.3g", variant, fitness, report.aggregate.success)
        return AblationResult(variant, fitness, report)

    results = {"base_policy": judge("base_policy", None)}
    for name in names:
        actuator_model, power_penalty, aggressive = ABLATION_VARIANTS[name]
        train_env = ArmEnv(
            env_cfg.model_copy(
                update={"actuator_model": actuator_model, "use_power_penalty": power_penalty}
            ),
            catalog,
        )
        train_cfg = cfg.model_copy(update={"mode": "aggressive" if aggressive else "base"})
        residual = ResidualPolicy.init(
            train_env.n_joints, np.random.default_rng(cfg.seed), cfg.hidden, cfg.bound
        )
        best, _ = es_refine(base_net, residual, train_env, motions, train_cfg, sampler)
        results[name] = judge(name, best)
    return results


def save_residual(residual: ResidualPolicy, path: str | Path) -> Path:
    """Остаточная политика в формате чекпоинта, kind = residual."""

    return write_checkpoint(
        path, "residual", residual.mlp, {"action_dim": residual.action_dim, "bound": residual.bound}
    )


def load_residual(path: str | Path) -> ResidualPolicy:
    header, mlp = read_checkpoint(path, "residual")
    extra = header.model_extra or {}
    try:
        return ResidualPolicy(mlp, int(extra["action_dim"]), float(extra["bound"]))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: несовместимые метаданные остаточной политики") from e
