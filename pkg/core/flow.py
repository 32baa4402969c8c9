"""
Поле скоростей flow matching: прямой проход, функция потерь с точными
градиентами, выбор времени из Beta, обратный ход Эйлера, Adam и чекпоинты.
Всё считается в float64.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence
from typing_extensions import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core.engine_types import VelocityField
from core.errors import ArgumentError, CheckpointError, DimensionError
from core.settings import ACTIVATION, ACTIVATIONS
from core.storage import read_json, write_json


log = logging.getLogger(__name__)

FORMAT_VERSION: int = 1
DEFAULT_HIDDEN: tuple[int, ...] = (256, 256)
DEFAULT_TIME_EMBED: int = 16
MAX_TIME_FREQ: float = 100.0


class Mlp:
    """
    Полносвязная сеть: гладкая активация на скрытых слоях, линейный выход.
    weights[i]: (in, out), biases[i]: (out,).
    """

    def __init__(
        self,
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        activation: str = ACTIVATION,
    ) -> None:
        if len(weights) != len(biases) or not weights:
            raise DimensionError("Число весов и смещений должно совпадать")
        if activation not in ACTIVATIONS:
            raise ArgumentError(f"Неизвестная активация {activation}")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.activation = activation
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"Слой {i}: веса {w.shape}, смещения {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"Слой {i} не стыкуется с предыдущим")

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        zero_last: bool = False,
        activation: str = ACTIVATION,
    ) -> Self:
        """Случайная инициализация N(0, 1/fan_in)."""

        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            scale = 0.0 if (last and zero_last) else np.sqrt(1.0 / n_in)
            weights.append(rng.normal(0.0, 1.0, (n_in, n_out)) * scale)
            biases.append(np.zeros(n_out))
        return cls(weights, biases, activation)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [tuple(w.shape) for w in self.weights]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def params(self) -> list[np.ndarray]:
        """Параметры в порядке W0, b0, W1, b1, ..."""

        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        if len(params) != 2 * len(self.weights):
            raise DimensionError("Неверное число массивов параметров")
        for i in range(len(self.weights)):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise DimensionError(f"Слой {i}: неверная форма параметров")
            self.weights[i] = np.array(w, dtype=np.float64)
            self.biases[i] = np.array(b, dtype=np.float64)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise DimensionError(f"Нужно {self.n_params} параметров, получено {flat.shape}")
        out, start = [], 0
        for p in self.params:
            out.append(flat[start : start + p.size].reshape(p.shape))
            start += p.size
        self.set_params(out)

    def copy(self) -> Self:
        return Mlp(self.weights, self.biases, self.activation)

    def forward_cache(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Прямой проход с сохранением входов слоёв для обратного."""

        act, _ = ACTIVATIONS[self.activation]
        inputs = [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == len(self.weights) - 1 else act(z)
            inputs.append(h)
        return h, inputs

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cache(x)[0]

    def backward(self, inputs: list[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
        """Градиенты по параметрам в порядке params."""

        _, dact = ACTIVATIONS[self.activation]
        grads: list[np.ndarray] = [np.empty(0)] * (2 * len(self.weights))
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                g = g * dact(inputs[i + 1])
            grads[2 * i] = inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads


class VelocityFieldNet:
    """
    Поле скоростей v(a_t, t, o).
    Вход сети - конкатенация [a_t, синусоидальное вложение t, o].
    alpha, beta - параметры Beta распределения времени при обучении.
    """

    def __init__(
        self,
        mlp: Mlp,
        action_dim: int,
        obs_dim: int,
        time_embed_dim: int = DEFAULT_TIME_EMBED,
        time_freqs: Sequence[float] | None = None,
        alpha: float = 1.5,
        beta: float = 1.0,
    ) -> None:
        if time_embed_dim % 2:
            raise ArgumentError("time_embed_dim должен быть чётным")
        if mlp.n_inputs != action_dim + time_embed_dim + obs_dim:
            raise DimensionError("Вход сети не совпадает с action_dim + time_embed_dim + obs_dim")
        if mlp.n_outputs != action_dim:
            raise DimensionError("Выход сети должен совпадать с action_dim")
        self.mlp = mlp
        self.action_dim = action_dim
        self.obs_dim = obs_dim
        self.time_embed_dim = time_embed_dim
        if time_freqs is None:
            time_freqs = np.geomspace(1.0, MAX_TIME_FREQ, time_embed_dim // 2) if time_embed_dim else []
        self.time_freqs = np.asarray(time_freqs, dtype=np.float64)
        if self.time_freqs.shape != (time_embed_dim // 2,):
            raise DimensionError("Число частот вложения должно быть time_embed_dim / 2")
        self.alpha = float(alpha)
        self.beta = float(beta)

    @classmethod
    def init(
        cls,
        action_dim: int,
        obs_dim: int,
        rng: np.random.Generator,
        hidden: Sequence[int] = DEFAULT_HIDDEN,
        time_embed_dim: int = DEFAULT_TIME_EMBED,
        zero: bool = False,
    ) -> Self:
        """Новая сеть; zero=True - все параметры нулевые."""

        sizes = [action_dim + time_embed_dim + obs_dim, *hidden, action_dim]
        mlp = Mlp.init(sizes, rng)
        if zero:
            mlp.set_flat(np.zeros(mlp.n_params))
        return cls(mlp, action_dim, obs_dim, time_embed_dim)

    def __repr__(self) -> str:
        return (
            f"name: {self.__class__.__name__}, layers: {self.mlp.layer_shapes}, "
            f"action_dim: {self.action_dim}, obs_dim: {self.obs_dim}"
        )

    @property
    def params(self) -> list[np.ndarray]:
        return self.mlp.params

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        self.mlp.set_params(params)

    def copy(self) -> Self:
        return VelocityFieldNet(
            self.mlp.copy(), self.action_dim, self.obs_dim,
            self.time_embed_dim, self.time_freqs, self.alpha, self.beta,
        )

    def embed_time(self, t: np.ndarray) -> np.ndarray:
        """Вложение времени (N, time_embed_dim): [sin(f t), cos(f t)]."""

        phase = np.asarray(t, dtype=np.float64).reshape(-1, 1) * self.time_freqs
        return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)

    def inputs(self, a_t: np.ndarray, t, obs: np.ndarray) -> np.ndarray:
        """Собираем батч входов (N, in)."""

        a_t = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if a_t.shape[1] != self.action_dim:
            raise DimensionError(f"Действие размерности {a_t.shape[1]}, ожидалось {self.action_dim}")
        if obs.shape[1] != self.obs_dim:
            raise DimensionError(f"Наблюдение размерности {obs.shape[1]}, ожидалось {self.obs_dim}")
        n = max(a_t.shape[0], obs.shape[0])
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
        a_t = np.broadcast_to(a_t, (n, self.action_dim))
        obs = np.broadcast_to(obs, (n, self.obs_dim))
        return np.concatenate([a_t, self.embed_time(t), obs], axis=1)

    def forward(self, a_t: np.ndarray, t, obs: np.ndarray) -> np.ndarray:
        """Скорость той же формы, что и a_t (вектор или батч)."""

        out = self.mlp.forward(self.inputs(a_t, t, obs))
        if np.ndim(a_t) == 1 and np.ndim(obs) == 1:
            return out[0]
        return out


@dataclass(frozen=True)
class FMBatch:
    """Наблюдения (N, obs_dim) и действия эксперта (N, action_dim)."""

    observations: np.ndarray
    expert_actions: np.ndarray

    def __post_init__(self) -> None:
        if self.observations.ndim != 2 or self.expert_actions.ndim != 2:
            raise DimensionError("Батч должен быть двумерным")
        if self.observations.shape[0] != self.expert_actions.shape[0]:
            raise DimensionError("Число наблюдений и действий не совпадает")
        if self.observations.shape[0] < 1:
            raise ArgumentError("Пустой батч")

    def __len__(self) -> int:
        return self.observations.shape[0]


class SamplerCfg(BaseModel):
    """Число шагов Эйлера, зерно и параметры Beta для обучения."""

    model_config = ConfigDict(frozen=True)

    steps: int = Field(default=5, ge=1)
    seed: int = 0
    alpha: float = Field(default=1.5, gt=0)
    beta: float = Field(default=1.0, gt=0)


def sample_timestep(rng: np.random.Generator, alpha: float, beta: float, size=None):
    """t ~ Beta(alpha, beta)."""

    if not (alpha > 0 and beta > 0):
        raise ArgumentError(f"Параметры Beta должны быть > 0: {alpha}, {beta}")
    return rng.beta(alpha, beta, size=size)


def fm_objective(
    net: VelocityFieldNet,
    obs: np.ndarray,
    a_expert: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
) -> tuple[float, list[np.ndarray]]:
    """
    Потери flow matching при заданных t и шуме:
    a_t = (1 - t) a + t eps, u = eps - a, L = mean ||v(a_t, t, o) - u||^2.
    """

    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    a_t = (1.0 - t) * a_expert + t * eps
    target = eps - a_expert
    pred, cache = net.mlp.forward_cache(net.inputs(a_t, t[:, 0], obs))
    diff = pred - target
    n = diff.shape[0]
    loss = float(np.sum(diff**2) / n)
    grads = net.mlp.backward(cache, 2.0 * diff / n)
    return loss, grads


def fm_loss_and_grad(
    net: VelocityFieldNet,
    batch: FMBatch,
    rng: np.random.Generator,
    alpha: float | None = None,
    beta: float | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Свежие t ~ Beta и eps ~ N(0, I) на каждый пример, затем fm_objective."""

    alpha = net.alpha if alpha is None else alpha
    beta = net.beta if beta is None else beta
    n = len(batch)
    t = sample_timestep(rng, alpha, beta, size=n)
    eps = rng.standard_normal((n, net.action_dim))
    return fm_objective(net, batch.observations, batch.expert_actions, t, eps)


def euler_sample(
    net: VelocityField,
    obs: np.ndarray,
    cfg: SamplerCfg,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """
    Действие из шума: x_1 ~ N(0, I), затем D шагов
    x <- x - v(x, t, o) / D при t = 1 - k / D.
    """

    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    obs = np.asarray(obs, dtype=np.float64)
    shape = (net.action_dim,) if obs.ndim == 1 else (obs.shape[0], net.action_dim)
    x = rng.standard_normal(shape)
    steps = cfg.steps
    for k in range(steps):
        t = 1.0 - k / steps
        x = x - net.forward(x, t, obs) / steps
    return x


@dataclass(frozen=True)
class AdamState:
    """Моменты Adam и номер шага."""

    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> Self:
        return cls(
            m=tuple(np.zeros_like(p) for p in params),
            v=tuple(np.zeros_like(p) for p in params),
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState | None,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """Шаг Adam с коррекцией смещения. Вернёт новые параметры и состояние."""

    if len(params) != len(grads):
        raise DimensionError("Число параметров и градиентов не совпадает")
    state = AdamState.zeros_like(params) if state is None else state
    b1, b2 = betas
    step = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"Форма градиента {g.shape} не совпадает с {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g**2
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(m=tuple(new_m), v=tuple(new_v), step=step)


class CheckpointHeader(BaseModel):
    """Заголовок файла чекпоинта."""

    model_config = ConfigDict(extra="allow")

    version: int
    kind: str
    activation: str
    layer_shapes: list[tuple[int, int]]
    n_params: int
    params: list[Any]


def write_checkpoint(path: str | Path, kind: str, mlp: Mlp, meta: dict[str, Any]) -> Path:
    """Пишем сеть: заголовок, метаданные и параметры десятичными массивами."""

    payload: dict[str, Any] = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "activation": mlp.activation,
        "layer_shapes": [list(s) for s in mlp.layer_shapes],
        **meta,
        "n_params": mlp.n_params,
        "params": [p.tolist() for p in mlp.params],
    }
    log.info("Сохраняем %s в %s", kind, path)
    return write_json(path, payload)


def read_checkpoint(path: str | Path, kind: str) -> tuple[CheckpointHeader, Mlp]:
    """Читаем и проверяем чекпоинт целиком, прежде чем собирать сеть."""

    try:
        header = CheckpointHeader.model_validate(read_json(path))
    except (ValidationError, ValueError) as e:
        raise CheckpointError(f"{path}: повреждённый заголовок") from e
    if header.version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: версия {header.version}, поддерживается {FORMAT_VERSION}")
    if header.kind != kind:
        raise CheckpointError(f"{path}: ожидался {kind}, в файле {header.kind}")
    if header.activation not in ACTIVATIONS:
        raise CheckpointError(f"{path}: неизвестная активация {header.activation}")
    shapes = header.layer_shapes
    if not shapes or any(a[1] != b[0] for a, b in zip(shapes[:-1], shapes[1:])):
        raise CheckpointError(f"{path}: слои не стыкуются: {shapes}")
    if len(header.params) != 2 * len(shapes):
        raise CheckpointError(f"{path}: число массивов не совпадает со слоями")
    try:
        arrays = [np.array(p, dtype=np.float64) for p in header.params]
    except ValueError as e:
        raise CheckpointError(f"{path}: параметры не читаются") from e
    for i, (n_in, n_out) in enumerate(shapes):
        if arrays[2 * i].shape != (n_in, n_out) or arrays[2 * i + 1].shape != (n_out,):
            raise CheckpointError(f"{path}: слой {i} не совпадает с заголовком")
    if sum(a.size for a in arrays) != header.n_params:
        raise CheckpointError(f"{path}: число параметров не совпадает с n_params")
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise CheckpointError(f"{path}: нечисловые параметры")
    return header, Mlp(arrays[0::2], arrays[1::2], header.activation)


def save_policy(net: VelocityFieldNet, path: str | Path) -> Path:
    """Сохраняем поле скоростей."""

    meta = {
        "action_dim": net.action_dim,
        "obs_dim": net.obs_dim,
        "time_embed_dim": net.time_embed_dim,
        "time_freqs": net.time_freqs.tolist(),
        "alpha": net.alpha,
        "beta": net.beta,
    }
    return write_checkpoint(path, "velocity_field", net.mlp, meta)


def load_policy(path: str | Path) -> VelocityFieldNet:
    """Загружаем поле скоростей, любая несогласованность - CheckpointError."""

    header, mlp = read_checkpoint(path, "velocity_field")
    extra = header.model_extra or {}
    try:
        return VelocityFieldNet(
            mlp,
            action_dim=int(extra["action_dim"]),
            obs_dim=int(extra["obs_dim"]),
            time_embed_dim=int(extra["time_embed_dim"]),
            time_freqs=extra["time_freqs"],
            alpha=float(extra["alpha"]),
            beta=float(extra["beta"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: несовместимые метаданные сети") from e
