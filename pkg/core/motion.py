"""
Референсные движения: модель клипа, чтение и запись JSON файлов,
конечные разности, нарезка на клипы и синтетические движения.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing_extensions import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.errors import (
    ArgumentError,
    DimensionError,
    MotionSchemaError,
    MotionValidationError,
    SizeError,
)
from core.kinematics import forward_kinematics
from core.storage import write_json


log = logging.getLogger(__name__)

QUAT_TOLERANCE: float = 1e-6
QUAT_RENORMALIZE_TOLERANCE: float = 1e-3


def _frozen(array: np.ndarray, dtype: type) -> np.ndarray:
    """Копия массива только для чтения."""

    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class MotionClip:
    """
    Клип движения. После создания не меняется.
    q: (T, J) углы суставов, base_pos: (T, 3), base_quat: (T, 4) как (w, x, y, z),
    body_pos: (T, B, 3), contacts: (T, K), feet_indices - индексы тел стоп.
    """

    fps: float
    joint_names: tuple[str, ...]
    q: np.ndarray
    base_pos: np.ndarray
    base_quat: np.ndarray
    body_pos: np.ndarray
    contacts: np.ndarray
    feet_indices: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        set_ = object.__setattr__
        set_(self, "fps", float(self.fps))
        set_(self, "joint_names", tuple(str(n) for n in self.joint_names))
        set_(self, "feet_indices", tuple(int(i) for i in self.feet_indices))
        set_(self, "q", _frozen(self.q, np.float64))
        set_(self, "base_pos", _frozen(self.base_pos, np.float64))
        set_(self, "base_quat", _frozen(self.base_quat, np.float64))
        set_(self, "body_pos", _frozen(self.body_pos, np.float64))
        set_(self, "contacts", _frozen(self.contacts, np.bool_))
        self.validate()

    def validate(self) -> None:
        """Проверка инвариантов клипа."""

        if not self.fps > 0:
            raise MotionValidationError(f"fps должен быть > 0, получено {self.fps}")
        if self.q.ndim != 2:
            raise DimensionError(f"q должен быть (T, J), получено {self.q.shape}")
        t = self.q.shape[0]
        if t < 2:
            raise SizeError(f"Клип короче двух кадров: T={t}")
        if self.q.shape[1] != len(self.joint_names):
            raise DimensionError(
                f"q содержит {self.q.shape[1]} суставов, имён {len(self.joint_names)}"
            )
        expected = {
            "base_pos": (t, 3),
            "base_quat": (t, 4),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name}: ожидалось {shape}, получено {getattr(self, name).shape}")
        if self.body_pos.ndim != 3 or self.body_pos.shape[0] != t or self.body_pos.shape[2] != 3:
            raise DimensionError(f"body_pos: ожидалось ({t}, B, 3), получено {self.body_pos.shape}")
        if self.contacts.ndim != 2 or self.contacts.shape[0] != t:
            raise DimensionError(f"contacts: ожидалось ({t}, K), получено {self.contacts.shape}")
        norms = np.linalg.norm(self.base_quat, axis=1)
        if not np.all(np.isclose(norms, 1.0, rtol=0.0, atol=QUAT_TOLERANCE)):
            raise MotionValidationError("base_quat содержит ненормированные кватернионы")
        n_bodies = self.body_pos.shape[1]
        for idx in self.feet_indices:
            if not 0 <= idx < n_bodies:
                raise MotionValidationError(f"feet_indices: {idx} вне [0, {n_bodies})")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MotionClip):
            return False
        return (
            self.fps == other.fps
            and self.joint_names == other.joint_names
            and self.feet_indices == other.feet_indices
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in ("q", "base_pos", "base_quat", "body_pos", "contacts")
            )
        )

    def __len__(self) -> int:
        return self.n_frames

    def __repr__(self) -> str:
        return (
            f"name: {self.__class__.__name__}, frames: {self.n_frames}, "
            f"joints: {self.n_joints}, fps: {self.fps}"
        )

    @property
    def dt(self) -> float:
        """Шаг между кадрами, с."""
        return 1.0 / self.fps

    @property
    def n_frames(self) -> int:
        return self.q.shape[0]

    @property
    def n_joints(self) -> int:
        return self.q.shape[1]

    @property
    def n_bodies(self) -> int:
        return self.body_pos.shape[1]

    @property
    def duration(self) -> float:
        """Длительность как число кадров на шаг, с."""
        return self.n_frames * self.dt

    def slice(self, start: int, stop: int) -> Self:
        """Кадры [start, stop) как новый клип."""

        return MotionClip(
            fps=self.fps,
            joint_names=self.joint_names,
            q=self.q[start:stop],
            base_pos=self.base_pos[start:stop],
            base_quat=self.base_quat[start:stop],
            body_pos=self.body_pos[start:stop],
            contacts=self.contacts[start:stop],
            feet_indices=self.feet_indices,
        )

    def velocities(self) -> np.ndarray:
        """Скорости суставов (T, J)."""

        return finite_difference(self.q, self.dt)


class FrameModel(BaseModel):
    """Один кадр файла движения."""

    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)

    q: list[float]
    base_pos: list[float]
    base_quat: list[float]
    body_pos: list[list[float]]
    contacts: list[bool]


class MotionFileModel(BaseModel):
    """Схема JSON файла движения."""

    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)

    fps: float
    joint_names: list[str]
    frames: list[FrameModel]
    feet_indices: list[int]


def _schema_error(err: ValidationError) -> ValueError:
    """Переводим ошибку pydantic в ошибку файла движения."""

    first = err.errors()[0]
    where = ".".join(str(part) for part in first["loc"])
    if first["type"] in ("finite_number",):
        return MotionValidationError(f"Нечисловое значение в {where}")
    return MotionSchemaError(f"{where}: {first['msg']}")


def _stack(frames: list[FrameModel], key: str) -> np.ndarray:
    """Собираем массив по кадрам, проверяя одинаковую длину."""

    rows = [getattr(frame, key) for frame in frames]
    first = np.shape(rows[0])
    for i, row in enumerate(rows):
        if key == "body_pos" and any(len(p) != 3 for p in row):
            raise DimensionError(f"frames.{i}.{key}: каждая точка должна иметь 3 координаты")
        if np.shape(row) != first:
            raise DimensionError(
                f"frames.{i}.{key}: длина {np.shape(row)} не совпадает с {first} в кадре 0"
            )
    return np.array(rows)


def load_motion(path: str | Path) -> MotionClip:
    """
    Читаем клип из JSON файла.
    Кватернионы в пределах 1e-3 от единичной нормы перенормируются.
    """

    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise MotionSchemaError("Файл движения должен содержать один объект")
    try:
        model = MotionFileModel.model_validate(raw)
    except ValidationError as e:
        raise _schema_error(e) from e
    if len(model.frames) < 2:
        raise SizeError(f"В файле {path} меньше двух кадров")

    q = _stack(model.frames, "q")
    base_pos = _stack(model.frames, "base_pos")
    base_quat = _stack(model.frames, "base_quat")
    body_pos = _stack(model.frames, "body_pos")
    contacts = _stack(model.frames, "contacts")
    if base_quat.shape[1] != 4:
        raise DimensionError("base_quat должен иметь 4 компоненты")

    norms = np.linalg.norm(base_quat, axis=1)
    if np.any(np.abs(norms - 1.0) > QUAT_RENORMALIZE_TOLERANCE):
        raise MotionValidationError(f"{path}: норма кватерниона отличается от 1 больше чем на 1e-3")
    drifted = np.abs(norms - 1.0) > QUAT_TOLERANCE
    if np.any(drifted):
        log.debug("Перенормируем %d кватернионов в %s", int(drifted.sum()), path)
        base_quat[drifted] = base_quat[drifted] / norms[drifted, None]

    return MotionClip(
        fps=model.fps,
        joint_names=model.joint_names,
        q=q.reshape(len(model.frames), -1),
        base_pos=base_pos,
        base_quat=base_quat,
        body_pos=body_pos.reshape(len(model.frames), -1, 3),
        contacts=contacts.reshape(len(model.frames), -1),
        feet_indices=model.feet_indices,
    )


def motion_to_dict(clip: MotionClip) -> dict:
    """Клип в объект по схеме файла."""

    for name in ("q", "base_pos", "base_quat", "body_pos"):
        if not np.all(np.isfinite(getattr(clip, name))):
            raise MotionValidationError(f"{name} содержит нечисловые значения")
    frames = [
        {
            "q": clip.q[t].tolist(),
            "base_pos": clip.base_pos[t].tolist(),
            "base_quat": clip.base_quat[t].tolist(),
            "body_pos": clip.body_pos[t].tolist(),
            "contacts": clip.contacts[t].tolist(),
        }
        for t in range(clip.n_frames)
    ]
    return {
        "fps": clip.fps,
        "joint_names": list(clip.joint_names),
        "frames": frames,
        "feet_indices": list(clip.feet_indices),
    }


def save_motion(clip: MotionClip, path: str | Path) -> Path:
    """Пишем клип в JSON с полной точностью double."""

    return write_json(path, motion_to_dict(clip))


def finite_difference(series: np.ndarray, dt: float) -> np.ndarray:
    """
    Прямая разность (x[t+1] - x[t]) / dt.
    Последняя строка повторяет предыдущую производную, длина ряда сохраняется.
    """

    series = np.asarray(series, dtype=np.float64)
    if not dt > 0:
        raise ArgumentError(f"dt должен быть > 0, получено {dt}")
    if series.ndim == 0 or series.shape[0] < 2:
        raise SizeError("Для конечной разности нужно хотя бы два отсчёта")
    diff = np.diff(series, axis=0) / dt
    return np.concatenate([diff, diff[-1:]], axis=0)


def segment_clips(clip: MotionClip, seconds: float = 10.0) -> list[MotionClip]:
    """
    Нарезаем клип на куски фиксированной длины.
    Короткий клип вернётся целиком. Хвост длиной от 1 с сохраняется,
    более короткий отбрасывается.
    """

    if not seconds > 0:
        raise ArgumentError(f"seconds должен быть > 0, получено {seconds}")
    size = int(round(seconds * clip.fps))
    if size < 2:
        raise ArgumentError(f"seconds={seconds} при {clip.fps} fps даёт клипы короче двух кадров")
    if clip.n_frames <= size:
        return [clip]
    n_full = clip.n_frames // size
    parts = [clip.slice(i * size, (i + 1) * size) for i in range(n_full)]
    rest = clip.n_frames - n_full * size
    # хвост сравниваем в кадрах: rest * dt теряет точность при дробном dt
    if rest >= max(2, int(np.ceil(clip.fps - 1e-9))):
        parts.append(clip.slice(n_full * size, clip.n_frames))
    elif rest:
        log.debug("Отбрасываем хвост %d кадров", rest)
    return parts


class SynthMotionSpec(BaseModel):
    """Параметры синусоидального движения."""

    model_config = ConfigDict(frozen=True)

    n_joints: int = Field(gt=0)
    duration: float = Field(gt=0)
    fps: float = Field(default=50.0, gt=0)
    amplitudes: list[float]
    frequencies: list[float]
    phases: list[float] | None = None
    link_lengths: list[float] | None = None

    @model_validator(mode="after")
    def check_shapes(self) -> Self:
        """Одно значение на сустав, не меньше двух кадров."""

        for name in ("amplitudes", "frequencies", "phases", "link_lengths"):
            values = getattr(self, name)
            if values is None:
                continue
            if len(values) != self.n_joints:
                raise ValueError(f"{name}: нужно {self.n_joints} значений")
            if not all(np.isfinite(values)):
                raise ValueError(f"{name}: значения должны быть конечными")
        if self.duration * self.fps < 2:
            raise ValueError("duration * fps должно быть не меньше 2 кадров")
        if self.link_lengths is not None and any(v <= 0 for v in self.link_lengths):
            raise ValueError("link_lengths должны быть > 0")
        return self

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.fps))


DEFAULT_LINK_LENGTH: float = 0.25


def synth_motion(spec: SynthMotionSpec) -> MotionClip:
    """
    Синусоиды по суставам: q[t][j] = A_j sin(2 pi f_j t dt + phi_j).
    Основание неподвижно, тела - концы звеньев игрушечной руки,
    стопа - последнее звено, все кадры с контактом.
    """

    n = spec.n_frames
    dt = 1.0 / spec.fps
    time = np.arange(n)[:, None] * dt
    amp = np.asarray(spec.amplitudes, dtype=np.float64)
    freq = np.asarray(spec.frequencies, dtype=np.float64)
    phase = np.zeros(spec.n_joints) if spec.phases is None else np.asarray(spec.phases)
    q = amp * np.sin(2.0 * np.pi * freq * time + phase)
    lengths = (
        np.full(spec.n_joints, DEFAULT_LINK_LENGTH)
        if spec.link_lengths is None
        else np.asarray(spec.link_lengths)
    )
    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0
    return MotionClip(
        fps=spec.fps,
        joint_names=tuple(f"joint_{j}" for j in range(spec.n_joints)),
        q=q,
        base_pos=np.zeros((n, 3)),
        base_quat=quat,
        body_pos=forward_kinematics(q, lengths),
        contacts=np.ones((n, 1), dtype=bool),
        feet_indices=(spec.n_joints - 1,),
    )


def reference_body_positions(q: np.ndarray, link_lengths: np.ndarray) -> np.ndarray:
    """
    Тела референса через кинематику самого робота, (T, B, 3).
    Основание руки неподвижно, поэтому выравнивание сводится к пересчёту.
    """

    return forward_kinematics(q, link_lengths)
