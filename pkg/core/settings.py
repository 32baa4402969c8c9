"""
Тут настройки приводов, активаций и логера.
Если что-то надо добавить то это делать тут!
ACTUATORS: dict[str, ActuatorParams] - каталог моделей приводов
JOINT_ACTUATORS: list[tuple[str, str]] - шаблон имени сустава -> модель привода
ACTIVATIONS: dict[str, tuple] - гладкие активации сетей и их производные
"""

import logging
import os

import numpy as np
from dotenv import load_dotenv

from core.actuation import ActuatorParams


# Подхватываем .env если он есть
load_dotenv()

# Модели приводов
ACTUATORS: dict[str, ActuatorParams] = {
    "5020-16": ActuatorParams(
        tau_y1=24.8, tau_y2=31.9, v_x1=30.86, v_x2=40.13,
        mu_s=0.6, v_act=0.01, mu_d=0.06, armature_I=3.610e-03,
    ),
    "7520-14.3": ActuatorParams(
        tau_y1=71.0, tau_y2=83.3, v_x1=22.63, v_x2=35.52,
        mu_s=1.6, v_act=0.01, mu_d=0.16, armature_I=1.018e-02,
    ),
    "7520-22.5": ActuatorParams(
        tau_y1=111.0, tau_y2=131.0, v_x1=14.5, v_x2=22.7,
        mu_s=2.4, v_act=0.01, mu_d=0.24, armature_I=2.510e-02,
    ),
    "4010-25": ActuatorParams(
        tau_y1=4.8, tau_y2=8.6, v_x1=15.3, v_x2=24.76,
        mu_s=0.6, v_act=0.01, mu_d=0.06, armature_I=4.250e-03,
    ),
}
ACTUATORS["5020"] = ACTUATORS["5020-16"]
ACTUATORS["4010"] = ACTUATORS["4010-25"]

# Суставы гуманоида -> привод, первый совпавший шаблон
JOINT_ACTUATORS: list[tuple[str, str]] = [
    (r".*_hip_pitch_joint", "7520-22.5"),
    (r".*_hip_roll_joint", "7520-22.5"),
    (r".*_knee_joint", "7520-22.5"),
    (r".*_hip_yaw_joint", "7520-14.3"),
    (r".*_ankle_(pitch|roll)_joint", "5020"),
    (r"waist_(roll|pitch)_joint", "5020"),
    (r"waist_yaw_joint", "7520-14.3"),
    (r".*_shoulder_(pitch|roll|yaw)_joint", "5020"),
    (r".*_elbow_joint", "5020"),
    (r".*_wrist_roll_joint", "5020"),
    (r".*_wrist_(pitch|yaw)_joint", "4010"),
]

# Активации: имя -> (f, f'(через значение f))
ACTIVATIONS: dict[str, tuple] = {
    "tanh": (np.tanh, lambda y: 1.0 - y**2),
}
ACTIVATION: str = "tanh"

DEFAULT_SEED: int = int(os.environ.get("MOTION_SEED", "0"))
LOG_LEVEL: str = os.environ.get("MOTION_LOG_LEVEL", "INFO").upper()

logging.basicConfig(
    level=LOG_LEVEL, format="%(name)s %(asctime)s %(levelname)s %(message)s"
)
