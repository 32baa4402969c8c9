"""
Ошибки предметной области.
Все наследуются от встроенных исключений, так что код ловящий ValueError
продолжает работать.
"""


class MotionSchemaError(ValueError):
    """Файл движения не соответствует схеме (нет ключа или лишний ключ)."""


class MotionValidationError(ValueError):
    """Нарушен инвариант клипа: кватернион, fps, нечисловые значения."""


class DimensionError(ValueError):
    """Не совпадают размерности массивов."""


class SizeError(ValueError):
    """Слишком короткий ряд для вычисления."""


class ArgumentError(ValueError):
    """Недопустимое значение аргумента."""


class UndefinedMetricError(ValueError):
    """Метрика не определена: все шаги исключены."""


class CheckpointError(ValueError):
    """Чекпоинт повреждён или несовместим."""


class ConfigurationError(ValueError):
    """Несогласованная конфигурация запуска."""


class NumericalBlowupError(RuntimeError):
    """Состояние симуляции перестало быть конечным."""
