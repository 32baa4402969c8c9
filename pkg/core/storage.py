"""
Запись файлов.
Всё пишется во временный файл рядом с целевым и затем переименовывается,
прерванный запуск не оставит обрезанный отчёт.
"""

import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence


log = logging.getLogger(__name__)


def atomic_write_text(path: str | Path, text: str) -> Path:
    """Атомарно записываем текст в файл."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    log.debug("Записан файл %s", path)
    return path


def write_json(path: str | Path, payload: Any) -> Path:
    """JSON с фиксированным порядком ключей как в объекте."""

    text = json.dumps(payload, indent=2, ensure_ascii=False, allow_nan=False)
    return atomic_write_text(path, text + "\n")


def read_json(path: str | Path) -> Any:
    """Читаем JSON файл."""

    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """CSV таблица, числа через repr для полной точности."""

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return atomic_write_text(path, buf.getvalue())
