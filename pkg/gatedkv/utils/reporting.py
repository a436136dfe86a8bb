"""确定性 CSV 写出：列顺序固定，浮点格式固定，换行统一为 \n"""
import csv
import os
from typing import Any, Dict, Iterable, List, Sequence


def _prepare(path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)


def _cell(value: Any) -> Any:
    if isinstance(value, float):
        return f"{value:.6f}"
    if isinstance(value, (list, tuple)):
        return ";".join(str(_cell(v)) for v in value)
    return value


def write_rows(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    _prepare(path)
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
            count += 1
    return count


def write_dicts(path: str, records: List[Dict[str, Any]]) -> int:
    """以第一条记录的键为列"""
    if not records:
        return write_rows(path, [], [])
    header = list(records[0].keys())
    return write_rows(path, header, ([r[k] for k in header] for r in records))
