"""Training-curve records and CSV round-trip."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence, Union

CURVE_COLUMNS = (
    "step",
    "reward_avg",
    "code_proportion",
    "code_in_correct",
    "code_count_avg",
    "response_length_avg",
    "kept_group_fraction",
)


@dataclass(frozen=True)
class CurvePoint:
    step: int
    reward_avg: float
    code_proportion: float
    code_in_correct: float
    code_count_avg: float
    response_length_avg: float
    kept_group_fraction: float

    def __post_init__(self) -> None:
        for name in (
            "reward_avg",
            "code_proportion",
            "code_in_correct",
            "kept_group_fraction",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.step < 0:
            raise ValueError("step must be non-negative")

    @classmethod
    def from_dict(cls, row: dict) -> "CurvePoint":
        kwargs = {f.name: row[f.name] for f in fields(cls)}
        kwargs["step"] = int(kwargs["step"])
        for name, value in kwargs.items():
            if name != "step":
                kwargs[name] = float(value)
        return cls(**kwargs)


def export_curves(
    points: Iterable[Union[CurvePoint, dict]], path: Union[str, Path]
) -> int:
    """Write points as CSV with the fixed column order; returns rows written."""
    count = 0
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for point in points:
            row = asdict(point) if isinstance(point, CurvePoint) else dict(point)
            writer.writerow({name: row[name] for name in CURVE_COLUMNS})
            count += 1
    return count


def load_curves(path: Union[str, Path]) -> list[CurvePoint]:
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != list(CURVE_COLUMNS):
            raise ValueError(
                f"unexpected curve columns: {reader.fieldnames!r}"
            )
        return [CurvePoint.from_dict(row) for row in reader]


def history_to_points(history: Sequence[dict]) -> list[CurvePoint]:
    return [CurvePoint.from_dict(row) for row in history]
