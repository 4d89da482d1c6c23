"""CSV and JSON Lines writers.  Every file carries the resolved config."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping


def _header_line(config: dict) -> str:
    return "# config: " + json.dumps(config, sort_keys=True) + "\n"


def write_subset_table(path, num_modalities: int, columns: Mapping[str, Mapping[tuple, float]],
                       config: dict, mark_best: bool = False) -> None:
    """One row per subset with present/absent bits, one accuracy column per entry
    of ``columns``, and a closing Average row."""
    names = list(columns)
    subsets = list(next(iter(columns.values())))
    bits = [f"m{k}" for k in range(1, num_modalities + 1)]
    with open(path, "w", newline="") as fh:
        fh.write(_header_line(config))
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(bits + names + (["best"] if mark_best else []))

        def emit(lead, values):
            row = lead + [repr(float(v)) for v in values]
            if mark_best:
                top = max(values)
                row.append("|".join(n for n, v in zip(names, values) if v == top))
            writer.writerow(row)

        for subset in subsets:
            emit(["1" if k in subset else "0" for k in range(1, num_modalities + 1)],
                 [columns[n][subset] for n in names])
        averages = [sum(columns[n].values()) / len(columns[n]) for n in names]
        emit(["Average"] + [""] * (num_modalities - 1), averages)


def read_subset_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def write_loss_curve(path, losses, config: dict, start_step: int = 0) -> None:
    with open(path, "w") as fh:
        fh.write(_header_line(config))
        fh.write("step,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{start_step + i},{float(loss)!r}\n")


def append_jsonl(path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
