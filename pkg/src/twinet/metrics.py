"""Deterministic CSV output for experiment artifacts."""

from __future__ import annotations

import csv
import os
from typing import Iterable


class SchemaError(ValueError):
    """Row keys do not match the declared column schema."""


def write_metrics_csv(rows: Iterable[dict], schema: list[str], path: str) -> None:
    """Write rows with a fixed column order; validates before touching the file.

    Deterministic: same rows in, same bytes out. Every row must carry exactly
    the schema's keys.
    """
    rows = list(rows)
    for i, row in enumerate(rows):
        if set(row) != set(schema):
            raise SchemaError(
                f"row {i} keys {sorted(row)} do not match schema {schema}"
            )
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=schema, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
