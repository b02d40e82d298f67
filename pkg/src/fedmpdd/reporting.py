"""CSV metrics, JSON summaries and PGM images written by the CLI."""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .federation import RoundRecord

METRICS_HEADER = (
    "round",
    "train_loss",
    "test_accuracy",
    "round_bytes",
    "cumulative_bytes",
    "grad_estimate_norm_sq",
)
ATTACK_HEADER = ("iteration", "matching_loss", "input_mse")


def fmt(x: Optional[float]) -> str:
    """17 significant digits, so every float64 round-trips exactly."""
    return "" if x is None else format(float(x), ".17g")


def metrics_row(r: RoundRecord) -> list[str]:
    return [
        str(r.round),
        fmt(r.train_loss),
        fmt(r.test_accuracy),
        str(r.uplink_bytes),
        str(r.cumulative_bytes),
        fmt(r.grad_estimate_norm_sq),
    ]


class MetricsWriter:
    """Appends one row per round and flushes it immediately."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(METRICS_HEADER)
        self._fh.flush()

    def __call__(self, record: RoundRecord):
        self._w.writerow(metrics_row(record))
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[RoundRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [
            RoundRecord(
                round=int(row[0]),
                train_loss=float(row[1]),
                test_accuracy=float(row[2]) if row[2] else None,
                uplink_bytes=int(row[3]),
                cumulative_bytes=int(row[4]),
                grad_estimate_norm_sq=float(row[5]),
            )
            for row in reader
        ]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_attack_csv(path, losses: Iterable[float], mses: Iterable[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTACK_HEADER)
        for i, (loss, mse) in enumerate(zip(losses, mses)):
            w.writerow([i, fmt(loss), fmt(mse)])


def to_gray8(img: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and scale to 8-bit gray."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary PGM (P5), maxval 255. 1-D inputs are written as a single row."""
    img = np.atleast_2d(to_gray8(img))
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    return np.frombuffer(data[m.end() : m.end() + w * h], dtype=np.uint8).reshape(h, w)
