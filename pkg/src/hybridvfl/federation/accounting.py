"""Communication cost summary for a federated run."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .protocol import RoundLog

BYTES_PER_FLOAT32 = 4


def embedding_bytes_per_sample(total_embedding_dims: int, bytes_per_value: int = BYTES_PER_FLOAT32) -> int:
    return total_embedding_dims * bytes_per_value


def raw_image_bytes(height: int, width: int, channels: int = 3, bytes_per_value: int = BYTES_PER_FLOAT32) -> int:
    return height * width * channels * bytes_per_value


@dataclass(frozen=True)
class CommReport:
    rounds: int
    samples: int
    upstream_bytes_per_sample: float
    downstream_bytes_per_sample: float
    raw_image_bytes_per_sample: int
    reduction_vs_raw: float

    def to_text(self) -> str:
        return "".join(
            f"{k}={v}\n"
            for k, v in (
                ("rounds", self.rounds),
                ("samples", self.samples),
                ("upstream_bytes_per_sample", repr(self.upstream_bytes_per_sample)),
                ("downstream_bytes_per_sample", repr(self.downstream_bytes_per_sample)),
                ("raw_image_bytes_per_sample", self.raw_image_bytes_per_sample),
                ("reduction_vs_raw", repr(self.reduction_vs_raw)),
            )
        )


def comm_report(logs: Sequence[RoundLog], image_shape: tuple[int, int, int] = (100, 100, 3)) -> CommReport:
    """Per-sample traffic versus shipping the raw float32 image instead.

    Upload and download are reported separately; the upload figure is the
    one that compares against raw-image transmission.
    """
    if not logs:
        raise ValueError("comm_report needs at least one round log")
    samples = sum(log.batch_size for log in logs)
    up = sum(log.upstream_bytes for log in logs) / samples
    down = sum(log.downstream_bytes for log in logs) / samples
    h, w, c = image_shape
    raw = raw_image_bytes(h, w, c)
    return CommReport(len(logs), samples, up, down, raw, raw / up)
