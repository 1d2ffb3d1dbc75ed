"""Single-process oracle for the federated protocol.

Runs the identical encoder -> server head -> loss -> SGD computation in one
graph, with no messages and no wire rounding. Built from the same seeds, it
must track a federated run step for step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..models import ModelConfig, SplitModel, Variant, variant_model


@dataclass
class ReferenceRun:
    model: SplitModel
    losses: list[float]

    def state(self) -> dict[str, np.ndarray]:
        return self.model.state()


def monolithic_reference(
    variant: Variant | str,
    cfg: ModelConfig,
    ids: Sequence[int],
    image_view: np.ndarray,
    tabular_view: np.ndarray | None,
    labels: np.ndarray,
    batches: Iterable[Sequence[int]],
    lr: float,
    compute_consistency: bool = True,
) -> ReferenceRun:
    model = variant_model(variant, cfg, compute_consistency=compute_consistency)
    row = {int(i): r for r, i in enumerate(ids)}
    losses = []
    for batch in batches:
        idx = [row[int(i)] for i in batch]
        x_tab = tabular_view[idx] if tabular_view is not None else None
        out = model.train_step(image_view[idx], x_tab, labels[idx], list(batch), lr)
        losses.append(out.loss.item())
    return ReferenceRun(model, losses)
