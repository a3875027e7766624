"""Run-level summary metrics.

The two headline columns are local stand-ins with exact definitions:
stability is 1/(1 + coefficient of variation) of the gradient-norm history,
alignment is the mean cosine between each step's gradient and the direction
prior in force at that step.  Absolute values are not comparable with any
published numbers; only orderings between methods on the same task are.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


class MetricsError(ValueError):
    """History too short or otherwise unusable for a metric."""


def gradient_stability(norms: Sequence[float]) -> float:
    """1/(1 + population-std/mean) of the norm history; 1.0 for an all-zero
    history (degenerate but defined)."""
    arr = np.asarray(norms, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise MetricsError(f"gradient_stability needs >= 2 norms, got {arr.size}")
    if np.any(arr < 0.0) or not np.all(np.isfinite(arr)):
        raise MetricsError("gradient norms must be finite and nonnegative")
    mean = float(arr.mean())
    if mean == 0.0:
        return 1.0
    cv = float(arr.std()) / mean
    return 1.0 / (1.0 + cv)


def directional_alignment(grads: Sequence[np.ndarray],
                          priors: Sequence[np.ndarray]) -> float:
    """Mean over steps of cos<g_k, d_k>, pairing by step index."""
    if len(grads) != len(priors):
        raise MetricsError(f"history length mismatch: {len(grads)} grads, {len(priors)} priors")
    if not grads:
        raise MetricsError("empty gradient history")
    cosines = []
    for k, (g, d) in enumerate(zip(grads, priors)):
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        d = np.asarray(d, dtype=np.float64).reshape(-1)
        gn, dn = np.linalg.norm(g), np.linalg.norm(d)
        if gn == 0.0 or dn == 0.0:
            raise MetricsError(f"zero-norm vector at step {k}")
        cosines.append(min(1.0, max(-1.0, float(g @ d) / (gn * dn))))
    return float(np.mean(cosines))


def alignment_from_cosines(cosines: Sequence[float]) -> float:
    """Mean of already-logged cos<g, prior> values (the trainer records one
    per step, so reports do not need to retain full gradient vectors)."""
    vals = [c for c in cosines if c is not None]
    if not vals:
        raise MetricsError("no prior cosines recorded; was the warmup phase skipped?")
    return float(np.mean(vals))


@dataclass(frozen=True)
class RunSummary:
    avg_accuracy: float
    gradient_stability: float
    directional_alignment: float
    final_loss: float
    steps_to_loss_threshold: int | None = None

    def to_dict(self) -> dict:
        return {
            "avg_accuracy": self.avg_accuracy,
            "gradient_stability": self.gradient_stability,
            "directional_alignment": self.directional_alignment,
            "final_loss": self.final_loss,
            "steps_to_loss_threshold": self.steps_to_loss_threshold,
        }


def summarize(report, loss_threshold: float | None = None) -> RunSummary:
    """Aggregate a finished run: final accuracy, stability over the norm
    history, mean prior-cosine, final loss, and the first step (if any)
    where loss_total dropped below the threshold."""
    records = report.records
    if not records:
        raise MetricsError("cannot summarize a run with empty history")
    norms = [r.grad_norm for r in records]
    if len(norms) >= 2:
        stability = gradient_stability(norms)
    else:
        logger.warning("single-step history: stability reported as 1.0 by convention")
        stability = 1.0
    alignment = alignment_from_cosines([r.cos_prior for r in records])
    final_loss = records[-1].loss_total
    steps_to = None
    if loss_threshold is not None:
        for r in records:
            if r.loss_total < loss_threshold:
                steps_to = r.step
                break
    return RunSummary(
        avg_accuracy=report.final_accuracy,
        gradient_stability=stability,
        directional_alignment=alignment,
        final_loss=final_loss,
        steps_to_loss_threshold=steps_to,
    )
