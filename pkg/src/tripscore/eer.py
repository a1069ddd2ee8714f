"""Equal error rate for verification trials via a deterministic threshold sweep.

A trial is accepted when its score is at or above the threshold. Sweeping the
sorted distinct scores gives a non-increasing false-acceptance rate and a
non-decreasing false-rejection rate; the EER is read off where their
difference crosses zero, linearly interpolated between the two adjacent sweep
points. The value depends only on the ordering of scores, so it is invariant
under any strictly increasing transform.
"""

from __future__ import annotations

import math
from bisect import bisect_left

__all__ = ["compute_eer"]


def compute_eer(trials: list[tuple[str, float]]) -> tuple[float, float]:
    """Return ``(eer, threshold)`` for labeled trial scores.

    ``trials`` holds ``("target" | "nontarget", score)`` pairs; at least one
    of each label is required and scores must be finite.
    """
    targets: list[float] = []
    nontargets: list[float] = []
    for label, score in trials:
        if not math.isfinite(score):
            raise ValueError(f"non-finite score {score!r}")
        if label == "target":
            targets.append(score)
        elif label == "nontarget":
            nontargets.append(score)
        else:
            raise ValueError(f"unknown label {label!r}")
    if not targets or not nontargets:
        raise ValueError("need at least one target and one nontarget trial")
    targets.sort()
    nontargets.sort()

    def far(threshold: float) -> float:
        # Fraction of nontargets accepted: score >= threshold.
        return (len(nontargets) - bisect_left(nontargets, threshold)) / len(nontargets)

    def frr(threshold: float) -> float:
        # Fraction of targets rejected: score < threshold.
        return bisect_left(targets, threshold) / len(targets)

    thresholds = sorted(set(targets) | set(nontargets))
    points = [(t, far(t), frr(t)) for t in thresholds]
    # Virtual top threshold (reject everything) guarantees the sweep reaches
    # FAR - FRR <= 0 even when every score ties.
    points.append((thresholds[-1] + 1.0, 0.0, 1.0))

    # At the lowest distinct score FAR = 1 and FRR = 0, so the difference
    # starts positive and is non-increasing; find its first non-positive point.
    prev_t, prev_far, prev_frr = points[0]
    for t, cur_far, cur_frr in points[1:]:
        diff = cur_far - cur_frr
        if diff > 0:
            prev_t, prev_far, prev_frr = t, cur_far, cur_frr
            continue
        if diff == 0:
            return (cur_far + cur_frr) / 2.0, t
        prev_diff = prev_far - prev_frr
        alpha = prev_diff / (prev_diff - diff)
        eer = prev_far + alpha * (cur_far - prev_far)
        threshold = prev_t + alpha * (t - prev_t)
        return eer, threshold
    raise AssertionError("threshold sweep ended without a crossing")
