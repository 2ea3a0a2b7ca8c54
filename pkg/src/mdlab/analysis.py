"""Trajectory analytics: correct-span statistics, backslide detection,
positional histograms, CSV reports.

Step-reward sequences are ordered in decode order (t = T..0), so the last
element is always the final-step reward.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path


def correct_spans(step_rewards) -> tuple[int, int]:
    """(longest run of 1s, number of maximal runs)."""
    rewards = list(step_rewards)
    if not rewards:
        raise ValueError("empty reward sequence")
    max_span = span = num_spans = 0
    prev = 0
    for r in rewards:
        if r:
            span += 1
            if not prev:
                num_spans += 1
            max_span = max(max_span, span)
        else:
            span = 0
        prev = r
    return max_span, num_spans


def detect_backslide(step_rewards) -> bool:
    """True iff some non-final step is correct but the final step is not."""
    rewards = list(step_rewards)
    if not rewards:
        raise ValueError("empty reward sequence")
    return bool(any(rewards[:-1])) and not rewards[-1]


@dataclass
class TrajectoryReport:
    traj_id: str
    mode: str  # pure-diff | semi-ar
    n_steps: int
    backslide: bool
    max_span: int
    num_spans: int
    correct_positions: list[float]  # step index / n_steps, in [0, 1)
    final_correct: bool


def report_for(traj_id: str, mode: str, step_rewards) -> TrajectoryReport:
    rewards = list(step_rewards)
    n = len(rewards)
    max_span, num_spans = correct_spans(rewards)
    return TrajectoryReport(
        traj_id=traj_id,
        mode=mode,
        n_steps=n,
        backslide=detect_backslide(rewards),
        max_span=max_span,
        num_spans=num_spans,
        correct_positions=[j / n for j, r in enumerate(rewards) if r],
        final_correct=bool(rewards[-1]),
    )


def position_histogram(reports: list[TrajectoryReport], bins: int) -> dict[str, list[int]]:
    """Per-mode histogram of normalized correct-step positions. Bin counts
    sum to the total number of correct steps per mode."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    hist: dict[str, list[int]] = {}
    for rep in reports:
        row = hist.setdefault(rep.mode, [0] * bins)
        for pos in rep.correct_positions:
            row[min(bins - 1, int(bins * pos))] += 1
    return hist


def backslide_rate(reports: list[TrajectoryReport]) -> float:
    if not reports:
        return 0.0
    return sum(r.backslide for r in reports) / len(reports)


def write_report_csv(reports: list[TrajectoryReport], bins: int, out_path) -> None:
    """Per-trajectory rows plus histogram rows in a companion *_hist.csv."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["traj_id", "mode", "n_steps", "backslide", "max_span",
                    "num_spans", "final_correct", "correct_positions"])
        for r in reports:
            w.writerow([r.traj_id, r.mode, r.n_steps, int(r.backslide), r.max_span,
                        r.num_spans, int(r.final_correct),
                        ";".join(f"{p:.6f}" for p in r.correct_positions)])
    hist = position_histogram(reports, bins)
    hist_path = out_path.with_name(out_path.stem + "_hist.csv")
    with open(hist_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode"] + [f"bin_{i}" for i in range(bins)])
        for mode in sorted(hist):
            w.writerow([mode] + hist[mode])
        w.writerow(["backslide_rate", f"{backslide_rate(reports):.6f}"] + [""] * (bins - 1))
