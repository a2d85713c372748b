"""Dice per case and the tumor-size / contrast-phase breakdowns."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume_io import SegmentationMask, ShapeMismatchError

SMALL_MM = 5.0
LARGE_MM = 10.0
SIZE_GROUP_ORDER = ("small", "middle", "large")
PHASE_ORDER = ("arterial", "venous")


def _labels(m) -> np.ndarray:
    return m.labels if isinstance(m, SegmentationMask) else np.asarray(m)


def dice_per_case(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)``; two empty masks score 1.0."""
    p, g = _labels(pred) > 0, _labels(gt) > 0
    if p.shape != g.shape:
        raise ShapeMismatchError(f"prediction shape {p.shape} != ground truth {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def tumor_size(gt, spacing=None) -> float:
    """Largest single-axis physical extent (mm) over 26-connected tumor components."""
    labels = _labels(gt) > 0
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, SegmentationMask) else (1.0, 1.0, 1.0)
    if not labels.any():
        return 0.0
    comps, n = ndimage.label(labels, structure=np.ones((3, 3, 3), dtype=bool))
    sx, sy, sz = spacing
    best = 0.0
    for sl in ndimage.find_objects(comps):
        ez, ey, ex = (s.stop - s.start for s in sl)
        best = max(best, ez * sz, ey * sy, ex * sx)
    return float(best)


def size_group(size_mm: float) -> str:
    if size_mm == 0:
        return "none"
    if size_mm < SMALL_MM:
        return "small"
    if size_mm <= LARGE_MM:
        return "middle"
    return "large"


@dataclass
class CaseResult:
    case_id: str
    dice: float
    tumor_size_mm: float
    size_group: str
    phase: str


@dataclass
class EvalReport:
    cases: list[CaseResult]
    mean_dice: float
    by_size: dict
    by_phase: dict

    def to_dict(self) -> dict:
        return {
            "cases": [asdict(c) for c in self.cases],
            "mean_dice": self.mean_dice,
            "by_size": self.by_size,
            "by_phase": self.by_phase,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_table(self) -> str:
        lines = [f"{'case':<12} {'dice':>7} {'size_mm':>8} {'group':<7} phase"]
        for c in self.cases:
            lines.append(f"{c.case_id:<12} {c.dice:7.4f} {c.tumor_size_mm:8.2f} {c.size_group:<7} {c.phase}")
        lines.append(f"mean dice: {self.mean_dice:.4f}")
        for title, groups in (("size", self.by_size), ("phase", self.by_phase)):
            for k, v in groups.items():
                mean = "n/a" if v["mean_dice"] is None else f"{v['mean_dice']:.4f}"
                lines.append(f"  {title}={k:<9} n={v['count']:<3} mean dice {mean}")
        return "\n".join(lines) + "\n"


def _group_means(cases, key, order) -> dict:
    keys = list(order) + sorted({getattr(c, key) for c in cases} - set(order))
    out = {}
    for k in keys:
        vals = [c.dice for c in cases if getattr(c, key) == k]
        out[k] = {"mean_dice": float(np.mean(vals)) if vals else None, "count": len(vals)}
    return out


def summarize(cases: list[CaseResult]) -> EvalReport:
    if not cases:
        raise ValueError("no cases to evaluate")
    return EvalReport(
        cases=list(cases),
        mean_dice=float(np.mean([c.dice for c in cases])),
        by_size=_group_means(cases, "size_group", SIZE_GROUP_ORDER),
        by_phase=_group_means(cases, "phase", PHASE_ORDER),
    )


def evaluate(cases) -> EvalReport:
    """Score ``(pred, gt, volume)`` triples; ``volume`` supplies case id, spacing and phase."""
    results = []
    for pred, gt, vol in cases:
        size = tumor_size(gt, vol.spacing)
        phase = getattr(vol.phase, "value", vol.phase)
        results.append(CaseResult(vol.case_id, dice_per_case(pred, gt), size, size_group(size), phase))
    return summarize(results)


def plot_report(report: EvalReport, path) -> Path:
    """Bar charts of mean Dice per size group and per phase."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, (title, groups) in zip(axes, (("tumor size", report.by_size), ("contrast phase", report.by_phase))):
        names = list(groups)
        vals = [groups[k]["mean_dice"] or 0.0 for k in names]
        ax.bar(names, vals, color="#4a7ab5")
        ax.set_ylim(0, 1)
        ax.set_ylabel("Dice per case")
        ax.set_title(f"Dice w.r.t. {title}")
        for i, v in enumerate(vals):
            ax.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    # fixed metadata keeps the PNG byte-stable across runs
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path
