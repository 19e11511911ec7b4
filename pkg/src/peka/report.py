"""Benchmark-grid assembly and rendering.

One row per (dataset, adapter) cell. Within each dataset group the row
with the highest mean PCC is starred, and every row carries its delta
against that dataset's ``none`` baseline plus the trainable-parameter
fraction. Rendering is purely a function of the cell values, so report
bytes are reproducible; timestamps live in a sidecar, never here.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field


@dataclass
class BenchCell:
    dataset: str
    adapter: str
    mean_pcc: float | None = None
    fold_pccs: list[float] = field(default_factory=list)
    trainable_fraction: float = 0.0
    error: str | None = None
    model_path: str = ""
    report_path: str = ""


@dataclass
class BenchmarkReport:
    cells: list[BenchCell]

    def datasets(self) -> list[str]:
        seen: list[str] = []
        for cell in self.cells:
            if cell.dataset not in seen:
                seen.append(cell.dataset)
        return seen

    def group(self, dataset: str) -> list[BenchCell]:
        return [cell for cell in self.cells if cell.dataset == dataset]

    def baseline(self, dataset: str) -> BenchCell | None:
        for cell in self.group(dataset):
            if cell.adapter == "none":
                return cell
        return None

    def best(self, dataset: str) -> BenchCell | None:
        scored = [cell for cell in self.group(dataset)
                  if cell.mean_pcc is not None]
        if not scored:
            return None
        return max(scored, key=lambda cell: cell.mean_pcc)

    def delta(self, cell: BenchCell) -> float | None:
        base = self.baseline(cell.dataset)
        if base is None or base.mean_pcc is None or cell.mean_pcc is None:
            return None
        return cell.mean_pcc - base.mean_pcc

    def any_failed(self) -> bool:
        return any(cell.error is not None for cell in self.cells)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["dataset", "adapter", "mean_pcc", "delta_vs_none",
                         "trainable_fraction", "best", "fold_pccs", "status"])
        for cell in self.cells:
            delta = self.delta(cell)
            best = self.best(cell.dataset)
            writer.writerow([
                cell.dataset,
                cell.adapter,
                "" if cell.mean_pcc is None else f"{cell.mean_pcc:.6f}",
                "" if delta is None else f"{delta:+.6f}",
                f"{cell.trainable_fraction:.6f}",
                int(best is cell),
                ";".join(f"{v:.6f}" for v in cell.fold_pccs),
                "ok" if cell.error is None else f"FAILED: {cell.error}",
            ])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = []
        header = (f"{'dataset':<16} {'adapter':<10} {'mean_pcc':>9} "
                  f"{'delta':>8} {'frac':>7}  folds")
        lines.append(header)
        lines.append("-" * len(header))
        for dataset in self.datasets():
            best = self.best(dataset)
            for cell in self.group(dataset):
                if cell.error is not None:
                    lines.append(f"{cell.dataset:<16} {cell.adapter:<10} "
                                 f"{'FAILED':>9} {'':>8} {'':>7}  {cell.error}")
                    continue
                delta = self.delta(cell)
                star = " *" if cell is best else "  "
                folds = " ".join(f"{v:.3f}" for v in cell.fold_pccs)
                lines.append(
                    f"{cell.dataset:<16} {cell.adapter:<10}"
                    f" {cell.mean_pcc:>8.4f}{star}"
                    f" {'' if delta is None else f'{delta:+.3f}':>8}"
                    f" {cell.trainable_fraction:>7.4f}  {folds}")
        return "\n".join(lines) + "\n"
