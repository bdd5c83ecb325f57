"""Ablation grid and K-sweep runners with CSV/JSON tables."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

from .config import ExperimentConfig
from .training import Benchmark, run_recipe

log = logging.getLogger(__name__)

POOLINGS = ("gap", "gmp", "gkmp")
EMBEDDING_LOSSES = ("none", "within", "full")
K_SWEEP = (1, 2, 4, 8, 16, 32)


@dataclass(frozen=True)
class Cell:
    pooling: str
    embedding_loss: str
    localizer: bool
    weighted_finetune: bool
    seed: int
    k: int | None = None

    def overrides(self) -> dict:
        out = {"pooling": self.pooling, "embedding_loss": self.embedding_loss,
               "localizer": self.localizer, "weighted_finetune": self.weighted_finetune,
               "seed": self.seed}
        if self.k is not None:
            out["k"] = self.k
        return out


@dataclass
class AblationGrid:
    poolings: tuple = POOLINGS
    embedding_losses: tuple = EMBEDDING_LOSSES
    localizer: tuple = (False, True)
    weighted: tuple = (False, True)
    seeds: tuple = (0,)
    extra: list = field(default_factory=list)

    def cells(self) -> list[Cell]:
        """Every valid combination; weighted averaging only exists for k-max pooling."""
        out = [Cell(p, e, loc, w, s)
               for s, p, e, w, loc in itertools.product(self.seeds, self.poolings,
                                                        self.embedding_losses, self.weighted,
                                                        self.localizer)
               if not (w and p != "gkmp")]
        return out + list(self.extra)


def k_sweep_cells(spatial: int, seeds=(0,), embedding_loss: str = "full") -> list[Cell]:
    ks = sorted({k for k in K_SWEEP if k <= spatial} | {spatial})
    return [Cell("gkmp", embedding_loss, False, False, s, k) for s in seeds for k in ks]


def _metrics_row(summary: dict, localizer: bool) -> dict:
    ev = summary["eval"]["localizer" if localizer else "full_image"]
    row = {"classifier_accuracy": summary["classifier_accuracy"],
           "pipeline_accuracy": ev["accuracy"],
           "loc_accuracy": ev["loc_accuracy"],
           "mean_iou": ev["mean_iou"],
           "truth_box_accuracy": summary["eval"]["truth"]["accuracy"]}
    if "objective_after_finetune" in summary:
        row["objective_before_finetune"] = summary["objective_before_finetune"]
        row["objective_after_finetune"] = summary["objective_after_finetune"]
    return row


def run_ablation(base: ExperimentConfig, cells: list[Cell], outdir=None,
                 bench: Benchmark | None = None) -> list[dict]:
    """One recipe per cell; failures are recorded and the grid continues.

    Cells that differ only in the localizer switch share one training run,
    since the classifier stages never look at the localizer.
    """
    groups: dict[Cell, list[Cell]] = {}
    for cell in cells:
        groups.setdefault(Cell(**{**cell.__dict__, "localizer": True}), []).append(cell)
    rows = []
    for key, members in groups.items():
        t0 = time.perf_counter()
        try:
            cfg = base.replace(**key.overrides())
            if not any(c.localizer for c in members):
                cfg = cfg.replace(localizer=False)
            data = bench if bench is not None and cfg.data_seed == base.data_seed else None
            summary = run_recipe(cfg, bench=data)["summary"]
        except Exception as exc:  # noqa: BLE001 - one bad cell must not stop the grid
            log.warning("cell %s failed: %s", key, exc)
            for cell in members:
                row = {**base.replace(localizer=False).flat(), **cell.overrides(),
                       "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                       "traceback": traceback.format_exc(limit=3)}
                rows.append(row)
            continue
        seconds = time.perf_counter() - t0
        for cell in members:
            row = {**cfg.replace(localizer=cell.localizer).flat(), "status": "ok",
                   **_metrics_row(summary, cell.localizer), "seconds": seconds}
            rows.append(row)
        log.info("cell %s done in %.1fs", key, seconds)
    if outdir is not None:
        write_table(rows, outdir)
    return rows


def write_table(rows: list[dict], outdir) -> tuple[Path, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = outdir / "ablation.json", outdir / "ablation.csv"
    json_path.write_text(json.dumps(rows, indent=1))
    columns = list(dict.fromkeys(k for r in rows for k in r))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: json.dumps(v) if isinstance(v, (list, tuple, dict)) else v
                             for k, v in r.items()})
    return json_path, csv_path
