"""Ablation suites mirroring the comparison tables.

Each suite expands a base config into labelled arms, trains every arm with
the base seed and merges the final-epoch numbers into one table.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from densedrop.config import ExperimentConfig
from densedrop.data import Dataset
from densedrop.models import build_model, count_params
from densedrop.train import RunResult, run_experiment

log = logging.getLogger(__name__)

SUITES = ("granularity", "schedule", "headline", "location")


@dataclass(frozen=True)
class Arm:
    label: str
    slug: str
    config: ExperimentConfig


def _with_depth(config: ExperimentConfig, depth: int) -> ExperimentConfig:
    return config.replace(model=dataclasses.replace(config.model, depth=depth))


def suite_arms(name: str, base: ExperimentConfig) -> List[Arm]:
    if name == "granularity":
        return [
            Arm("Unit-wise dropout", "unit", base.with_dropout("pre", "unit", "uniform", 0.5)),
            Arm("Layer-wise dropout", "layer", base.with_dropout("pre", "layer", "uniform", 0.5)),
            Arm("Channel-wise dropout", "channel", base.with_dropout("pre", "channel", "uniform", 0.5)),
        ]
    if name == "schedule":
        arms = [Arm("Channel-wise dropout (uniform 0.5)", "uniform", base.with_dropout("pre", "channel", "uniform", 0.5))]
        for v in ("v1", "v2", "v3"):
            arms.append(Arm(f"Channel-wise dropout with {v}", v, base.with_dropout("pre", "channel", v)))
        return arms
    if name == "headline":
        arms = []
        prefix = "DenseNet-BC" if base.model.variant == "bc" else "DenseNet"
        for depth in base.ablation_depths or (base.model.depth,):
            cfg = _with_depth(base, depth)
            arms += [
                Arm(prefix, f"d{depth}-none", cfg.with_dropout("none")),
                Arm(f"{prefix}(standard dropout)", f"d{depth}-standard", cfg.with_dropout("standard", "unit", "uniform", 0.5)),
                Arm(f"{prefix}(specialized dropout)", f"d{depth}-specialized", cfg.with_dropout("pre", "channel", "v3")),
            ]
        return arms
    if name == "location":
        return [
            Arm("standard dropout", "standard", base.with_dropout("standard", "unit", "uniform", 0.5)),
            Arm("Pre-dropout", "pre", base.with_dropout("pre", "unit", "uniform", 0.5)),
        ]
    raise ValueError(f"unknown suite {name!r}; expected one of {', '.join(SUITES)}")


@dataclass
class Row:
    label: str
    slug: str
    depth: int
    mode: str
    granularity: str
    schedule: str
    params: int
    train_err: float
    test_err: float


TABLE_FIELDS = ("label", "slug", "depth", "mode", "granularity", "schedule", "params", "train_err", "test_err")


def _run_arm(arm: Arm, out: Path, data: Optional[Tuple[Dataset, Dataset]]) -> RunResult:
    cfg = arm.config.replace(out=str(out / arm.slug))
    return run_experiment(cfg, data=data)


def ablation_suite(
    name: str,
    base: ExperimentConfig,
    out: Optional[Path] = None,
    data: Optional[Tuple[Dataset, Dataset]] = None,
    jobs: int = 1,
) -> List[Row]:
    """Run every arm of suite ``name`` and write ``table.csv`` under ``out``."""
    out = Path(out or Path(base.out) / name)
    out.mkdir(parents=True, exist_ok=True)
    arms = suite_arms(name, base)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_arm, arms, [out] * len(arms), [data] * len(arms)))
    else:
        results = [_run_arm(arm, out, data) for arm in arms]

    rows = []
    for arm, res in zip(arms, results):
        m = arm.config.model
        rows.append(
            Row(arm.label, arm.slug, m.depth, m.dropout.value, m.granularity.value, m.schedule.value,
                count_params(build_model(m)), res.final_train_err, res.final_test_err)
        )
    write_table(rows, out / "table.csv")
    return rows


def write_table(rows: Sequence[Row], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_FIELDS)
        for r in rows:
            w.writerow([getattr(r, f) for f in TABLE_FIELDS])


def read_table(path: Path) -> List[Row]:
    with open(path, newline="") as fh:
        rows = []
        for d in csv.DictReader(fh):
            rows.append(
                Row(d["label"], d["slug"], int(d["depth"]), d["mode"], d["granularity"], d["schedule"],
                    int(d["params"]), float(d["train_err"]), float(d["test_err"]))
            )
        return rows


def format_table(rows: Sequence[Row]) -> str:
    width = max(len(r.label) for r in rows) if rows else 10
    lines = [f"{'Method':<{width}}  Depth  Params   Train err (%)  Test err (%)"]
    for r in rows:
        lines.append(f"{r.label:<{width}}  {r.depth:>5}  {r.params / 1e6:5.2f}M  {r.train_err:>13.2f}  {r.test_err:>12.2f}")
    return "\n".join(lines)
