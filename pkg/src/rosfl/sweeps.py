"""Ablation drivers: correction-strength sweep and the rounds/epochs
trade-off at a fixed iteration budget.

Every cell is a full, isolated run; cells share the same seed list so
arms differ only in the studied knob. Cell failures are recorded and do
not stop the sweep.
"""

from __future__ import annotations

import csv
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, with_overrides
from .errors import ConfigurationError
from .runners import run


def _metric_key(cfg: ExperimentConfig) -> str:
    return "final_psnr_global" if cfg.task == "restoration" else "final_dice_global"


def _run_cell(cfg: ExperimentConfig, out_dir: Path, label: dict) -> dict:
    row = dict(label, seed=cfg.seed, status="ok", metric=float("nan"))
    try:
        result = run(cfg, out_dir)
        row["metric"] = result.summary[_metric_key(cfg)]
    except Exception as exc:  # noqa: BLE001 - sweep continues past cell failures
        row["status"] = f"error: {exc}"
        (out_dir / "error.txt").parent.mkdir(parents=True, exist_ok=True)
        (out_dir / "error.txt").write_text(traceback.format_exc())
    return row


def summarize_rows(rows: list[dict], group_key: str) -> list[dict]:
    """Mean metric over seeds per setting; error cells excluded."""
    out = []
    for value in sorted({row[group_key] for row in rows}):
        ok = [r["metric"] for r in rows
              if r[group_key] == value and r["status"] == "ok"]
        out.append({group_key: value,
                    "mean_metric": float(np.mean(ok)) if ok else float("nan"),
                    "n_ok": len(ok),
                    "n_total": sum(1 for r in rows if r[group_key] == value)})
    return out


def write_rows_csv(path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def run_mu_sweep(base_cfg: ExperimentConfig, mus: list[float], seeds: list[int],
                 out_root) -> tuple[list[dict], list[dict]]:
    if not mus or not seeds:
        raise ConfigurationError("mu list and seed list must be nonempty")
    if base_cfg.method != "rosfl":
        raise ConfigurationError("the correction sweep applies to the rosfl method")
    out_root = Path(out_root)
    rows = []
    for mu in mus:
        for seed in seeds:
            cfg = with_overrides(base_cfg, seed=seed, dwcs_enabled=True,
                                 dwcs=replace(base_cfg.dwcs, mu=mu))
            cell_dir = out_root / f"mu_{mu:g}_seed_{seed}"
            rows.append(_run_cell(cfg, cell_dir, {"mu": mu}))
    summary = summarize_rows(rows, "mu")
    write_rows_csv(out_root / "sweep_mu.csv", rows)
    write_rows_csv(out_root / "sweep_mu_summary.csv", summary)
    return rows, summary


def run_round_epoch_tradeoff(base_cfg: ExperimentConfig, pairs: list[tuple[int, int]],
                             seeds: list[int], out_root) -> tuple[list[dict], list[dict]]:
    """pairs are (rounds, local_epochs) with a fixed product."""
    if not pairs or not seeds:
        raise ConfigurationError("pair list and seed list must be nonempty")
    budgets = {r * e for r, e in pairs}
    if len(budgets) != 1:
        raise ConfigurationError(f"rounds*epochs must be constant, got {sorted(budgets)}")
    out_root = Path(out_root)
    rows = []
    for rounds, epochs in pairs:
        for seed in seeds:
            topo = replace(base_cfg.topology, rounds=rounds, local_epochs=epochs)
            cfg = with_overrides(base_cfg, seed=seed, topology=topo)
            cell_dir = out_root / f"r{rounds}_e{epochs}_seed_{seed}"
            rows.append(_run_cell(cfg, cell_dir, {"re": f"{rounds}/{epochs}",
                                                  "rounds": rounds, "epochs": epochs}))
    summary = summarize_rows(rows, "re")
    write_rows_csv(out_root / "sweep_re.csv", rows)
    write_rows_csv(out_root / "sweep_re_summary.csv", summary)
    return rows, summary
