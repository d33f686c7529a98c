"""Experiment pipelines: data, both training arms, evaluation, reports."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .datagen import ClientDataset, load_tabular_csv, make_synthetic, train_test_split
from .federation import TRACE_COLUMNS, TrainingTrace, local_only_baseline, run_training
from .metrics import EffectEstimates, ate_error, pehe, theorem1_check, theorem2_check
from .model import estimate_cate

log = logging.getLogger(__name__)

METHODS = ("federated", "local_only")


class StageError(RuntimeError):
    """A pipeline failure tagged with the seed and stage it happened in."""


def load_datasets(cfg: ExperimentConfig, seed: int, alpha: float | None = None) -> list[ClientDataset]:
    if cfg.mode == "synthetic":
        _, datasets = make_synthetic(cfg.synth_config(seed, alpha))
        return datasets
    return [
        load_tabular_csv(
            c.path,
            c.shared_columns,
            c.private_columns,
            c.treatment_column,
            c.outcome_column,
            client_id=k,
            y0_column=c.y0_column,
            y1_column=c.y1_column,
        )
        for k, c in enumerate(cfg.clients)
    ]


def _evaluate_arm(clients, tests: Sequence[ClientDataset]) -> dict:
    per_pehe, per_ate = {}, {}
    hats, trues = [], []
    for client, test in zip(clients, tests):
        tau_hat = estimate_cate(client.model, test.x_shared, test.x_private)
        if test.has_truth:
            est = EffectEstimates(tau_hat, test.true_cate)
            per_pehe[str(client.client_id)] = pehe(est)
            per_ate[str(client.client_id)] = ate_error(est)
            hats.append(tau_hat)
            trues.append(test.true_cate)
    pooled = EffectEstimates(np.concatenate(hats), np.concatenate(trues)) if hats else None
    return {
        "pehe_per_client": per_pehe,
        "ate_error_per_client": per_ate,
        "pooled_pehe": pehe(pooled) if pooled else None,
        "pooled_ate_error": ate_error(pooled) if pooled else None,
    }


def _convergence(trace: TrainingTrace, optimum: dict[int, float] | None = None) -> dict:
    t1, t2 = {}, {}
    for k in trace.client_ids:
        t1[str(k)] = theorem1_check(trace, k).to_dict()
        t2[str(k)] = theorem2_check(trace, k, optimum_proxy=(optimum or {}).get(k)).to_dict()

    def all_ok(reports):
        flags = [r["satisfied"] for r in reports.values()]
        return all(f is True for f in flags) if flags else None

    return {
        "theorem1": {"satisfied": all_ok(t1), "per_client": t1},
        "theorem2": {"satisfied": all_ok(t2), "per_client": t2},
    }


def run_seed(cfg: ExperimentConfig, seed: int, alpha: float | None = None) -> dict:
    """One seed of the full pipeline; returns JSON-ready results and trace rows."""
    stage = "data"
    try:
        datasets = load_datasets(cfg, seed, alpha)
        splits = [train_test_split(ds, cfg.test_fraction, seed) for ds in datasets]
        train = [s[0] for s in splits]
        test = [s[1] for s in splits]
        fcfg = cfg.federation_config(seed)

        stage = "federated training"
        _, fed_clients, fed_trace = run_training(fcfg, train)
        optimum = None
        if cfg.shadow_run:
            stage = "shadow run"
            _, _, shadow = run_training(replace(fcfg, rounds=2 * fcfg.rounds), train)
            optimum = {k: min(r.loss.total for r in shadow.client_records(k)) for k in shadow.client_ids}

        stage = "local-only training"
        loc_clients, loc_trace = local_only_baseline(fcfg, train)

        stage = "evaluation"
        result = {
            "seed": seed,
            "methods": {
                "federated": {**_evaluate_arm(fed_clients, test), **_convergence(fed_trace, optimum)},
                "local_only": _evaluate_arm(loc_clients, test),
            },
        }
        if alpha is not None:
            result["alpha"] = alpha
        return {
            "result": result,
            "traces": {"federated": fed_trace.csv_rows(), "local_only": loc_trace.csv_rows()},
        }
    except Exception as exc:
        raise StageError(f"seed {seed}, stage {stage}: {exc}") from exc


def _map(fn, args: list[tuple], jobs: int) -> list:
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


def _summary(values: list[float | None]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.array(vals)
    return float(arr.mean()), float(arr.std())


def _aggregate(results: list[dict]) -> dict:
    out = {}
    for method in METHODS:
        p_mean, p_std = _summary([r["methods"][method]["pooled_pehe"] for r in results])
        a_mean, a_std = _summary([r["methods"][method]["pooled_ate_error"] for r in results])
        out[method] = {"pehe_mean": p_mean, "pehe_std": p_std, "ate_mean": a_mean, "ate_std": a_std}
    return out


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """All seeds of one configuration. ``wall_clock_seconds`` is the only non-reproducible field."""
    start = time.perf_counter()
    outs = _map(run_seed, [(cfg, s) for s in cfg.seed_list], jobs)
    results = [o["result"] for o in outs]
    report = {
        "config": cfg.to_dict(),
        "seeds": results,
        "aggregate": _aggregate(results),
        "wall_clock_seconds": time.perf_counter() - start,
    }
    report["_traces"] = {s: o["traces"] for s, o in zip(cfg.seed_list, outs)}
    return report


SWEEP_COLUMNS = ("alpha", "method", "pehe_mean", "pehe_std", "ate_mean", "ate_std")


def run_alpha_sweep(cfg: ExperimentConfig, alpha_grid: Sequence[float] | None = None, jobs: int = 1) -> dict:
    grid = tuple(cfg.alpha_grid if alpha_grid is None else alpha_grid)
    for a in grid:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha grid value {a} outside [0, 1]")
    start = time.perf_counter()
    tasks = [(cfg, s, a) for a in grid for s in cfg.seed_list]
    outs = _map(run_seed, tasks, jobs)
    rows, points = [], []
    n = len(cfg.seed_list)
    for i, a in enumerate(grid):
        results = [o["result"] for o in outs[i * n : (i + 1) * n]]
        agg = _aggregate(results)
        points.append({"alpha": a, "seeds": results, "aggregate": agg})
        for method in METHODS:
            rows.append({"alpha": a, "method": method, **agg[method]})
    return {
        "config": cfg.to_dict(),
        "sweep": points,
        "sweep_rows": rows,
        "wall_clock_seconds": time.perf_counter() - start,
    }


def _write_csv(path: Path, columns: Sequence[str], rows: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in columns})


METRICS_COLUMNS = ("seed", "method", "client", "pehe", "ate_error")


def _metrics_rows(results: list[dict]) -> list[dict]:
    rows = []
    for r in results:
        for method in METHODS:
            m = r["methods"][method]
            for k in m["pehe_per_client"]:
                rows.append(
                    {
                        "seed": r["seed"],
                        "method": method,
                        "client": k,
                        "pehe": m["pehe_per_client"][k],
                        "ate_error": m["ate_error_per_client"][k],
                    }
                )
            rows.append(
                {
                    "seed": r["seed"],
                    "method": method,
                    "client": "pooled",
                    "pehe": m["pooled_pehe"],
                    "ate_error": m["pooled_ate_error"],
                }
            )
    return rows


def dumps_report(report: dict) -> str:
    body = {k: v for k, v in report.items() if not k.startswith("_") and k != "wall_clock_seconds"}
    return json.dumps(body, indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit_report(report: dict, directory: str | Path) -> list[Path]:
    """Write ``report.json`` plus the CSV companions; wall-clock goes to ``timing.json``.

    Keeping the timing out of ``report.json`` makes that file byte-identical
    across reruns of the same config.
    """
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        path = out / "report.json"
        path.write_text(dumps_report(report), encoding="utf-8")
        written.append(path)
        path = out / "timing.json"
        path.write_text(json.dumps({"wall_clock_seconds": report.get("wall_clock_seconds")}) + "\n", encoding="utf-8")
        written.append(path)
        if "seeds" in report:
            results = report["seeds"]
            path = out / "metrics.csv"
            _write_csv(path, METRICS_COLUMNS, _metrics_rows(results))
            written.append(path)
            traces = report.get("_traces", {})
            if traces:
                first = sorted(traces)[0]
                path = out / "trace.csv"
                _write_csv(path, TRACE_COLUMNS, traces[first]["federated"])
                written.append(path)
                tdir = out / "traces"
                tdir.mkdir(exist_ok=True)
                for seed in sorted(traces):
                    for method in METHODS:
                        path = tdir / f"seed{seed}_{method}.csv"
                        _write_csv(path, TRACE_COLUMNS, traces[seed][method])
                        written.append(path)
        if "sweep_rows" in report:
            path = out / "sweep.csv"
            _write_csv(path, SWEEP_COLUMNS, report["sweep_rows"])
            written.append(path)
        return written
    except OSError as exc:
        raise OSError(f"failed writing report to {out}: {exc}") from exc
