"""Merge finished runs into comparison tables and plot-data CSVs."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .evaluation import aggregate_report
from .pipeline import write_json

METHOD_ORDER = ("fedavg", "fedprox", "fedlambda", "dp-cgan", "dp-cvae", "cgan", "cvae")
TABLE_METRICS = (("acc", "ACC", 100.0, 2), ("bacc", "BACC", 100.0, 2), ("wasserstein", "W", 1.0, 4))


class ReportError(ValueError):
    pass


def find_runs(paths) -> list[Path]:
    """Run directories holding a metrics.json; a directory without one is searched one level down."""
    runs = []
    for p in map(Path, paths):
        if (p / "metrics.json").is_file():
            runs.append(p)
        elif p.is_dir():
            runs.extend(sorted(q for q in p.iterdir() if (q / "metrics.json").is_file()))
    if not runs:
        raise ReportError("no completed runs (no metrics.json found)")
    return runs


def _dataset_name(m: dict) -> str:
    return m["dataset"]["extractor_id"]


def _pool(runs_metrics: list[dict], key: str) -> dict:
    """Per-seed per-client values pooled over runs; the same seed twice is an error."""
    pooled = {}
    for m in runs_metrics:
        for seed, clients in m["per_seed"].items():
            if int(seed) in pooled:
                raise ReportError(f"seed {seed} appears in more than one run of {m['method']}")
            if clients and all(c.get(key) is not None for c in clients):
                pooled[int(seed)] = [c[key] for c in clients]
    return pooled


def collect(paths) -> list[dict]:
    metrics = [json.loads((r / "metrics.json").read_text(encoding="utf-8")) for r in find_runs(paths)]
    ids = {}
    for m in metrics:
        name, digest = _dataset_name(m), m["dataset"]["id"]
        if ids.setdefault(name, digest) != digest:
            raise ReportError(f"runs disagree on the contents of dataset {name!r}: inconsistent dataset identifiers")
    return metrics


def _row_key(m: dict):
    method = m["method"]
    rank = METHOD_ORDER.index(method) if method in METHOD_ORDER else len(METHOD_ORDER)
    return rank, method, m["clients"]


def build_table(metrics: list[dict]) -> dict:
    """methods x (dataset, metric) with mean/std over seeds, rows in the fixed method order."""
    datasets = sorted({_dataset_name(m) for m in metrics})
    groups = {}
    for m in metrics:
        groups.setdefault(_row_key(m), {}).setdefault(_dataset_name(m), []).append(m)
    multi_m = len({k[2] for k in groups}) > 1
    rows = []
    for key in sorted(groups):
        _, method, clients = key
        label = f"{method} (M={clients})" if multi_m else method
        cells = {}
        for name in datasets:
            for metric, title, _, _ in TABLE_METRICS:
                runs = groups[key].get(name, [])
                pooled = _pool(runs, metric) if runs else {}
                if pooled:
                    rep = aggregate_report(pooled)
                    cells[f"{name}:{title}"] = {"mean": rep.mean, "std": rep.std, "seeds": rep.seeds}
        rows.append({"method": method, "clients": clients, "label": label, "cells": cells})
    columns = [f"{name}:{title}" for name in datasets for _, title, _, _ in TABLE_METRICS
               if any(f"{name}:{title}" in r["cells"] for r in rows)]
    return {"columns": columns, "rows": rows}


def _fmt(cell, title) -> str:
    if cell is None:
        return ""
    scale, digits = next((s, d) for _, t, s, d in TABLE_METRICS if t == title)
    return f"{cell['mean'] * scale:.{digits}f} ± {cell['std'] * scale:.{digits}f}"


def table_csv(table: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + table["columns"])
    for row in table["rows"]:
        w.writerow([row["label"]] + [_fmt(row["cells"].get(c), c.split(":")[-1]) for c in table["columns"]])
    return buf.getvalue()


def fidelity_points(metrics: list[dict]) -> str:
    """Parameter count against W for the generative runs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "dataset", "clients", "param_count", "w_mean", "w_std"])
    groups = {}
    for m in metrics:
        if any(c.get("wasserstein") is not None for cl in m["per_seed"].values() for c in cl):
            groups.setdefault((_row_key(m), _dataset_name(m), m["param_count"]), []).append(m)
    for (key, name, count), runs in sorted(groups.items()):
        rep = aggregate_report(_pool(runs, "wasserstein"))
        w.writerow([key[1], name, key[2], count, repr(rep.mean), repr(rep.std)])
    return buf.getvalue()


def client_count_points(metrics: list[dict]) -> str:
    """Client count (and backbone) against balanced accuracy."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "extractor_id", "clients", "bacc_mean", "bacc_std"])
    groups = {}
    for m in metrics:
        groups.setdefault((_row_key(m), _dataset_name(m)), []).append(m)
    for (key, name), runs in sorted(groups.items()):
        rep = aggregate_report(_pool(runs, "bacc"))
        w.writerow([key[1], name, key[2], repr(rep.mean), repr(rep.std)])
    return buf.getvalue()


def report_tables(paths, out_dir) -> dict:
    """Write table.json, table.csv, fidelity_vs_params.csv and bacc_vs_clients.csv into ``out_dir``."""
    metrics = collect(paths)
    table = build_table(metrics)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "table.json", table)
    (out / "table.csv").write_text(table_csv(table), encoding="utf-8")
    (out / "fidelity_vs_params.csv").write_text(fidelity_points(metrics), encoding="utf-8")
    (out / "bacc_vs_clients.csv").write_text(client_count_points(metrics), encoding="utf-8")
    return table
