"""Command-line harness: run one experiment and write its reports.

Outputs in ``--out``:

``metrics.csv``   one row per epoch: loss, accuracies, per-worker max/min
                  edge work, NN vertex work and received scalars, plus the
                  measured vs predicted communication volume.
``ledger.json``   every collective record and the per-epoch cost check.
``trace.jsonl``   chunk scheduler stage events (decoupled-tp only).

Wall-clock times are kept out of ``metrics.csv`` so identical configs give
identical files.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ExperimentConfig, load_config
from .costs import AnalyticCost, compare_measured_vs_predicted, predict_costs
from .decoupled import attention_structure
from .engines import Dataset, EngineConfig, EngineKind, RunResult, train
from .errors import TpgnnError
from .scheduler import write_trace

METRIC_COLUMNS = [
    "epoch", "loss", "train_acc", "val_acc", "test_acc",
    "edge_work_max", "edge_work_min", "vertex_work_max", "vertex_work_min",
    "comm_recv_max", "comm_recv_min", "collective_rounds",
    "measured_comm", "predicted_comm", "comm_delta",
]


def analytic_costs(engine: EngineConfig, dataset: Dataset, result: RunResult) -> AnalyticCost | None:
    """Closed-form prediction matching the engine that produced ``result``."""
    model = engine.model
    if engine.engine is EngineKind.SINGLE:
        return None
    if engine.engine is EngineKind.DECOUPLED_TP and model.prop_rounds == 0:
        return None
    structure = attention_structure(dataset.graph) if model.is_gat else result.coeffs.structure
    dims = model.layer_dims
    if engine.engine is EngineKind.DECOUPLED_TP:
        return predict_costs(structure, result.ownership, engine.workers, dims[-1],
                             model.prop_rounds, "decoupled-tp")
    return predict_costs(structure, result.ownership, engine.workers, dims[:-1], len(dims) - 1,
                         engine.engine.value)


def run_experiment(config: ExperimentConfig) -> dict:
    """Train as configured and write the three report files.

    Returns a summary with the output paths, the run result and the cost
    comparison of every epoch.
    """
    dataset = config.load_dataset()
    engine = config.engine_config(dataset)
    result = train(engine, dataset)
    analytic = analytic_costs(engine, dataset, result)

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    checks = []
    rows = []
    for report in result:
        row = dict(
            epoch=report.epoch, loss=report.loss, train_acc=report.train_acc,
            val_acc=report.val_acc, test_acc=report.test_acc,
            edge_work_max=max(report.edge_work), edge_work_min=min(report.edge_work),
            vertex_work_max=max(report.vertex_work), vertex_work_min=min(report.vertex_work),
            comm_recv_max=max(report.comm_received), comm_recv_min=min(report.comm_received),
            collective_rounds=0, measured_comm=0, predicted_comm=0, comm_delta=0,
        )
        if analytic is not None:
            check = compare_measured_vs_predicted(result.ledger, analytic, tag=str(report.epoch),
                                                  edge_work=report.edge_work,
                                                  vertex_work=report.vertex_work)
            checks.append(check)
            row.update(collective_rounds=result.ledger.num_rounds(analytic.kinds, str(report.epoch)),
                       measured_comm=check.measured_total, predicted_comm=check.predicted_total,
                       comm_delta=check.delta)
        rows.append(row)

    metrics_path = out / "metrics.csv"
    with metrics_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

    ledger_path = out / "ledger.json"
    payload = result.ledger.to_dict()
    payload["analytic"] = asdict(analytic) if analytic is not None else None
    payload["checks"] = [
        dict(epoch=i, passed=c.passed, measured=c.measured_total, predicted=c.predicted_total,
             mismatches=c.mismatches, ratios=c.ratios)
        for i, c in enumerate(checks)
    ]
    ledger_path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")

    trace_path = out / "trace.jsonl"
    write_trace(result.trace, trace_path)
    return dict(metrics=metrics_path, ledger=ledger_path, trace=trace_path, result=result,
                checks=checks)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpgnn", description="Train a GNN with one of four engines "
                                     "and report per-worker work and communication.")
    parser.add_argument("--config", metavar="PATH", help="key = value experiment file")
    parser.add_argument("--engine", choices=[k.value for k in EngineKind])
    parser.add_argument("--workers", type=int, metavar="N")
    parser.add_argument("--chunks", type=int, metavar="n")
    parser.add_argument("--epochs", type=int, metavar="E")
    parser.add_argument("--seed", type=int, metavar="S")
    parser.add_argument("--out", metavar="DIR")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = dict(engine=args.engine, workers=args.workers, chunks=args.chunks,
                     epochs=args.epochs, seed=args.seed, out=args.out)
    try:
        if args.config:
            config = load_config(args.config, overrides)
        else:
            config = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
        summary = run_experiment(config)
    except (TpgnnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result = summary["result"]
    if len(result):
        last = result[-1]
        print(f"{config.engine} x{config.workers}: {len(result)} epochs, loss {last.loss:.6f}, "
              f"train acc {last.train_acc:.3f}, val acc {last.val_acc:.3f}")
    failed = [c for c in summary["checks"] if not c.passed]
    if summary["checks"]:
        print(summary["checks"][-1].summary())
    print(f"wrote {summary['metrics']}, {summary['ledger']}, {summary['trace']}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
