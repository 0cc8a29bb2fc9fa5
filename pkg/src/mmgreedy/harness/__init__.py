"""Persistence, single runs, sweeps, reports and the command line."""

from .io import FormatError, dataset_id, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .report import collect_records, histogram, report
from .runner import RunRecord, run_single
from .sweep import SweepSpec, aggregate, l1_study, l1_summary, run_sweep

__all__ = [
    "FormatError", "RunRecord", "SweepSpec", "aggregate", "collect_records", "dataset_id", "histogram",
    "l1_study", "l1_summary", "load_checkpoint", "load_dataset", "report", "run_single", "run_sweep",
    "save_checkpoint", "save_dataset",
]
