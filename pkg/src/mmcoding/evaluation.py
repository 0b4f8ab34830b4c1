"""Multi-label metrics and the repeated random-split benchmark runner."""
from __future__ import annotations

import csv
import logging
import math
import os
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, concat_datasets, load_dataset, random_split, select_top_labels
from .errors import ArgumentError, DimensionError
from .pipelines import MethodSpec, fit, predict

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

MEASURES = ("subset_accuracy", "macro_f1", "micro_f1")
MACRO_F1_CONVENTION = ("macro-F1: a label with no true and no predicted positives scores 1; "
                       "one with predicted but no true positives scores 0")

_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# metrics


def _pair(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} must be equal m x q")
    return pred.astype(bool), truth.astype(bool)


def _confusion(pred, truth, axis=None):
    tp = np.sum(pred & truth, axis=axis)
    fp = np.sum(pred & ~truth, axis=axis)
    fn = np.sum(~pred & truth, axis=axis)
    return tp, fp, fn


def subset_accuracy(pred, truth) -> float:
    """Fraction of rows whose whole label vector is predicted exactly."""
    pred, truth = _pair(pred, truth)
    if pred.shape[0] == 0:
        raise DimensionError("no rows to evaluate")
    return float(np.mean(np.all(pred == truth, axis=1)))


def macro_f1(pred, truth) -> float:
    """Per-label F1 averaged over labels; an empty-vs-empty label scores 1."""
    pred, truth = _pair(pred, truth)
    tp, fp, fn = _confusion(pred, truth, axis=0)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom == 0, 1.0, 2 * tp / np.maximum(denom, 1))
    return float(np.mean(f1))


def micro_f1(pred, truth) -> float:
    """F1 of true/false positive and negative counts pooled over every cell."""
    pred, truth = _pair(pred, truth)
    tp, fp, fn = _confusion(pred, truth)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else float(2 * tp / denom)


@dataclass(frozen=True)
class MetricsReport:
    subset_accuracy: float
    macro_f1: float
    micro_f1: float

    def __post_init__(self):
        for name in MEASURES:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ArgumentError(f"{name}={v} outside [0, 1]")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in MEASURES}


def evaluate(pred, truth) -> MetricsReport:
    return MetricsReport(subset_accuracy(pred, truth), macro_f1(pred, truth), micro_f1(pred, truth))


# ---------------------------------------------------------------------------
# seeds


def splitmix64(x: int) -> int:
    """One step of the SplitMix64 output function."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, run: int) -> int:
    """Seed for run ``run``: the master seed and run index pushed through SplitMix64.

    The result is reduced to 63 bits so it fits numpy's and the CV helpers' seed types.
    """
    return splitmix64(splitmix64(master_seed & _MASK64) ^ (run & _MASK64)) >> 1


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    path: object                   # one file, or several stacked row-wise
    format: str = "arff"
    labels: object = None          # count, name list or MULAN XML path
    top_labels: Optional[int] = None

    def load(self) -> Dataset:
        if isinstance(self.path, (list, tuple)):
            d = concat_datasets([load_dataset(p, self.format, self.labels) for p in self.path])
        else:
            d = load_dataset(self.path, self.format, self.labels)
        if self.top_labels is not None:
            # selected once on the full file, before any split
            d = select_top_labels(d, self.top_labels)
        return d


@dataclass(frozen=True)
class MethodConfig:
    name: str
    spec: MethodSpec


@dataclass(frozen=True)
class BenchmarkConfig:
    datasets: tuple
    methods: tuple
    runs: int = 30
    n_train: int = 300
    master_seed: int = 0
    output_dir: Optional[str] = None
    threads: int = 1

    def __post_init__(self):
        if self.runs < 1:
            raise ArgumentError("runs must be >= 1")
        if self.threads < 1:
            raise ArgumentError("threads must be >= 1")
        if not self.datasets or not self.methods:
            raise ArgumentError("config needs at least one dataset and one method")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ArgumentError(f"duplicate method names in {names}")


def _resolve(base: Path, value):
    if isinstance(value, str) and not os.path.isabs(value):
        return str(base / value)
    return value


def config_from_dict(raw: dict, base_dir=".") -> BenchmarkConfig:
    """Build a config from parsed TOML; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    datasets = []
    for entry in raw.get("datasets", []):
        entry = dict(entry)
        path = entry["path"]
        entry["path"] = (tuple(_resolve(base, p) for p in path) if isinstance(path, list)
                         else _resolve(base, path))
        labels = entry.get("labels")
        if isinstance(labels, str):
            entry["labels"] = _resolve(base, labels)
        datasets.append(DatasetConfig(**entry))
    methods = []
    for entry in raw.get("methods", []):
        entry = dict(entry)
        name = entry.pop("name", entry.get("kind"))
        methods.append(MethodConfig(name, MethodSpec.from_dict(entry)))
    keys = ("runs", "n_train", "master_seed", "output_dir", "threads")
    extra = {k: raw[k] for k in keys if k in raw}
    if isinstance(extra.get("output_dir"), str):
        extra["output_dir"] = _resolve(base, extra["output_dir"])
    unknown = set(raw) - set(keys) - {"datasets", "methods"}
    if unknown:
        raise ArgumentError(f"unknown config keys: {sorted(unknown)}")
    return BenchmarkConfig(tuple(datasets), tuple(methods), **extra)


def load_config(path) -> BenchmarkConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return config_from_dict(raw, Path(path).resolve().parent)


# ---------------------------------------------------------------------------
# runner


@dataclass(frozen=True)
class CellFailure:
    dataset: str
    method: str
    run: int
    error: str


@dataclass
class BenchmarkReport:
    """Per-run raw values and their summaries.

    ``raw`` rows are ``(run, method, dataset, measure, value)``.
    """
    runs: int
    n_train: int
    master_seed: int
    datasets: tuple
    methods: tuple
    raw: list = field(default_factory=list)
    base_models: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    seconds: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def values(self, dataset: str, method: str, measure: str) -> np.ndarray:
        rows = sorted((r, v) for r, m, d, k, v in self.raw
                      if d == dataset and m == method and k == measure)
        return np.array([v for _, v in rows], dtype=float)

    def mean(self, dataset, method, measure) -> float:
        v = self.values(dataset, method, measure)
        return float(np.mean(v)) if v.size else math.nan

    def stderr(self, dataset, method, measure) -> float:
        v = self.values(dataset, method, measure)
        if v.size < 2:
            return math.nan
        return float(np.std(v, ddof=1) / math.sqrt(v.size))

    def summary(self) -> list[dict]:
        out = []
        for dname in self.datasets:
            for mname in self.methods:
                for measure in MEASURES:
                    v = self.values(dname, mname, measure)
                    out.append(dict(dataset=dname, method=mname, measure=measure,
                                    mean=self.mean(dname, mname, measure),
                                    stderr=self.stderr(dname, mname, measure),
                                    count=int(v.size),
                                    base_models=self.base_models.get((dname, mname))))
        return out


def _run_cell(method: MethodConfig, train: Dataset, test: Dataset, seed: int):
    t0 = time.perf_counter()
    model = fit(replace(method.spec, seed=seed), train)
    pred = predict(model, test.features)
    return evaluate(pred, test.labels), model.n_base_models, time.perf_counter() - t0


def run_benchmark(config: BenchmarkConfig, datasets: dict = None) -> BenchmarkReport:
    """Run every method on ``config.runs`` shared random splits of every dataset.

    ``datasets`` may map dataset names to already loaded :class:`Dataset`
    objects, bypassing the paths in the config.
    """
    loaded = {}
    for dc in config.datasets:
        loaded[dc.name] = datasets[dc.name] if datasets and dc.name in datasets else dc.load()
    report = BenchmarkReport(config.runs, config.n_train, config.master_seed,
                             tuple(dc.name for dc in config.datasets),
                             tuple(mc.name for mc in config.methods))
    report.notes.append(MACRO_F1_CONVENTION)
    for dc in config.datasets:
        if dc.top_labels is not None:
            report.notes.append(f"{dc.name}: kept the {dc.top_labels} most frequent labels, "
                                "counted on the full dataset before splitting")
        report.notes.append(f"{dc.name}: n={loaded[dc.name].n}, p={loaded[dc.name].p}, "
                            f"q={loaded[dc.name].q}")

    tasks = []
    for dc in config.datasets:
        for run in range(1, config.runs + 1):
            seed = derive_seed(config.master_seed, run)
            train, test = random_split(loaded[dc.name], config.n_train, seed)
            for mc in config.methods:
                tasks.append((dc.name, mc, run, seed, train, test))

    def work(task):
        dname, mc, run, seed, train, test = task
        try:
            return task, _run_cell(mc, train, test, seed), None
        except Exception as exc:  # recorded, excluded from aggregation
            log.error("cell %s/%s/run %d failed: %s", dname, mc.name, run, exc)
            return task, None, "".join(traceback.format_exception_only(type(exc), exc)).strip()

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(t) for t in tasks]

    # tasks are in a fixed order, so the reduction is deterministic
    for (dname, mc, run, _, _, _), res, err in results:
        if err is not None:
            report.failures.append(CellFailure(dname, mc.name, run, err))
            continue
        metrics, n_base, secs = res
        for measure, value in metrics.as_dict().items():
            report.raw.append((run, mc.name, dname, measure, value))
        report.base_models.setdefault((dname, mc.name), n_base)
        report.seconds[(dname, mc.name)] = report.seconds.get((dname, mc.name), 0.0) + secs
    return report


# ---------------------------------------------------------------------------
# output


def write_raw_csv(report: BenchmarkReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "method", "dataset", "measure", "value"])
        for row in sorted(report.raw, key=lambda r: (r[2], r[1], r[3], r[0])):
            w.writerow([row[0], row[1], row[2], row[3], repr(float(row[4]))])


def _fmt(x: float) -> str:
    return "n/a" if math.isnan(x) else f"{x:.4f}"


def render_markdown(report: BenchmarkReport) -> str:
    """One table per (dataset, measure): mean, standard error and base-model count per method."""
    lines = [f"# Benchmark: {report.runs} runs, n_train={report.n_train}, "
             f"master seed {report.master_seed}", ""]
    if report.failures:
        lines += [f"**WARNING: {len(report.failures)} failed cell(s), excluded from the means.**", ""]
        for f in report.failures:
            lines.append(f"- FAILED {f.dataset} / {f.method} / run {f.run}: {f.error}")
        lines.append("")
    lines += [f"- {note}" for note in report.notes] + [""]
    for dname in report.datasets:
        for measure in MEASURES:
            lines += [f"## {dname}: {measure.replace('_', ' ')}", "",
                      "| Method | Mean | Std. error | Runs | #Base models |",
                      "|---|---|---|---|---|"]
            for mname in report.methods:
                v = report.values(dname, mname, measure)
                nb = report.base_models.get((dname, mname))
                lines.append(f"| {mname} | {_fmt(report.mean(dname, mname, measure))} | "
                             f"{_fmt(report.stderr(dname, mname, measure))} | {v.size} | "
                             f"{'' if nb is None else nb} |")
            lines.append("")
    return "\n".join(lines)


def write_outputs(report: BenchmarkReport, output_dir) -> tuple[Path, Path]:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw_path, md_path = out / "raw.csv", out / "summary.md"
    write_raw_csv(report, raw_path)
    md_path.write_text(render_markdown(report), encoding="utf-8")
    return raw_path, md_path
