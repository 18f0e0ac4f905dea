"""Config-driven experiments: seeds x variants x selectors, with aggregation.

For each seed the harness draws one few-shot split, trains one masked-token
model and one warm-up teacher, and shares them across every requested row.
Rows are either ablation variants or selector policies of the full method.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import synth
from .corpus import Dataset, TaskKind, few_shot_split, load_jsonl
from .metrics import evaluate
from .selftrain import SELECTORS, STConfig, prepare_eval, run, train_mlm_for, warmup_teacher

log = logging.getLogger(__name__)

WORKERS_ENV = "STTOD_WORKERS"

VARIANTS = ("st", "no_smooth_saliency", "no_augmentation", "no_pseudo_labeling", "baseline")

SYNTH_KINDS = {
    "intent": synth.synth_generate,
    "dialog_act": synth.synth_dialog_acts,
    "dst": synth.synth_state_tracking,
    "response_selection": synth.synth_response_selection,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str | None = None
    # keyword arguments for the synthetic generator, used when no path is given
    synthetic: Mapping | None = None
    task: str | None = None
    labeled_fraction: float = 0.01
    seeds: tuple[int, ...] = (0,)
    st: STConfig = field(default_factory=STConfig)
    variants: tuple[str, ...] = ("st",)
    selectors: tuple[str, ...] = ("topk",)
    output_dir: str = "runs"

    def __post_init__(self):
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigError("labeled_fraction must lie in (0, 1]")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if (self.dataset is None) == (self.synthetic is None):
            raise ConfigError("give exactly one of dataset and synthetic")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}; choose from {VARIANTS}")
        bad = [s for s in self.selectors if s not in SELECTORS]
        if bad:
            raise ConfigError(f"unknown selectors {bad}; choose from {SELECTORS}")
        if self.task is not None and self.task not in SYNTH_KINDS:
            raise ConfigError(f"unknown task {self.task!r}")

    @classmethod
    def from_dict(cls, obj: Mapping, base_dir: Path | None = None) -> "ExperimentConfig":
        obj = dict(obj)
        unknown = set(obj) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            st = STConfig.from_dict(obj.pop("st", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad st section: {exc}") from None
        if obj.get("dataset") is not None and base_dir is not None:
            obj["dataset"] = str((base_dir / obj["dataset"]).resolve())
        for key in ("seeds", "variants", "selectors"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(st=st, **obj)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), path.parent)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["synthetic"] = dict(self.synthetic) if self.synthetic is not None else None
        return out


def load_dataset(config: ExperimentConfig) -> Dataset:
    if config.dataset is not None:
        ds = load_jsonl(config.dataset)
        if config.task is not None and ds.task_kind is not TaskKind(config.task):
            raise ConfigError(f"dataset holds {ds.task_kind.value} data, config says {config.task}")
        return ds
    return SYNTH_KINDS[config.task or "intent"](**dict(config.synthetic))


def rows(config: ExperimentConfig) -> list[tuple[str, str, str]]:
    """``(row name, variant, selector)``; the full method gets one row per selector."""
    out = []
    for v in config.variants:
        if v == "st":
            out.extend((("st" if s == "topk" else f"st:{s}"), v, s) for s in config.selectors)
        else:
            out.append((v, v, "topk"))
    return out


def variant_config(st: STConfig, variant: str, selector: str, seed: int) -> STConfig:
    cfg = replace(st, seed=seed, selector=selector)
    if variant == "no_smooth_saliency":
        cfg = replace(cfg, gradaug=replace(cfg.gradaug, saliency="vanilla"))
    elif variant == "no_augmentation":
        cfg = replace(cfg, augment=False)
    elif variant == "no_pseudo_labeling":
        cfg = replace(cfg, pseudo_label=False)
    return cfg


def run_seed(config: ExperimentConfig, seed: int, dataset: Dataset | None = None) -> tuple[dict, dict]:
    """All rows for one seed. Returns ``(report, timing)``; failures are recorded, not raised."""
    t0 = time.perf_counter()
    report: dict = {"seed": seed, "rows": {}}
    timing: dict = {"seed": seed, "rows": {}}
    try:
        if dataset is None:
            dataset = load_dataset(config)
        split = few_shot_split(dataset, config.labeled_fraction, seed)
        base = replace(config.st, seed=seed)
        validation = prepare_eval(dataset, dataset.validation, base)
        mlm = None
        if any(v in ("st", "no_smooth_saliency", "no_pseudo_labeling") for v in config.variants):
            mlm = train_mlm_for(dataset, list(split.labeled) + list(split.unlabeled), base)
        warm = warmup_teacher(dataset, split.labeled, base, validation)
    except Exception as exc:  # noqa: BLE001 - recorded per seed
        log.exception("seed %d failed during setup", seed)
        report["status"] = f"failed: {type(exc).__name__}: {exc}"
        return report, timing
    report.update(status="ok", task=dataset.task_kind.value, labeled=len(split.labeled),
                  unlabeled=len(split.unlabeled))
    timing["setup_s"] = time.perf_counter() - t0

    test = prepare_eval(dataset, dataset.test, base)
    for name, variant, selector in rows(config):
        t_row = time.perf_counter()
        try:
            if variant == "baseline":
                model, info = warm
                entry = {"status": "ok", "warmup": info,
                         "test": evaluate(model, test, out_of_scope=dataset.ontology.oos_index) if test else None}
            else:
                cfg = variant_config(config.st, variant, selector, seed)
                result = run(dataset, split, cfg, mlm=mlm, warmup=warm, hidden=split.hidden)
                entry = {"status": "ok", **result.report}
                timing["rows"][f"{name}/iterations_s"] = result.timing["iterations_s"]
        except Exception as exc:  # noqa: BLE001 - a failed row must not abort its siblings
            log.exception("seed %d row %s failed", seed, name)
            entry = {"status": f"failed: {type(exc).__name__}: {exc}"}
        report["rows"][name] = entry
        timing["rows"][name] = time.perf_counter() - t_row
    timing["total_s"] = time.perf_counter() - t0
    return report, timing


def _first_precision(entry: dict):
    its = entry.get("iterations") or []
    return its[0].get("pseudo_label_precision") if its else None


def aggregate(config: ExperimentConfig, reports: Sequence[dict]) -> dict:
    """Mean and (for two or more seeds) sample standard deviation per row and metric."""
    out: dict = {"config": config.to_dict(), "seeds": [r["seed"] for r in reports], "rows": {}}
    for name, _, _ in rows(config):
        per_metric: dict[str, list[float]] = {}
        failed = []
        for r in reports:
            entry = r.get("rows", {}).get(name)
            if entry is None or entry.get("status") != "ok" or not entry.get("test"):
                failed.append(r["seed"])
                continue
            for metric, value in entry["test"].items():
                if value is not None:
                    per_metric.setdefault(metric, []).append(value)
            if "warmup_test" in entry:
                for metric, value in entry["warmup_test"].items():
                    if value is not None:
                        per_metric.setdefault(f"warmup_{metric}", []).append(value)
            p = _first_precision(entry)
            if p is not None:
                per_metric.setdefault("first_iteration_precision", []).append(p)
        stats = {}
        for metric, values in sorted(per_metric.items()):
            s = {"mean": float(np.mean(values)), "n": len(values), "values": values}
            if len(values) >= 2:
                s["std"] = float(np.std(values, ddof=1))
            stats[metric] = s
        out["rows"][name] = {"metrics": stats, "failed_seeds": failed}
    return out


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_csv(path: Path, agg: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "metric", "mean", "std", "n"])
        for name, row in agg["rows"].items():
            for metric, s in row["metrics"].items():
                w.writerow([name, metric, repr(s["mean"]), repr(s["std"]) if "std" in s else "", s["n"]])


def _worker(args):
    config, seed = args
    return run_seed(config, seed)


def run_experiment(config: ExperimentConfig, output_dir=None, workers: int | None = None) -> dict:
    """Run every seed, write per-seed reports plus aggregate JSON/CSV, and return the aggregate.

    Wall-clock numbers go to ``timing.json`` so the other files are
    reproducible byte for byte.
    """
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    jobs = [(config, s) for s in config.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_worker, jobs))
    else:
        dataset = None
        try:
            dataset = load_dataset(config)
        except Exception:  # noqa: BLE001 - each seed records the failure itself
            pass
        results = [run_seed(config, s, dataset) for s in config.seeds]

    reports = [r for r, _ in results]
    for r in reports:
        _write_json(out / f"seed_{r['seed']}.json", r)
    agg = aggregate(config, reports)
    agg["completed"] = all_completed(reports)
    _write_json(out / "aggregate.json", agg)
    write_csv(out / "results.csv", agg)
    _write_json(out / "timing.json", {"written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                                      "seeds": [t for _, t in results]})
    return agg


def all_completed(reports: Sequence[dict]) -> bool:
    return all(r.get("status") == "ok" and all(e.get("status") == "ok" for e in r["rows"].values())
               for r in reports)
