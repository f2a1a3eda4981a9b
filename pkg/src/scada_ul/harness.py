"""Config-driven experiment runner.

A JSON config describes the synthetic domains, model, adaptation loss,
method and seeds; ``run_experiment`` executes every seed, writes one report
JSON per seed, a fixed-schema per-seed CSV, an aggregate CSV with mean and
std columns, and (for traced runs) loss-trace figures next to the CSVs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plots
from .data import (
    AffineShift,
    DomainDataset,
    SplitSpec,
    make_synthetic_domains,
    sample_ood_classes,
    split_retain_forget,
    train_test_split,
)
from .metrics import CSV_COLUMNS, MetricsReport, build_report
from .models import ClassifierModel, LabelSpace, init_model, save_checkpoint, train_source
from .sfda import make_sfda_loss
from .unlearn import TraceWriter, UnlearnConfig, run_scada_ul, run_sfda_only
from .variants import ForgetRequestSequence, run_c_scada, run_uc_scada
from .verify import EvalBundle

log = logging.getLogger(__name__)

METHODS = ("original", "retrain", "finetune", "scada", "uc_scada", "c_scada")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 6
    dim: int = 2
    samples_per_class: int = 150
    train_fraction: float = 0.8
    cluster_std: float = 0.6
    min_separation: float = 4.0
    rotation_deg: float = 30.0
    translation: tuple[float, ...] = (1.0, -0.5)
    scale: float = 1.0
    shift_noise: float = 0.1
    num_ood_classes: int = 3
    ood_min_sigma: float = 5.0

    def shift(self) -> AffineShift:
        return AffineShift.rotation(
            self.rotation_deg,
            dim=self.dim,
            translation=self.translation,
            scale=self.scale,
            noise_std=self.shift_noise,
        )


@dataclass(frozen=True)
class ModelSpec:
    arch: tuple[int, ...] = (2, 64, 64)
    source_epochs: int = 10
    label_smoothing: float = 0.1


@dataclass(frozen=True)
class SfdaSpec:
    name: str = "shot_like"
    beta: float = 1.0
    pseudo_weight: float = 0.3


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs; hash is stable under key reordering."""

    method: str = "scada"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    sfda: SfdaSpec = field(default_factory=SfdaSpec)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    forget_classes: tuple[int, ...] = (1,)
    num_forget: int | None = None  # uc_scada: forget-class count when identities unknown
    rank_factor: int = 3
    requests: tuple[tuple[int, ...], ...] = ()
    continual_subset_fraction: float = 0.25
    continual_epochs: int | None = None
    finetune_subset_fraction: float = 0.5
    ece_bins: int = 15
    mia_seed: int = 0
    out_dir: str = "results"
    seeds: tuple[int, ...] = (0, 1, 2)
    trace: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "c_scada" and not self.requests:
            raise ConfigError("c_scada requires a non-empty request sequence")
        if self.method == "uc_scada" and not self.num_forget:
            raise ConfigError("uc_scada requires num_forget")
        if self.method in ("scada", "retrain", "original", "finetune") and not self.forget_classes:
            raise ConfigError("forget_classes must be non-empty")
        if not self.seeds:
            raise ConfigError("at least one seed required")

    @property
    def all_forget_classes(self) -> tuple[int, ...]:
        if self.method == "c_scada":
            return tuple(c for r in self.requests for c in r)
        return tuple(self.forget_classes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        def sub(cls, key):
            data = dict(raw.get(key, {}))
            for f in dataclasses.fields(cls):
                if f.name in data and isinstance(data[f.name], list):
                    data[f.name] = tuple(
                        tuple(v) if isinstance(v, list) else v for v in data[f.name]
                    )
            try:
                return cls(**data)
            except TypeError as exc:
                raise ConfigError(f"bad {key!r} section: {exc}") from exc
            except ValueError as exc:
                raise ConfigError(f"bad {key!r} section: {exc}") from exc

        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        top = {
            k: v
            for k, v in raw.items()
            if k not in ("dataset", "model", "sfda", "unlearn")
        }
        for key in ("forget_classes", "seeds"):
            if key in top:
                top[key] = tuple(top[key])
        if "requests" in top:
            top["requests"] = tuple(tuple(r) for r in top["requests"])
        try:
            return ExperimentConfig(
                dataset=sub(DatasetSpec, "dataset"),
                model=sub(ModelSpec, "model"),
                sfda=sub(SfdaSpec, "sfda"),
                unlearn=sub(UnlearnConfig, "unlearn"),
                **top,
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @staticmethod
    def from_json_file(path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return ExperimentConfig.from_dict(raw)


@dataclass
class SeedData:
    """All per-seed datasets: source splits, adaptation view, eval bundle."""

    source_train: DomainDataset
    source_test: DomainDataset
    source_retain_train: DomainDataset
    target_adapt: DomainDataset  # label-free, retain classes only
    bundle: EvalBundle
    label_space: LabelSpace


def build_seed_data(cfg: ExperimentConfig, seed: int) -> SeedData:
    ds = cfg.dataset
    forget = cfg.all_forget_classes
    label_space = LabelSpace(ds.num_classes, forget)
    source, target = make_synthetic_domains(
        ds.num_classes,
        ds.dim,
        ds.shift(),
        ds.samples_per_class,
        seed=seed,
        cluster_std=ds.cluster_std,
        min_separation=ds.min_separation,
    )
    spec = SplitSpec(forget, ds.train_fraction)
    source_train, source_test = train_test_split(source, ds.train_fraction, seed)
    source_retain_train, _ = split_retain_forget(source_train, spec)
    target_retain, target_forget = split_retain_forget(target, spec)
    target_retain_train, target_retain_eval = train_test_split(target_retain, ds.train_fraction, seed + 1)
    _, target_forget_eval = train_test_split(target_forget, ds.train_fraction, seed + 2)
    centers = np.stack(
        [source.inputs[source.labels == c].mean(axis=0) for c in sorted(source.class_set)]
        + [target.inputs[target.labels == c].mean(axis=0) for c in sorted(target.class_set)]
    )
    ood = sample_ood_classes(
        ds.num_ood_classes,
        ds.dim,
        seed=seed + 17,
        avoid_centers=centers,
        cluster_std=ds.cluster_std,
        min_sigma=ds.ood_min_sigma,
    )
    return SeedData(
        source_train=source_train,
        source_test=source_test,
        source_retain_train=source_retain_train,
        target_adapt=target_retain_train.strip_labels(),
        bundle=EvalBundle(
            target_retain_eval=target_retain_eval,
            target_forget_eval=target_forget_eval,
            ood_eval=ood,
            source_eval=source_test,
            target_eval=target,
        ),
        label_space=label_space,
    )


def train_source_model(cfg: ExperimentConfig, data: SeedData, seed: int) -> ClassifierModel:
    model = init_model(cfg.model.arch, cfg.dataset.num_classes, seed)
    return train_source(
        model,
        data.source_train,
        epochs=cfg.model.source_epochs,
        smoothing=cfg.model.label_smoothing,
        batch_size=cfg.unlearn.batch_size,
        seed=seed,
    )


def run_retrain_oracle(cfg: ExperimentConfig, data: SeedData, seed: int) -> ClassifierModel:
    """Gold standard: train from scratch on source retain data, then adapt.

    Uses source labels, an oracle privilege unavailable in deployment.
    """
    ucfg = dataclasses.replace(cfg.unlearn, seed=seed)
    model = init_model(cfg.model.arch, cfg.dataset.num_classes, seed)
    model = train_source(
        model,
        data.source_retain_train,
        epochs=cfg.model.source_epochs,
        smoothing=cfg.model.label_smoothing,
        batch_size=cfg.unlearn.batch_size,
        seed=seed,
    )
    sfda = make_sfda_loss(cfg.sfda.name, cfg.sfda.beta, cfg.sfda.pseudo_weight)
    return run_sfda_only(model, data.target_adapt, sfda, ucfg)


def run_finetune_baseline(
    cfg: ExperimentConfig, data: SeedData, source_model: ClassifierModel, seed: int
) -> ClassifierModel:
    """Adaptation from the source model on a data subset, no unlearning."""
    ucfg = dataclasses.replace(cfg.unlearn, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1]))
    n = max(1, int(round(cfg.finetune_subset_fraction * len(data.target_adapt))))
    idx = np.sort(rng.choice(len(data.target_adapt), size=n, replace=False))
    sfda = make_sfda_loss(cfg.sfda.name, cfg.sfda.beta, cfg.sfda.pseudo_weight)
    return run_sfda_only(source_model, data.target_adapt.subset(idx), sfda, ucfg)


@dataclass
class SeedOutcome:
    seed: int
    report: MetricsReport
    stage_reports: dict[str, MetricsReport] = field(default_factory=dict)
    predicted_forget: tuple[int, ...] | None = None
    trace_path: Path | None = None


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None) -> SeedOutcome:
    """Run cfg.method for one seed and evaluate it."""
    data = build_seed_data(cfg, seed)
    source_model = train_source_model(cfg, data, seed)
    ucfg = dataclasses.replace(cfg.unlearn, seed=seed)
    sfda = make_sfda_loss(cfg.sfda.name, cfg.sfda.beta, cfg.sfda.pseudo_weight)
    trace = None
    trace_path = None
    if cfg.trace and out_dir is not None:
        trace_path = out_dir / f"trace_seed{seed}.jsonl"
        trace = TraceWriter(trace_path)

    stage_reports: dict[str, MetricsReport] = {}
    predicted = None
    t0 = time.perf_counter()
    if cfg.method == "original":
        model = run_sfda_only(source_model, data.target_adapt, sfda, ucfg, trace=trace)
    elif cfg.method == "finetune":
        model = run_finetune_baseline(cfg, data, source_model, seed)
    elif cfg.method == "retrain":
        model = run_retrain_oracle(cfg, data, seed)
    elif cfg.method == "scada":
        model = run_scada_ul(source_model, data.target_adapt, cfg.forget_classes, sfda, ucfg, trace=trace)
    elif cfg.method == "uc_scada":
        model, predicted = run_uc_scada(
            source_model, data.target_adapt, cfg.num_forget, sfda, ucfg,
            rank_factor=cfg.rank_factor, trace=trace,
        )
    elif cfg.method == "c_scada":
        seq = ForgetRequestSequence(
            cfg.requests,
            subset_fraction=cfg.continual_subset_fraction,
            epochs_after_first=cfg.continual_epochs,
        )
        stage_clock = [time.perf_counter()]

        def on_stage(i: int, stage_model: ClassifierModel, cumulative: tuple[int, ...]):
            elapsed = time.perf_counter() - stage_clock[0]
            labels = data.bundle.target_forget_eval.require_labels()
            mask = np.isin(labels, list(cumulative))
            stage_bundle_forget = data.bundle.target_forget_eval.subset(np.flatnonzero(mask))
            stage_reports[f"T{i + 1}"] = build_report(
                stage_model,
                data.bundle.target_retain_eval,
                stage_bundle_forget,
                data.bundle.ood_eval,
                wall_time_s=elapsed,
                num_bins=cfg.ece_bins,
                mia_seed=cfg.mia_seed,
            )
            stage_clock[0] = time.perf_counter()

        model = run_c_scada(source_model, data.target_adapt, seq, sfda, ucfg, on_stage=on_stage)
    else:  # pragma: no cover - guarded by ExperimentConfig
        raise ConfigError(f"unhandled method {cfg.method!r}")
    wall = time.perf_counter() - t0
    if trace is not None:
        trace.close()

    report = build_report(
        model,
        data.bundle.target_retain_eval,
        data.bundle.target_forget_eval,
        data.bundle.ood_eval,
        wall_time_s=wall,
        num_bins=cfg.ece_bins,
        mia_seed=cfg.mia_seed,
    )
    if out_dir is not None:
        (out_dir / f"report_seed{seed}.json").write_text(report.to_json())
        for stage, rep in stage_reports.items():
            (out_dir / f"report_seed{seed}_{stage}.json").write_text(rep.to_json())
        save_checkpoint(
            model,
            out_dir / f"model_seed{seed}.json",
            label_space=data.label_space,
            provenance="unlearned" if cfg.method in ("scada", "uc_scada", "c_scada") else "adapted",
            seed=seed,
            config_hash=cfg.config_hash(),
        )
    return SeedOutcome(seed=seed, report=report, stage_reports=stage_reports,
                       predicted_forget=predicted, trace_path=trace_path)


def write_results_csv(path: Path, rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        writer.writerows(rows)


def write_summary_csv(path: Path, method: str, reports: list[MetricsReport]) -> None:
    metric_names = ("retain_acc", "forget_acc", "unlearn_score", "mia_pct",
                    "ece_retain", "ece_forget", "wall_time_s")
    header = ["method", "n_seeds"]
    row: list = [method, len(reports)]
    for name in metric_names:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        header += [f"{name}_mean", f"{name}_std"]
        row += [f"{vals.mean():.6f}", f"{vals.std(ddof=0):.6f}"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerow(row)


def run_experiment(cfg: ExperimentConfig) -> dict[int, SeedOutcome]:
    """Run every seed, persist per-seed reports, aggregate CSVs and figures."""
    out_dir = Path(cfg.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {exc}") from exc
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    outcomes: dict[int, SeedOutcome] = {}
    rows = []
    for seed in cfg.seeds:
        outcome = run_seed(cfg, seed, out_dir)
        outcomes[seed] = outcome
        rows.append(outcome.report.csv_row(cfg.method, seed))
        log.info(
            "%s seed %d: retain %.1f forget %.1f score %.3f",
            cfg.method, seed, outcome.report.retain_acc,
            outcome.report.forget_acc, outcome.report.unlearn_score,
        )
    write_results_csv(out_dir / "results.csv", rows)
    write_summary_csv(out_dir / "summary.csv", cfg.method, [o.report for o in outcomes.values()])
    for seed, outcome in outcomes.items():
        if outcome.trace_path is not None and outcome.trace_path.exists():
            plots.plot_loss_trace(outcome.trace_path, out_dir / f"losses_seed{seed}.png")
        plots.plot_fnr_fpr(outcome.report, out_dir / f"fnr_fpr_seed{seed}.png")
    return outcomes
